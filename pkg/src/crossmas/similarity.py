"""Voxel-wise similarity between a warped atlas label and a target.

Three sources of weights for label fusion:

* ``ground_truth_similarity``: the fraction of a local patch on which the
  warped atlas label agrees with the gold label (the training target).
* ``SimilarityModel``: a logistic model over a fixed multi-scale feature
  stack, trained by full-batch gradient descent on cross-entropy.
* ``mi_patch_similarity``: local mutual information between the warped
  atlas image and the target image.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import _backend
from ._ops import box_count, box_sum, gaussian_smooth
from .nnops import sigmoid
from .volume import LabelMap, Volume, one_hot

LN2 = math.log(2.0)
FEATURE_SCALES = (0.0, 1.0, 2.0, 4.0)


class SimilarityMap(Volume):
    """A :class:`Volume` whose values are weights in ``[0, 1]``."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all((self.data >= 0.0) & (self.data <= 1.0)):
            raise ValueError("similarity values must lie in [0, 1]")


@dataclass(frozen=True)
class PatchSpec:
    radius: tuple = (1, 1, 1)

    def __post_init__(self):
        r = tuple(int(v) for v in np.broadcast_to(np.asarray(self.radius), (3,)))
        if min(r) < 0:
            raise ValueError(f"patch radius must be >= 0, got {r}")
        object.__setattr__(self, "radius", r)

    @property
    def size(self):
        return tuple(2 * r + 1 for r in self.radius)


def _check_dims(*items):
    dims = [tuple(x.dims) for x in items]
    if len(set(dims)) != 1:
        raise ValueError(f"dims differ: {dims}")


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def ground_truth_similarity(warped_label: LabelMap, target_label: LabelMap,
                            patch: PatchSpec = PatchSpec()) -> SimilarityMap:
    """Fraction of each voxel's patch on which the two label maps agree.

    Patches are truncated at the border and divided by their in-bounds count.
    """
    _check_dims(warped_label, target_label)
    agree = (warped_label.data == target_label.data).astype(np.float64)
    counts = box_count(agree.shape, patch.radius)
    # the sums are exact small integers, so round away correlate1d's fp drift
    values = np.rint(box_sum(agree, patch.radius)) / counts
    return SimilarityMap(values, target_label.spacing, target_label.origin)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    """Layout of the per-voxel feature stack.

    In order:

    1. for each scale, the one-hot warped label channels (``label_set`` order)
       smoothed at that scale;
    2. for each scale, the target image local mean then local standard
       deviation (a Gaussian window for ``sigma > 0``, the patch box at 0);
    3. if ``interactions``, for each label channel ``l`` the native one-hot
       ``l`` multiplied by every feature of groups 1 and 2.

    The interactions let a linear score depend on which label the atlas
    proposes, e.g. "bright target voxel" is evidence for one label and
    against another.
    """

    label_set: tuple = (0, 1, 2)
    scales: tuple = FEATURE_SCALES
    patch: tuple = (1, 1, 1)
    interactions: bool = True

    def __post_init__(self):
        object.__setattr__(self, "label_set", tuple(int(v) for v in self.label_set))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "patch", PatchSpec(self.patch).radius)
        if min(self.scales) < 0:
            raise ValueError("scales must be non-negative")

    @property
    def n_base(self):
        return len(self.scales) * (len(self.label_set) + 2)

    @property
    def n_features(self):
        n = self.n_base
        return n * (1 + len(self.label_set)) if self.interactions else n

    def to_dict(self):
        return {"label_set": list(self.label_set), "scales": list(self.scales),
                "patch": list(self.patch), "interactions": self.interactions}


def _local_stats(img, sigma, radius):
    if sigma == 0:
        counts = box_count(img.shape, radius)
        mean = box_sum(img, radius) / counts
        sq = box_sum(img * img, radius) / counts
    else:
        mean = gaussian_smooth(img, sigma)
        sq = gaussian_smooth(img * img, sigma)
    return mean, np.sqrt(np.maximum(sq - mean * mean, 0.0))


def extract_features(target_img: Volume, warped_label: LabelMap, config: FeatureConfig = FeatureConfig()):
    """Feature stack of shape ``(n_features, nx, ny, nz)``; see :class:`FeatureConfig`."""
    _check_dims(target_img, warped_label)
    unknown = set(np.unique(warped_label.data)) - set(config.label_set)
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} are not in the feature label set")
    hot = one_hot(LabelMap(warped_label.data, label_set=config.label_set)).channels
    base = [gaussian_smooth(hot, s) for s in config.scales]
    for s in config.scales:
        base.append(np.stack(_local_stats(target_img.data, s, config.patch)))
    base = np.concatenate(base)
    if not config.interactions:
        return base
    return np.concatenate([base] + [h[None] * base for h in hot])


# ---------------------------------------------------------------------------
# Logistic model
# ---------------------------------------------------------------------------

@dataclass
class SimilarityModel:
    """``sigmoid(features . weights + bias)`` on raw (unstandardised) features."""

    weights: np.ndarray
    bias: float = 0.0
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.bias = float(self.bias)
        if self.weights.size != self.features.n_features:
            raise ValueError(f"expected {self.features.n_features} weights, got {self.weights.size}")

    @classmethod
    def zeros(cls, features: FeatureConfig = FeatureConfig()):
        return cls(np.zeros(features.n_features), 0.0, features)

    def score(self, feats):
        return np.tensordot(self.weights, feats, axes=1) + self.bias

    def to_json(self):
        return json.dumps({"features": self.features.to_dict(), "weights": self.weights.tolist(),
                           "bias": self.bias}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["weights"], d["bias"], FeatureConfig(**d["features"]))


@dataclass
class TrainConfig:
    iterations: int = 300
    step_size: float = 1.0
    max_backtracks: int = 20
    # weight agree/disagree voxels equally instead of counting every voxel once
    balance_classes: bool = False
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")


@dataclass
class TrainResult:
    model: SimilarityModel
    trace: list  # mean cross-entropy per iterate


def cross_entropy(pred, target, weight=None):
    """Mean binary cross-entropy (nats) of predictions against soft targets."""
    pred = np.clip(pred, 1e-12, 1.0 - 1e-12)
    ce = -(target * np.log(pred) + (1.0 - target) * np.log1p(-pred))
    if weight is None:
        return float(np.mean(ce))
    return float(np.sum(weight * ce) / np.sum(weight))


def _ce_from_score(z, y, w):
    # log(1 + e^z) - y z, written to stay finite for large |z|
    ce = np.logaddexp(0.0, z) - y * z
    return float(np.dot(w, ce))


def train_similarity(pairs, config: TrainConfig = TrainConfig(), seed=0) -> TrainResult:
    """Fit a :class:`SimilarityModel` by full-batch gradient descent.

    ``pairs`` holds ``(target_img, warped_label, w_gt)`` triples. Features are
    standardised for the descent and the scaling is folded back into the
    returned weights. A step that raises the loss is halved until it does not,
    so the loss trace never increases. ``seed`` is accepted for interface
    symmetry; the descent itself draws no random numbers.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    fc = config.features
    xs, ys = [], []
    for img, lab, w in pairs:
        _check_dims(img, lab, w)
        f = extract_features(img, lab, fc)
        xs.append(f.reshape(f.shape[0], -1))
        ys.append(np.asarray(w.data, dtype=np.float64).ravel())
    x = np.concatenate(xs, axis=1)
    y = np.concatenate(ys)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite features")

    if config.balance_classes:
        pos = y >= 0.5
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        w = np.where(pos, 0.5 / max(n_pos, 1), 0.5 / max(n_neg, 1))
    else:
        w = np.full(y.size, 1.0 / y.size)

    mu = x.mean(axis=1)
    sd = x.std(axis=1)
    sd[sd < 1e-12] = 1.0
    xs_ = (x - mu[:, None]) / sd[:, None]

    theta = np.zeros(x.shape[0])
    b = 0.0
    z = np.zeros(y.size)
    loss = _ce_from_score(z, y, w)
    trace = [loss]
    lr = config.step_size
    for _ in range(config.iterations):
        r = w * (sigmoid(z) - y)
        g_theta = xs_ @ r
        g_b = float(r.sum())
        for _ in range(config.max_backtracks + 1):
            t_theta, t_b = theta - lr * g_theta, b - lr * g_b
            t_z = t_theta @ xs_ + t_b
            t_loss = _ce_from_score(t_z, y, w)
            if t_loss <= loss:
                theta, b, z, loss = t_theta, t_b, t_z, t_loss
                lr = min(config.step_size, lr * 2.0)
                break
            lr *= 0.5
        else:
            trace.append(loss)
            break
        trace.append(loss)

    weights = theta / sd
    bias = b - float(np.dot(weights, mu))
    return TrainResult(SimilarityModel(weights, bias, fc), trace)


def predict_similarity(model: SimilarityModel, target_img: Volume, warped_label: LabelMap,
                       features: FeatureConfig | None = None) -> SimilarityMap:
    if features is not None and features != model.features:
        raise ValueError("feature config does not match the model")
    z = model.score(extract_features(target_img, warped_label, model.features))
    # clip the score so the output stays strictly inside (0, 1) in float64
    return SimilarityMap(sigmoid(np.clip(z, -30.0, 30.0)), target_img.spacing, target_img.origin)


def roc_auc(scores, labels):
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Mutual information
# ---------------------------------------------------------------------------

def patch_mutual_information(a, b, radius=(3, 3, 3), bins=16):
    """Raw base-2 MI per voxel over (2r+1)^3 patches, truncated at the border."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    rx, ry, rz = PatchSpec(radius).radius
    return _backend.patch_mi(a, b, rx, ry, rz, int(bins))


def mi_patch_similarity(target_img: Volume, warped_img: Volume, patch: PatchSpec = PatchSpec((3, 3, 3)),
                        bins=16) -> SimilarityMap:
    """Local MI rescaled to ``[0, 1]`` by the maximum over the volume."""
    _check_dims(target_img, warped_img)
    mi = patch_mutual_information(target_img.data, warped_img.data, patch.radius, bins)
    peak = mi.max()
    values = mi / peak if peak > 0 else np.zeros_like(mi)
    return SimilarityMap(np.clip(values, 0.0, 1.0), target_img.spacing, target_img.origin)
