"""Synthetic cross-modality atlas/target pairs with known labels and deformation.

Anatomy is a set of nested ellipsoids (an inner cavity inside a thin shell,
loosely modelled on a ventricle and its myocardium). The two modalities map
each label to a different intensity distribution, so intensities are not
comparable across the pair.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._ops import apply_separable
from .ddf import DisplacementField
from .registration import control_grid_dims, expansion_matrices
from .volume import LabelMap, Volume

DEFAULT_SHAPES = (
    # painted in order; later shapes overwrite earlier ones. Sized for 48^3.
    {"label": 2, "center": (24.0, 24.0, 24.0), "radii": (13.0, 11.0, 12.0)},
    {"label": 1, "center": (24.0, 24.0, 24.0), "radii": (9.5, 7.5, 8.5)},
)
REFERENCE_DIMS = (48, 48, 48)
MODALITY_A = {0: (0.1, 0.03), 1: (0.9, 0.05), 2: (0.5, 0.05)}
MODALITY_B = {0: (0.55, 0.03), 1: (0.15, 0.05), 2: (0.95, 0.05)}


@dataclass
class PhantomConfig:
    dims: tuple = (48, 48, 48)
    # None scales DEFAULT_SHAPES to dims
    shapes: tuple | None = None
    modality_a: dict = field(default_factory=lambda: dict(MODALITY_A))
    modality_b: dict = field(default_factory=lambda: dict(MODALITY_B))
    noise_std: float = 0.02
    # rigid motion of the anatomy from atlas to target, in voxels
    translation: tuple = (0.0, 0.0, 0.0)
    amplitude: float = 0.0
    control_spacing: int = 8
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.translation = tuple(float(t) for t in self.translation)
        if self.shapes is None:
            self.shapes = default_shapes(self.dims)
        self.modality_a = {int(k): tuple(v) for k, v in self.modality_a.items()}
        self.modality_b = {int(k): tuple(v) for k, v in self.modality_b.items()}
        self.shapes = tuple({"label": int(s["label"]), "center": tuple(map(float, s["center"])),
                             "radii": tuple(map(float, s["radii"]))} for s in self.shapes)
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        for s in self.shapes:
            c, r = np.array(s["center"]), np.array(s["radii"])
            if np.any(r <= 0):
                raise ValueError(f"radii must be positive, got {s['radii']}")
            if np.any(c - r < 0) or np.any(c + r > np.array(self.dims) - 1):
                raise ValueError(f"shape {s} does not fit inside dims {self.dims}")
        labels = {0} | {s["label"] for s in self.shapes}
        for name, table in (("modality_a", self.modality_a), ("modality_b", self.modality_b)):
            if not labels <= table.keys():
                raise ValueError(f"{name} lacks intensities for labels {sorted(labels - table.keys())}")

    def to_dict(self):
        d = asdict(self)
        d["shapes"] = [dict(s, center=list(s["center"]), radii=list(s["radii"])) for s in self.shapes]
        d["modality_a"] = {str(k): list(v) for k, v in self.modality_a.items()}
        d["modality_b"] = {str(k): list(v) for k, v in self.modality_b.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_shapes(dims):
    """:data:`DEFAULT_SHAPES` scaled per axis from a 48^3 grid to ``dims``."""
    f = (np.asarray(dims, dtype=np.float64) - 1.0) / (np.asarray(REFERENCE_DIMS) - 1.0)
    return tuple({"label": s["label"], "center": tuple(np.asarray(s["center"]) * f),
                  "radii": tuple(np.asarray(s["radii"]) * f)} for s in DEFAULT_SHAPES)


def paint_shapes(dims, shapes):
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    labels = np.zeros(dims, dtype=np.int64)
    for s in shapes:
        c = np.asarray(s["center"]).reshape(3, 1, 1, 1)
        r = np.asarray(s["radii"]).reshape(3, 1, 1, 1)
        labels[np.sum(((grid - c) / r) ** 2, axis=0) <= 1.0] = s["label"]
    return labels


def random_smooth_field(dims, amplitude, control_spacing, seed) -> DisplacementField:
    """Control nodes drawn uniformly from ``[-amplitude, amplitude]``, trilinearly expanded."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = np.random.default_rng(seed)
    nodes = rng.uniform(-amplitude, amplitude, size=(3, *control_grid_dims(dims, control_spacing)))
    return DisplacementField(apply_separable(nodes, expansion_matrices(dims, control_spacing)))


def warp_nearest(labels, disp):
    """``labels(x + disp(x))`` with nearest-neighbour lookup (ties to the lower index)."""
    dims = labels.shape
    idx = []
    for axis, n in enumerate(dims):
        base = np.arange(n, dtype=np.float64).reshape([-1 if a == axis else 1 for a in range(3)])
        q = np.ceil(base + disp[axis] - 0.5)
        idx.append(np.clip(q, 0, n - 1).astype(np.intp))
    return labels[tuple(idx)]


def _intensities(labels, table, noise_std, rng):
    out = np.zeros(labels.shape)
    for lab, (mean, std) in sorted(table.items()):
        mask = labels == lab
        out[mask] = mean + std * rng.standard_normal(int(mask.sum()))
    return out + noise_std * rng.standard_normal(labels.shape)


def generate_pair(config: PhantomConfig):
    """Return ``((atlas_img, atlas_label), (target_img, target_label), gt_ddf)``.

    The target label is the atlas label pulled back through ``gt_ddf``, i.e.
    ``L_t(x) = L_a(x + gt_ddf(x))`` with nearest-neighbour lookup.
    """
    deform_seed, atlas_seed, target_seed = np.random.SeedSequence(config.seed).spawn(3)
    label_set = tuple(sorted({0} | {s["label"] for s in config.shapes}))
    atlas_lab = paint_shapes(config.dims, config.shapes)
    gt = random_smooth_field(config.dims, config.amplitude, config.control_spacing, deform_seed).vectors
    gt = gt - np.asarray(config.translation).reshape(3, 1, 1, 1)
    target_lab = warp_nearest(atlas_lab, gt)
    atlas_img = _intensities(atlas_lab, config.modality_a, config.noise_std, np.random.default_rng(atlas_seed))
    target_img = _intensities(target_lab, config.modality_b, config.noise_std, np.random.default_rng(target_seed))
    return ((Volume(atlas_img), LabelMap(atlas_lab, label_set=label_set)),
            (Volume(target_img), LabelMap(target_lab, label_set=label_set)),
            DisplacementField(gt))


def subject_config(base: PhantomConfig, subject_seed, shape_jitter=0.1, center_jitter=2.0) -> PhantomConfig:
    """A per-subject variant of ``base``: radii scaled by up to ``shape_jitter``,
    the whole anatomy shifted by up to ``center_jitter`` voxels."""
    rng = np.random.default_rng(np.random.SeedSequence([int(subject_seed), 1]))
    shift = rng.uniform(-center_jitter, center_jitter, 3)
    scale = 1.0 + rng.uniform(-shape_jitter, shape_jitter, 3)
    shapes = [dict(s, center=tuple(np.asarray(s["center"]) + shift), radii=tuple(np.asarray(s["radii"]) * scale))
              for s in base.shapes]
    return replace(base, shapes=tuple(shapes), seed=int(subject_seed))


def cohort_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_cohort(base: PhantomConfig, n_subjects, seed, shape_jitter=0.1, center_jitter=2.0):
    """``n_subjects`` independent subjects, each a modality-A / modality-B pair.

    Subject ``i`` uses :func:`subject_config` with seed ``cohort_seed(seed, i)``.
    The modality-A side serves as an atlas, the modality-B side as a target.
    """
    configs = [subject_config(base, cohort_seed(seed, i), shape_jitter, center_jitter)
               for i in range(n_subjects)]
    return configs, [generate_pair(c) for c in configs]
