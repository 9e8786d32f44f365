"""Registration losses: multi-scale soft Dice, forward/backward consistency,
and their weighted sum. Each array-level term has an analytic gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ._ops import gaussian_smooth, gaussian_smooth_adjoint
from .ddf import DisplacementField, warp_array, warp_array_vjp
from .volume import LabelMap, ProbVolume, Volume, one_hot

DICE_EPS = 1e-7
L1_SMOOTH_WIDTH = 1e-6
DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class ScaleSet:
    """Gaussian sigmas (voxels) for the multi-scale Dice; 0 is the native scale."""

    sigmas: tuple = (0.0, 1.0, 2.0, 4.0)

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas:
            raise ValueError("scale set must not be empty")
        if min(sigmas) < 0:
            raise ValueError(f"scales must be non-negative, got {sigmas}")
        if 0.0 not in sigmas:
            raise ValueError("scale set must include the native scale 0")
        object.__setattr__(self, "sigmas", sigmas)

    def __iter__(self):
        return iter(self.sigmas)

    def __len__(self):
        return len(self.sigmas)


@dataclass
class LossBreakdown:
    dice_term: float
    cons_term: float
    total: float
    lam: float

    def to_dict(self):
        return asdict(self)


def total_loss(dice_term, cons_term, lam=DEFAULT_LAMBDA) -> LossBreakdown:
    """``dice_term + lam * cons_term``."""
    if not lam >= 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if cons_term < 0:
        raise ValueError(f"consistency term must be non-negative, got {cons_term}")
    return LossBreakdown(float(dice_term), float(cons_term), float(dice_term + lam * cons_term), float(lam))


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def _dice_sums(p, q, eps):
    pf = p.reshape(p.shape[0], -1)
    qf = q.reshape(q.shape[0], -1)
    num = 2.0 * np.einsum("ij,ij->i", pf, qf)
    den = np.einsum("ij,ij->i", pf, pf) + np.einsum("ij,ij->i", qf, qf) + eps
    return num, den


def soft_dice_array(p, q, eps=DICE_EPS):
    """Mean over channels of ``2 sum(pq) / (sum(p^2) + sum(q^2) + eps)``."""
    num, den = _dice_sums(p, q, eps)
    return float(np.mean(num / den))


def soft_dice_grad(p, q, eps=DICE_EPS):
    """Value of :func:`soft_dice_array` and its gradient with respect to ``q``."""
    num, den = _dice_sums(p, q, eps)
    shape = (-1,) + (1,) * (p.ndim - 1)
    n = p.shape[0]
    grad = p * (2.0 / (n * den)).reshape(shape) - q * (2.0 * num / (n * den ** 2)).reshape(shape)
    return float(np.mean(num / den)), grad


def _foreground(prob: ProbVolume):
    keep = [i for i, lab in enumerate(prob.label_set) if lab != 0]
    return prob.channels[keep]


def _as_prob(x, label_set=None):
    if isinstance(x, ProbVolume):
        return x
    if isinstance(x, LabelMap):
        if label_set is not None:
            x = LabelMap(x.data, x.spacing, x.origin, label_set)
        return one_hot(x)
    raise TypeError(f"expected LabelMap or ProbVolume, got {type(x).__name__}")


def _aligned(a, b):
    labels = None
    if isinstance(a, LabelMap) and isinstance(b, LabelMap):
        labels = tuple(sorted(set(a.label_set) | set(b.label_set)))
    pa, pb = _as_prob(a, labels), _as_prob(b, labels)
    if pa.dims != pb.dims:
        raise ValueError(f"dims differ: {pa.dims} vs {pb.dims}")
    if pa.label_set != pb.label_set:
        raise ValueError(f"channel mismatch: {pa.label_set} vs {pb.label_set}")
    return pa, pb


def soft_dice(p, q) -> float:
    """Soft Dice averaged over the foreground channels of two probability volumes."""
    pa, pb = _aligned(p, q)
    return soft_dice_array(_foreground(pa), _foreground(pb))


def multi_scale_dice_array(a_fg, b_fg, scales):
    return float(np.mean([soft_dice_array(gaussian_smooth(a_fg, s), gaussian_smooth(b_fg, s))
                          for s in scales]))


def multi_scale_dice(a, b, scales=ScaleSet()) -> float:
    """Soft Dice of Gaussian-smoothed one-hot volumes, averaged over ``scales``."""
    pa, pb = _aligned(a, b)
    return multi_scale_dice_array(_foreground(pa), _foreground(pb), ScaleSet(tuple(scales)))


def multi_scale_dice_grad(fixed_smoothed, moving, scales):
    """Value and gradient (w.r.t. ``moving``) of the multi-scale Dice.

    ``fixed_smoothed[k]`` is the fixed side already smoothed at ``scales[k]``.
    """
    total = 0.0
    grad = np.zeros_like(moving)
    for fixed, s in zip(fixed_smoothed, scales):
        value, g = soft_dice_grad(fixed, gaussian_smooth(moving, s))
        total += value
        grad += gaussian_smooth_adjoint(g, s)
    n = len(scales)
    return total / n, grad / n


def dice_loss(target_label, warped_atlas_label, atlas_label, warped_target_label, scales=ScaleSet()) -> float:
    """Negative symmetric multi-scale Dice; ranges over ``[-2, 0]``."""
    return -(multi_scale_dice(target_label, warped_atlas_label, scales)
             + multi_scale_dice(atlas_label, warped_target_label, scales))


# ---------------------------------------------------------------------------
# Consistency
# ---------------------------------------------------------------------------

class Consistency(NamedTuple):
    total: float
    mean: float


def smooth_l1(r, width=L1_SMOOTH_WIDTH):
    """``|r|`` with the kink replaced by ``r^2 / (2 width)`` inside ``|r| < width``."""
    a = np.abs(r)
    return np.where(a < width, 0.5 * r * r / width, a - 0.5 * width)


def l1_grad(r, width=L1_SMOOTH_WIDTH):
    """Derivative of :func:`smooth_l1`; the sign of ``r`` outside the band."""
    return np.clip(r / width, -1.0, 1.0)


def _roundtrip(img, first, second):
    warped = warp_array(img[None], first)
    return warped, warp_array(warped, second)[0]


def consistency_loss(atlas_img: Volume, target_img: Volume, forward: DisplacementField,
                     backward: DisplacementField) -> Consistency:
    """L1 distance between each image and its forward-backward restoration.

    Returns the voxel sum and the per-voxel mean.
    """
    dims = atlas_img.dims
    for other in (target_img.dims, forward.dims, backward.dims):
        if tuple(other) != tuple(dims):
            raise ValueError(f"dims differ: {tuple(other)} vs {tuple(dims)}")
    _, restored_a = _roundtrip(atlas_img.data, forward.vectors, backward.vectors)
    _, restored_t = _roundtrip(target_img.data, backward.vectors, forward.vectors)
    total = float(np.sum(np.abs(restored_a - atlas_img.data)) + np.sum(np.abs(restored_t - target_img.data)))
    return Consistency(total, total / atlas_img.data.size)


def consistency_grad(atlas_img, target_img, u, v, scale=1.0):
    """Sum-consistency value and ``scale``-weighted gradients w.r.t. ``u`` and ``v``.

    Arrays only: images ``(nx, ny, nz)``, fields ``(3, nx, ny, nz)``.
    """
    warped_a, restored_a = _roundtrip(atlas_img, u, v)
    warped_t, restored_t = _roundtrip(target_img, v, u)
    res_a = restored_a - atlas_img
    res_t = restored_t - target_img
    value = float(np.sum(np.abs(res_a)) + np.sum(np.abs(res_t)))

    g_warped_a, gv = warp_array_vjp(warped_a, v, scale * l1_grad(res_a)[None])
    _, gu = warp_array_vjp(atlas_img[None], u, g_warped_a, need_input=False)
    g_warped_t, gu2 = warp_array_vjp(warped_t, u, scale * l1_grad(res_t)[None])
    _, gv2 = warp_array_vjp(target_img[None], v, g_warped_t, need_input=False)
    return value, gu + gu2, gv + gv2
