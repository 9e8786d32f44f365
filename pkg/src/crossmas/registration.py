"""Bidirectional atlas/target registration by direct optimisation of a pair of
control-grid displacement fields.

The forward field ``U`` warps the atlas onto the target grid and the backward
field ``V`` warps the target onto the atlas grid. Both are trilinear
expansions of coarse control grids and are optimised jointly on

    loss = -Ds(L_t, L_a o U) - Ds(L_a, L_t o V) + lam * consistency(U, V)

with a bias-corrected moment (Adam) update. A step that would raise the loss
is retried at half the step size, so the recorded loss never increases; the
step size recovers by 25% per accepted step, up to ``step_size``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._ops import apply_separable, apply_separable_adjoint, gaussian_smooth, interp_matrix
from .ddf import DisplacementField, warp_array, warp_array_vjp, warp_label
from .errors import DivergedError
from .losses import DEFAULT_LAMBDA, LossBreakdown, ScaleSet, l1_grad, multi_scale_dice_grad, smooth_l1, total_loss
from .metrics import dice_score
from .volume import LabelMap, Volume, one_hot


@dataclass
class RegistrationConfig:
    lam: float = DEFAULT_LAMBDA
    scales: tuple = (0.0, 1.0, 2.0, 4.0)
    control_spacing: int = 12
    iterations: int = 300
    step_size: float = 0.1
    moment_coeffs: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_backtracks: int = 4
    # stop once the total improved by less than tol over the last `patience` iterations
    tol: float = 1e-4
    patience: int = 25
    # "mean" divides the consistency sum by the voxel count before weighting
    cons_reduction: str = "mean"
    # width of the quadratic band of the smoothed L1 used for the consistency term
    l1_width: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.scales = ScaleSet(tuple(self.scales)).sigmas
        self.moment_coeffs = tuple(float(b) for b in self.moment_coeffs)
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if int(self.control_spacing) != self.control_spacing or self.control_spacing < 1:
            raise ValueError(f"control spacing must be an integer >= 1, got {self.control_spacing}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.tol < 0 or self.patience < 1:
            raise ValueError(f"need tol >= 0 and patience >= 1, got {self.tol}, {self.patience}")
        if not self.l1_width > 0:
            raise ValueError(f"l1 width must be positive, got {self.l1_width}")
        if self.cons_reduction not in ("mean", "sum"):
            raise ValueError(f"cons_reduction must be 'mean' or 'sum', got {self.cons_reduction!r}")
        b1, b2 = self.moment_coeffs
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"moment coefficients must lie in [0, 1), got {self.moment_coeffs}")

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["moment_coeffs"] = list(self.moment_coeffs)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RegistrationState:
    """Control-grid displacements for U (``params[0]``) and V (``params[1]``)."""

    params: np.ndarray  # (2, 3, cx, cy, cz)
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, grid_dims):
        shape = (2, 3, *grid_dims)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), 0)


@dataclass
class RegistrationResult:
    U: DisplacementField
    V: DisplacementField
    trace: list
    final_loss: LossBreakdown
    initial_dice: float
    final_dice: float
    config: RegistrationConfig = field(repr=False, default=None)

    def trace_lines(self):
        return [dict(iteration=i, **entry) for i, entry in enumerate(self.trace)]


def control_grid_dims(dims, spacing):
    return tuple(int(math.ceil((n - 1) / spacing)) + 1 for n in dims)


def expansion_matrices(dims, spacing):
    """Per-axis trilinear weights from control nodes (every ``spacing`` voxels) to voxels."""
    return [interp_matrix(c, np.arange(n) / spacing) for n, c in zip(dims, control_grid_dims(dims, spacing))]


def expand_control_grid(state: RegistrationState, dims, control_spacing, spacing=(1.0, 1.0, 1.0),
                        origin=(0.0, 0.0, 0.0)):
    """Dense (U, V) fields interpolating the control nodes of ``state``."""
    mats = expansion_matrices(dims, control_spacing)
    dense = apply_separable(state.params, mats)
    return (DisplacementField(dense[0], spacing, origin), DisplacementField(dense[1], spacing, origin))


def gradient_step(state: RegistrationState, grads, config: RegistrationConfig, lr=None) -> RegistrationState:
    """One bias-corrected first/second moment update; returns a new state."""
    b1, b2 = config.moment_coeffs
    lr = config.step_size if lr is None else lr
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return RegistrationState(params, m, v, t)


class RegistrationObjective:
    """The registration loss and its gradient as a function of control parameters."""

    def __init__(self, atlas_img, atlas_label, target_img, target_label, config: RegistrationConfig):
        self.config = config
        self.dims = tuple(atlas_img.shape)
        self.atlas_img = np.ascontiguousarray(atlas_img, dtype=np.float64)
        self.target_img = np.ascontiguousarray(target_img, dtype=np.float64)
        self.atlas_fg = np.ascontiguousarray(atlas_label, dtype=np.float64)
        self.target_fg = np.ascontiguousarray(target_label, dtype=np.float64)
        self.scales = config.scales
        self.target_smoothed = [gaussian_smooth(self.target_fg, s) for s in self.scales]
        self.atlas_smoothed = [gaussian_smooth(self.atlas_fg, s) for s in self.scales]
        self.mats = expansion_matrices(self.dims, config.control_spacing)
        self.atlas_stack = np.concatenate([self.atlas_img[None], self.atlas_fg])
        self.target_stack = np.concatenate([self.target_img[None], self.target_fg])
        n = self.atlas_img.size
        self.cons_scale = 1.0 / n if config.cons_reduction == "mean" else 1.0

    @classmethod
    def from_volumes(cls, atlas_img: Volume, atlas_label: LabelMap, target_img: Volume,
                     target_label: LabelMap, config: RegistrationConfig):
        dims = atlas_img.dims
        for other in (atlas_label.dims, target_img.dims, target_label.dims):
            if tuple(other) != tuple(dims):
                raise ValueError(f"input dims differ: {tuple(other)} vs {tuple(dims)}")
        if atlas_label.label_set != target_label.label_set:
            raise ValueError(f"label sets differ: {atlas_label.label_set} vs {target_label.label_set}")
        keep = [i for i, lab in enumerate(atlas_label.label_set) if lab != 0]
        return cls(atlas_img.data, one_hot(atlas_label).channels[keep], target_img.data,
                   one_hot(target_label).channels[keep], config)

    def grid_dims(self):
        return control_grid_dims(self.dims, self.config.control_spacing)

    def fields(self, params):
        dense = apply_separable(params, self.mats)
        return np.ascontiguousarray(dense[0]), np.ascontiguousarray(dense[1])

    def __call__(self, params, need_grad=True):
        """Return ``(LossBreakdown, gradient w.r.t. params or None, consistency sum)``."""
        u, v = self.fields(params)
        lam = self.config.lam
        # channels sharing a field are warped together: [image, foreground labels...]
        warped_a = warp_array(self.atlas_stack, u)
        warped_t = warp_array(self.target_stack, v)
        restored_a = warp_array(warped_a[:1], v)[0]
        restored_t = warp_array(warped_t[:1], u)[0]

        d1, g_la = multi_scale_dice_grad(self.target_smoothed, warped_a[1:], self.scales)
        d2, g_lt = multi_scale_dice_grad(self.atlas_smoothed, warped_t[1:], self.scales)
        res_a = restored_a - self.atlas_img
        res_t = restored_t - self.target_img
        w = self.config.l1_width
        cons_sum = float(np.sum(np.abs(res_a)) + np.sum(np.abs(res_t)))
        smoothed = float(np.sum(smooth_l1(res_a, w)) + np.sum(smooth_l1(res_t, w)))
        loss = total_loss(-(d1 + d2), smoothed * self.cons_scale, lam)
        if not need_grad:
            return loss, None, cons_sum

        scale = lam * self.cons_scale
        g_img_a, gv = warp_array_vjp(warped_a[:1], v, scale * l1_grad(res_a, w)[None])
        g_img_t, gu = warp_array_vjp(warped_t[:1], u, scale * l1_grad(res_t, w)[None])
        _, gu_a = warp_array_vjp(self.atlas_stack, u, np.concatenate([g_img_a, -g_la]), need_input=False)
        _, gv_t = warp_array_vjp(self.target_stack, v, np.concatenate([g_img_t, -g_lt]), need_input=False)
        dense_grad = np.stack([gu + gu_a, gv + gv_t])
        return loss, apply_separable_adjoint(dense_grad, self.mats), cons_sum


def _entry(loss: LossBreakdown, cons_sum):
    return {"dice_term": loss.dice_term, "cons_term": loss.cons_term, "cons_sum": cons_sum,
            "total": loss.total}


def foreground_dice(a: LabelMap, b: LabelMap):
    return dice_score(LabelMap(a.foreground.astype(int)), LabelMap(b.foreground.astype(int)), 1)


def register_bidirectional(atlas_img: Volume, atlas_label: LabelMap, target_img: Volume,
                           target_label: LabelMap, config: RegistrationConfig | None = None,
                           init_translation=None) -> RegistrationResult:
    """Jointly estimate the forward and backward fields between an atlas and a target.

    ``init_translation`` (voxels) seeds U with that constant displacement and V
    with its negative; the default is the zero field.
    """
    config = config or RegistrationConfig()
    objective = RegistrationObjective.from_volumes(atlas_img, atlas_label, target_img, target_label, config)
    state = RegistrationState.zeros(objective.grid_dims())
    if init_translation is not None:
        shift = np.asarray(init_translation, dtype=np.float64).reshape(3, 1, 1, 1)
        state.params[0] += shift
        state.params[1] -= shift

    U0, _ = expand_control_grid(state, objective.dims, config.control_spacing)
    initial = foreground_dice(warp_label(atlas_label, U0), target_label)

    loss, grad, cons_sum = objective(state.params)
    if not np.isfinite(loss.total):
        raise DivergedError(0)
    trace = []
    lr = config.step_size
    for it in range(config.iterations):
        trace.append(_entry(loss, cons_sum))
        if it == config.iterations - 1:
            break
        if it >= config.patience and trace[it - config.patience]["total"] - loss.total < config.tol:
            break
        for _ in range(config.max_backtracks + 1):
            trial = gradient_step(state, grad, config, lr)
            t_loss, t_grad, t_cons = objective(trial.params)
            if not np.isfinite(t_loss.total) or not np.all(np.isfinite(t_grad)):
                raise DivergedError(it + 1)
            if t_loss.total <= loss.total:
                state, loss, grad, cons_sum = trial, t_loss, t_grad, t_cons
                lr = min(config.step_size, lr * 1.25)
                break
            lr *= 0.5
        else:
            # keep the parameters, but let the moments absorb this gradient
            state = replace(state, m=trial.m, v=trial.v, t=trial.t)

    U, V = expand_control_grid(state, objective.dims, config.control_spacing,
                               target_img.spacing, target_img.origin)
    final = foreground_dice(warp_label(atlas_label, U), target_label)
    return RegistrationResult(U, V, trace, loss, initial, final, config)
