"""Attention gate on 3D feature maps, with hand-written backward passes.

Feature maps are arrays of shape ``(channels, nx, ny, nz)``. The gate uses
per-voxel (1x1x1) linear maps::

    alpha = sigmoid(w_c . relu(w_g . up(g) + b_g + w_f . f + b_f) + b_c)
    f_hat = f * alpha
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ._ops import apply_separable, apply_separable_adjoint, interp_matrix


@dataclass
class GateParams:
    w_g: np.ndarray  # (C_i, C_g)
    w_f: np.ndarray  # (C_i, C_f)
    w_c: np.ndarray  # (C_i,)
    b_g: np.ndarray  # (C_i,)
    b_f: np.ndarray  # (C_i,)
    b_c: float = 0.0

    def __post_init__(self):
        self.w_g = np.atleast_2d(np.asarray(self.w_g, dtype=np.float64))
        self.w_f = np.atleast_2d(np.asarray(self.w_f, dtype=np.float64))
        self.w_c = np.asarray(self.w_c, dtype=np.float64).reshape(-1)
        self.b_g = np.asarray(self.b_g, dtype=np.float64).reshape(-1)
        self.b_f = np.asarray(self.b_f, dtype=np.float64).reshape(-1)
        self.b_c = float(self.b_c)
        ci = self.w_g.shape[0]
        if self.w_f.shape[0] != ci or self.w_c.size != ci or self.b_g.size != ci or self.b_f.size != ci:
            raise ValueError("gate parameter shapes disagree on the intermediate width")

    @classmethod
    def zeros(cls, c_g, c_f, c_i):
        return cls(np.zeros((c_i, c_g)), np.zeros((c_i, c_f)), np.zeros(c_i), np.zeros(c_i), np.zeros(c_i))

    @classmethod
    def random(cls, c_g, c_f, c_i, scale=0.5, seed=0):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, scale, (c_i, c_g)), rng.normal(0, scale, (c_i, c_f)),
                   rng.normal(0, scale, c_i), rng.normal(0, scale, c_i), rng.normal(0, scale, c_i),
                   float(rng.normal(0, scale)))

    def as_dict(self):
        return {f.name: np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (float(np.asarray(v)) if k == "b_c" else v) for k, v in d.items()})


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _upsample_mats(dims, factor):
    mats = []
    for n in dims:
        m = n * factor
        coords = np.zeros(m) if m == 1 else np.arange(m) * ((n - 1) / (m - 1))
        mats.append(interp_matrix(n, coords))
    return mats


def trilinear_upsample(x, factor=2):
    """Aligned-corner trilinear upsampling of the three spatial axes by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    return apply_separable(x, _upsample_mats(x.shape[-3:], int(factor)))


def trilinear_upsample_adjoint(y, in_dims, factor=2):
    if factor == 1:
        return np.asarray(y, dtype=np.float64).copy()
    return apply_separable_adjoint(y, _upsample_mats(in_dims, int(factor)))


def _gate_forward(g, f, p: GateParams):
    if g.shape[0] != p.w_g.shape[1] or f.shape[0] != p.w_f.shape[1]:
        raise ValueError("feature channels do not match gate parameters")
    gu = trilinear_upsample(g, 2)
    if gu.shape[1:] != f.shape[1:]:
        raise ValueError(f"upsampled gating dims {gu.shape[1:]} do not match skip features {f.shape[1:]}")
    z = (np.einsum("ig,g...->i...", p.w_g, gu) + np.einsum("if,f...->i...", p.w_f, f)
         + (p.b_g + p.b_f)[:, None, None, None])
    h = relu(z)
    s = np.einsum("i,i...->...", p.w_c, h) + p.b_c
    return gu, z, h, sigmoid(s)[None]


def attention_coefficients(g, f, p: GateParams):
    """Single-channel coefficient map in (0, 1) at the resolution of ``f``."""
    return _gate_forward(np.asarray(g, dtype=np.float64), np.asarray(f, dtype=np.float64), p)[3]


def apply_gate(f, alpha):
    """Rescale every channel of ``f`` by the single-channel ``alpha``."""
    f = np.asarray(f, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 3:
        alpha = alpha[None]
    if alpha.shape[0] != 1 or alpha.shape[1:] != f.shape[1:]:
        raise ValueError(f"alpha of shape {alpha.shape} cannot gate features of shape {f.shape}")
    return f * alpha


def attention_gate(g, f, p: GateParams):
    alpha = attention_coefficients(g, f, p)
    return apply_gate(f, alpha), alpha


def attention_gate_backward(g, f, p: GateParams, grad_out):
    """Gradients of ``sum(grad_out * f_hat)`` w.r.t. the inputs and every parameter.

    Returns a dict with keys ``g``, ``f`` and the :class:`GateParams` field names.
    """
    g = np.asarray(g, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    gu, z, h, alpha = _gate_forward(g, f, p)
    g_alpha = np.sum(grad_out * f, axis=0)
    g_s = g_alpha * alpha[0] * (1.0 - alpha[0])
    g_h = p.w_c[:, None, None, None] * g_s[None]
    g_z = g_h * (z > 0)
    g_gu = np.einsum("ig,ixyz->gxyz", p.w_g, g_z)
    return {
        "g": trilinear_upsample_adjoint(g_gu, g.shape[1:], 2),
        "f": grad_out * alpha + np.einsum("if,ixyz->fxyz", p.w_f, g_z),
        "w_g": np.einsum("ixyz,gxyz->ig", g_z, gu),
        "w_f": np.einsum("ixyz,fxyz->if", g_z, f),
        "w_c": np.einsum("xyz,ixyz->i", g_s, h),
        "b_g": g_z.sum(axis=(1, 2, 3)),
        "b_f": g_z.sum(axis=(1, 2, 3)),
        "b_c": np.asarray(g_s.sum()),
    }


def grad_check(fn, params, probe=None, step=1e-4, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``fn(params) -> (value, grads)`` where ``params`` and ``grads`` are dicts of
    arrays with matching keys. ``probe`` limits the check to that many random
    entries per parameter (all entries when None). Entries whose gradients are
    below ``1e-6 * max(1, max|grad|)`` are compared against that floor, which
    sits well above the round-off of a ``step``-sized difference quotient.
    """
    rng = np.random.default_rng(seed)
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, grads = fn(params)
    worst = 0.0
    for name, value in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if probe is not None and probe < flat.size:
            idx = rng.choice(flat.size, size=probe, replace=False)
        floor = 1e-6 * max(1.0, float(np.abs(analytic).max(initial=0.0)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = fn(params)[0]
            flat[i] = orig - step
            down = fn(params)[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
