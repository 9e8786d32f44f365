"""Dense displacement fields and trilinear warping.

A field stores one 3-vector per voxel in voxel units, so ``x + u(x)`` indexes
the source grid directly. Sampling outside the grid clamps to the nearest
edge voxel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .errors import HeaderError
from .io import read_volume, write_json, write_volume
from .volume import LabelMap, ProbVolume, Volume, _triple, one_hot


@dataclass
class DisplacementField:
    vectors: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 4 or self.vectors.shape[0] != 3:
            raise ValueError(f"displacement vectors must have shape (3, nx, ny, nz), got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement vectors must be finite")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")

    @property
    def dims(self):
        return self.vectors.shape[1:]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        return cls(np.zeros((3, *dims)), spacing, origin)

    @classmethod
    def constant(cls, dims, vector, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        vec = np.asarray(vector, dtype=np.float64).reshape(3, 1, 1, 1)
        return cls(np.broadcast_to(vec, (3, *dims)).copy(), spacing, origin)

    def in_mm(self):
        return self.vectors * np.asarray(self.spacing).reshape(3, 1, 1, 1)


def _check_dims(dims, ddf):
    if tuple(dims) != tuple(ddf.dims):
        raise ValueError(f"field dims {tuple(ddf.dims)} do not match volume dims {tuple(dims)}")


def warp_array(channels, disp):
    """Warp a ``(C, nx, ny, nz)`` array by a ``(3, nx, ny, nz)`` displacement array."""
    return _backend.warp(np.ascontiguousarray(channels, dtype=np.float64),
                         np.ascontiguousarray(disp, dtype=np.float64))


def warp_array_vjp(channels, disp, grad_out, need_input=True):
    """Gradients of ``sum(grad_out * warp_array(channels, disp))``.

    Returns ``(d/d channels or None, d/d disp)``.
    """
    return _backend.warp_vjp(np.ascontiguousarray(channels, dtype=np.float64),
                             np.ascontiguousarray(disp, dtype=np.float64),
                             np.ascontiguousarray(grad_out, dtype=np.float64), bool(need_input))


def warp_scalar(vol, ddf: DisplacementField):
    """``out(x) = vol(x + ddf(x))`` for a :class:`Volume` or :class:`ProbVolume`."""
    if isinstance(vol, ProbVolume):
        _check_dims(vol.dims, ddf)
        out = warp_array(vol.channels, ddf.vectors)
        return ProbVolume(out, vol.label_set, vol.spacing, vol.origin, check=False)
    _check_dims(vol.dims, ddf)
    return vol.like(warp_array(vol.data[None], ddf.vectors)[0])


def warp_label(labels: LabelMap, ddf: DisplacementField) -> LabelMap:
    """Warp hard labels through their one-hot encoding; ties go to the lowest label."""
    _check_dims(labels.dims, ddf)
    return warp_scalar(one_hot(labels), ddf).argmax()


def composed_sample(warped: Volume, back_ddf: DisplacementField) -> Volume:
    """Resample an already-warped image through the opposite field."""
    return warp_scalar(warped, back_ddf)


def restore_roundtrip(atlas_img: Volume, forward: DisplacementField, backward: DisplacementField) -> Volume:
    """Warp forward then backward; a consistent pair restores the input."""
    _check_dims(atlas_img.dims, forward)
    _check_dims(atlas_img.dims, backward)
    return composed_sample(warp_scalar(atlas_img, forward), backward)


def roundtrip_residual(atlas_img: Volume, forward, backward, margin=0):
    """Mean absolute restoration error, optionally ignoring a border ``margin``."""
    restored = restore_roundtrip(atlas_img, forward, backward)
    diff = np.abs(restored.data - atlas_img.data)
    if margin:
        m = margin
        diff = diff[m:-m, m:-m, m:-m]
    return float(diff.mean())


def jacobian_determinant(ddf: DisplacementField):
    """Determinant of ``I + grad(u)`` by central differences (one-sided at borders)."""
    grads = np.stack([np.stack(np.gradient(ddf.vectors[c]), axis=0) for c in range(3)], axis=0)
    jac = grads + np.eye(3).reshape(3, 3, 1, 1, 1)
    return np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))


COMPONENTS = ("x", "y", "z")


def write_ddf(path, ddf: DisplacementField):
    """Write one f32 ``.mvol`` per component plus a header listing them."""
    path = Path(path)
    stem = path.name[:-len(".json")] if path.name.endswith(".json") else path.stem
    names = []
    for axis, comp in enumerate(COMPONENTS):
        name = f"{stem}_{comp}.mvol"
        write_volume(path.parent / name, Volume(ddf.vectors[axis], ddf.spacing, ddf.origin))
        names.append(name)
    write_json(path, {"kind": "ddf", "units": "voxel", "components": names})
    return path


def read_ddf(path) -> DisplacementField:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        names = header["components"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"{path}: malformed displacement-field header") from exc
    if header.get("kind") != "ddf" or len(names) != 3:
        raise HeaderError(f"{path}: expected a ddf header with three components")
    comps = [read_volume(path.parent / n) for n in names]
    if any(not isinstance(c, Volume) for c in comps) or len({c.dims for c in comps}) != 1:
        raise HeaderError(f"{path}: components must be scalar volumes of equal dims")
    return DisplacementField(np.stack([c.data for c in comps]), comps[0].spacing, comps[0].origin)
