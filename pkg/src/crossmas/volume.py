"""Scalar, label and probability volumes plus the preprocessing steps applied
before registration (isotropic resampling, z-score, center alignment).

Arrays are indexed ``[x, y, z]``; spacing and origin are in mm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._ops import apply_separable, interp_matrix
from .errors import EmptyRegionError


def _triple(value, name):
    t = tuple(float(v) for v in np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)))
    if any(not math.isfinite(v) for v in t):
        raise ValueError(f"{name} must be finite, got {t}")
    return t


@dataclass
class Volume:
    """A 3D scalar image held in double precision."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    def like(self, data):
        return Volume(data, self.spacing, self.origin)


@dataclass
class LabelMap:
    """A 3D integer label map.

    ``label_set`` is the sorted set of admissible labels and always contains
    the background label 0. It may list labels absent from ``data``, so that
    warped maps keep the channel layout of their source.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    label_set: tuple | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise ValueError("label data must be integer valued")
        self.data = data.astype(np.int64)
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        present = np.unique(self.data)
        if self.label_set is None:
            labels = set(present.tolist())
        else:
            labels = set(int(v) for v in self.label_set)
            missing = set(present.tolist()) - labels
            if missing:
                raise ValueError(f"labels {sorted(missing)} not in label_set {sorted(labels)}")
        labels.add(0)
        self.label_set = tuple(sorted(labels))

    @property
    def dims(self):
        return self.data.shape

    @property
    def foreground(self):
        return self.data != 0

    def like(self, data):
        return LabelMap(data, self.spacing, self.origin, self.label_set)


@dataclass
class ProbVolume:
    """Per-label probability channels, shape ``(len(label_set), nx, ny, nz)``."""

    channels: np.ndarray
    label_set: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.label_set = tuple(int(v) for v in self.label_set)
        if self.channels.ndim != 4 or self.channels.shape[0] != len(self.label_set):
            raise ValueError(
                f"expected {len(self.label_set)} channels of 3D data, got shape {self.channels.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if self.check:
            total = self.channels.sum(axis=0)
            if np.abs(total - 1.0).max() > 1e-9:
                raise ValueError("probability channels must sum to 1 per voxel")
            if self.channels.min() < -1e-12 or self.channels.max() > 1 + 1e-12:
                raise ValueError("probability channels must lie in [0, 1]")

    @property
    def dims(self):
        return self.channels.shape[1:]

    def argmax(self):
        """Hard labels; ties go to the lowest label (first channel)."""
        idx = np.argmax(self.channels, axis=0)
        return LabelMap(np.asarray(self.label_set)[idx], self.spacing, self.origin, self.label_set)


def one_hot(labels: LabelMap) -> ProbVolume:
    lut = np.asarray(labels.label_set)
    channels = (labels.data[None] == lut[:, None, None, None]).astype(np.float64)
    return ProbVolume(channels, labels.label_set, labels.spacing, labels.origin, check=False)


def _output_grid(n, spacing, target):
    # keep every output sample inside the source extent
    count = int(math.floor((n - 1) * spacing / target + 1e-9)) + 1
    return count, np.arange(count) * (target / spacing)


def resample_isotropic(vol, target_spacing=1.0):
    """Resample to ``target_spacing`` mm on every axis.

    Scalar volumes use trilinear interpolation; label maps use nearest
    neighbour with midpoint ties going to the lower source index.
    """
    target_spacing = float(target_spacing)
    if not target_spacing > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if all(s == target_spacing for s in vol.spacing):
        return vol.like(vol.data.copy())
    grids = [_output_grid(n, s, target_spacing) for n, s in zip(vol.dims, vol.spacing)]
    spacing = (target_spacing,) * 3
    if isinstance(vol, LabelMap):
        idx = [np.clip(np.ceil(q - 0.5).astype(int), 0, n - 1) for (_, q), n in zip(grids, vol.dims)]
        data = vol.data[np.ix_(*idx)]
        return LabelMap(data, spacing, vol.origin, vol.label_set)
    mats = [interp_matrix(n, q) for (_, q), n in zip(grids, vol.dims)]
    return Volume(apply_separable(vol.data, mats), spacing, vol.origin)


def zscore_normalize(vol: Volume) -> Volume:
    """Zero mean, unit population standard deviation; constant input maps to zeros.

    Non-finite input stays non-finite so that downstream losses can flag it.
    """
    mean = vol.data.mean()
    centred = vol.data - mean
    std = np.sqrt(np.mean(centred ** 2))
    if std == 0:
        return vol.like(np.zeros_like(vol.data))
    return vol.like(centred / std)


def foreground_centroid(labels: LabelMap):
    """Centroid of the nonzero labels in physical (mm) coordinates."""
    idx = np.argwhere(labels.foreground)
    if idx.size == 0:
        raise EmptyRegionError("label map has no foreground voxels")
    return np.asarray(labels.origin) + idx.mean(axis=0) * np.asarray(labels.spacing)


def center_align_translation(atlas_label: LabelMap, target_label: LabelMap):
    """Vector (mm) from the atlas foreground centroid to the target foreground centroid."""
    return foreground_centroid(target_label) - foreground_centroid(atlas_label)
