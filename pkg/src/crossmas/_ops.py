"""Separable linear operators shared by several modules.

All operators here are linear in the array argument and come with an exact
adjoint, which is what the analytic gradients need.
"""
import math
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

SPATIAL_AXES = (-3, -2, -1)


def interp_matrix(n_src, coords):
    """Rows of 1D linear-interpolation weights sampling ``n_src`` nodes at ``coords``.

    Coordinates outside ``[0, n_src - 1]`` clamp to the edge node.
    """
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n_src - 1)
    m = np.zeros((coords.size, n_src))
    if n_src == 1:
        m[:, 0] = 1.0
        return m
    i0 = np.minimum(np.floor(coords).astype(int), n_src - 2)
    t = coords - i0
    rows = np.arange(coords.size)
    m[rows, i0] = 1.0 - t
    m[rows, i0 + 1] += t
    return m


def apply_separable(arr, mats):
    """Apply one matrix per spatial axis (last three axes of ``arr``)."""
    arr = np.asarray(arr, dtype=np.float64)
    lead = arr.shape[:-3]
    out = np.matmul(arr, mats[2].T)
    out = np.matmul(mats[1], out)
    cx, ny, nz = out.shape[-3:]
    out = np.matmul(mats[0], out.reshape(*lead, cx, ny * nz))
    return out.reshape(*lead, mats[0].shape[0], ny, nz)


def apply_separable_adjoint(arr, mats):
    return apply_separable(arr, [m.T for m in mats])


def gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-0.5 * (x / sigma) ** 2)


@lru_cache(maxsize=64)
def gaussian_matrix(n, sigma):
    """Banded ``n x n`` Gaussian smoothing matrix with rows renormalised to sum to 1."""
    kernel = gaussian_kernel(sigma)
    radius = kernel.size // 2
    m = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - radius), min(n, i + radius + 1)
        m[i, lo:hi] = kernel[lo - i + radius:hi - i + radius]
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def gaussian_smooth(arr, sigma):
    """Separable Gaussian (radius 3 sigma) renormalised by the in-bounds kernel mass.

    ``sigma == 0`` is the identity. Constants are reproduced up to round-off,
    including at the borders.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    return apply_separable(arr, [gaussian_matrix(n, float(sigma)) for n in arr.shape[-3:]])


def gaussian_smooth_adjoint(arr, sigma):
    arr = np.asarray(arr, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    return apply_separable_adjoint(arr, [gaussian_matrix(n, float(sigma)) for n in arr.shape[-3:]])


def box_sum(arr, radius):
    """Sum over the in-bounds part of a (2r+1)^3 box around every voxel."""
    out = np.asarray(arr, dtype=np.float64)
    for axis, r in zip(SPATIAL_AXES, radius):
        if r > 0:
            out = correlate1d(out, np.ones(2 * r + 1), axis=axis, mode="constant", cval=0.0)
    return out


def box_count(shape, radius):
    """Number of in-bounds voxels in each voxel's box."""
    counts = [correlate1d(np.ones(n), np.ones(2 * r + 1), mode="constant", cval=0.0)
              for n, r in zip(shape, radius)]
    return np.einsum("i,j,k->ijk", *counts)
