"""Pure numpy implementations of the compiled kernels in ``_ckernels``.

Same signatures and the same floating-point formulas, so results agree to
round-off. Used when the extension is not built, or when
``CROSSMAS_BACKEND=python`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _axis(p, n):
    if n == 1:
        zero = np.zeros(p.shape, dtype=np.intp)
        return zero, np.zeros(p.shape), np.zeros(p.shape, dtype=bool)
    live = (p >= 0.0) & (p < n - 1)
    p = np.clip(p, 0.0, n - 1)
    i0 = np.minimum(np.floor(p).astype(np.intp), n - 2)
    return i0, p - i0, live


def _check(f, disp, g=None):
    if f.ndim != 4 or disp.shape != (3,) + f.shape[1:]:
        raise ValueError("displacement shape does not match the input grid")
    if g is not None and g.shape != f.shape:
        raise ValueError("upstream gradient shape does not match the output")


def _corners(disp):
    nx, ny, nz = disp.shape[1:]
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    x0, tx, lx = _axis(gx + disp[0], nx)
    y0, ty, ly = _axis(gy + disp[1], ny)
    z0, tz, lz = _axis(gz + disp[2], nz)
    x1 = x0 + 1 if nx > 1 else x0
    y1 = y0 + 1 if ny > 1 else y0
    z1 = z0 + 1 if nz > 1 else z0
    return (x0, x1, tx, lx), (y0, y1, ty, ly), (z0, z1, tz, lz)


def warp(f, disp):
    f = np.ascontiguousarray(f, dtype=np.float64)
    _check(f, disp)
    (x0, x1, tx, _), (y0, y1, ty, _), (z0, z1, tz, _) = _corners(disp)
    wx0, wy0, wz0 = 1.0 - tx, 1.0 - ty, 1.0 - tz
    out = np.empty(f.shape)
    for c in range(f.shape[0]):
        fc = f[c]
        out[c] = (
            ((fc[x0, y0, z0] * wx0 + fc[x1, y0, z0] * tx) * wy0
             + (fc[x0, y1, z0] * wx0 + fc[x1, y1, z0] * tx) * ty) * wz0
            + ((fc[x0, y0, z1] * wx0 + fc[x1, y0, z1] * tx) * wy0
               + (fc[x0, y1, z1] * wx0 + fc[x1, y1, z1] * tx) * ty) * tz
        )
    return out


def warp_vjp(f, disp, g, need_f=True):
    f = np.ascontiguousarray(f, dtype=np.float64)
    _check(f, disp, g)
    C, nx, ny, nz = f.shape
    (x0, x1, tx, lx), (y0, y1, ty, ly), (z0, z1, tz, lz) = _corners(disp)
    wx0, wy0, wz0 = 1.0 - tx, 1.0 - ty, 1.0 - tz
    gd = np.zeros((3, nx, ny, nz))
    gf = np.zeros(f.shape) if need_f else None
    size = nx * ny * nz
    corners = [
        (x0, y0, z0, wx0 * wy0 * wz0), (x1, y0, z0, tx * wy0 * wz0),
        (x0, y1, z0, wx0 * ty * wz0), (x1, y1, z0, tx * ty * wz0),
        (x0, y0, z1, wx0 * wy0 * tz), (x1, y0, z1, tx * wy0 * tz),
        (x0, y1, z1, wx0 * ty * tz), (x1, y1, z1, tx * ty * tz),
    ]
    flat = [np.ravel_multi_index((a, b, c), (nx, ny, nz)).ravel() for a, b, c, _ in corners]
    for c in range(C):
        gv = g[c]
        fc = f[c]
        f000, f100 = fc[x0, y0, z0], fc[x1, y0, z0]
        f010, f110 = fc[x0, y1, z0], fc[x1, y1, z0]
        f001, f101 = fc[x0, y0, z1], fc[x1, y0, z1]
        f011, f111 = fc[x0, y1, z1], fc[x1, y1, z1]
        gd[0] += np.where(lx, gv * (((f100 - f000) * wy0 + (f110 - f010) * ty) * wz0
                                    + ((f101 - f001) * wy0 + (f111 - f011) * ty) * tz), 0.0)
        gd[1] += np.where(ly, gv * (((f010 - f000) * wx0 + (f110 - f100) * tx) * wz0
                                    + ((f011 - f001) * wx0 + (f111 - f101) * tx) * tz), 0.0)
        gd[2] += np.where(lz, gv * (((f001 - f000) * wx0 + (f101 - f100) * tx) * wy0
                                    + ((f011 - f010) * wx0 + (f111 - f110) * tx) * ty), 0.0)
        if need_f:
            acc = np.zeros(size)
            for idx, (_, _, _, w) in zip(flat, corners):
                acc += np.bincount(idx, weights=(gv * w).ravel(), minlength=size)
            gf[c] = acc.reshape(nx, ny, nz)
    return gf, gd


def patch_mi(a, b, rx, ry, rz, bins):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nx, ny, nz = a.shape
    pad = ((rx, rx), (ry, ry), (rz, rz))
    wa = sliding_window_view(np.pad(a, pad, constant_values=np.nan), (2 * rx + 1, 2 * ry + 1, 2 * rz + 1))
    wb = sliding_window_view(np.pad(b, pad, constant_values=np.nan), (2 * rx + 1, 2 * ry + 1, 2 * rz + 1))
    out = np.zeros((nx, ny, nz))
    nb2 = bins * bins
    for i in range(nx):
        pa = wa[i].reshape(ny * nz, -1)
        pb = wb[i].reshape(ny * nz, -1)
        valid = ~np.isnan(pa)
        qa = _bin_patches(pa, bins)
        qb = _bin_patches(pb, bins)
        m = pa.shape[0]
        code = np.arange(m)[:, None] * nb2 + qa * bins + qb
        joint = np.bincount(code[valid], minlength=m * nb2).reshape(m, bins, bins).astype(np.float64)
        n = joint.sum(axis=(1, 2))
        ma = joint.sum(axis=2)
        mb = joint.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            pxy = joint / n[:, None, None]
            ratio = pxy * (n * n)[:, None, None] / (ma[:, :, None] * mb[:, None, :])
            terms = np.where(joint > 0, pxy * np.log2(np.where(joint > 0, ratio, 1.0)), 0.0)
        mi = terms.sum(axis=(1, 2))
        out[i] = np.maximum(mi, 0.0).reshape(ny, nz)
    return out


def _bin_patches(p, bins):
    lo = np.nanmin(p, axis=1, keepdims=True)
    hi = np.nanmax(p, axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    with np.errstate(invalid="ignore"):
        q = np.floor((p - lo) / span * bins)
    q = np.where(hi > lo, q, 0.0)
    q = np.nan_to_num(q, nan=0.0)
    return np.clip(q, 0, bins - 1).astype(np.intp)
