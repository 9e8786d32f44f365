# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: clamped trilinear warping, its vector-Jacobian product,
and per-voxel patch mutual information.

Must agree with ``_pykernels`` to round-off; see tests/test_backend.py.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log2

cnp.import_array()


cdef inline void _axis(double p, Py_ssize_t n, Py_ssize_t* i0, double* t, bint* live) noexcept nogil:
    # Clamp to [0, n-1]; derivative is live only on [0, n-1) (right-continuous).
    cdef Py_ssize_t k
    if n == 1:
        i0[0] = 0
        t[0] = 0.0
        live[0] = False
        return
    live[0] = (p >= 0.0) and (p < n - 1)
    if p < 0.0:
        p = 0.0
    elif p > n - 1:
        p = n - 1
    k = <Py_ssize_t>p  # truncation is floor for p >= 0
    if k > n - 2:
        k = n - 2
    i0[0] = k
    t[0] = p - k


cdef inline void _cell(const double* d, Py_ssize_t i, Py_ssize_t j, Py_ssize_t k,
                       Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz, Py_ssize_t vox,
                       Py_ssize_t* off, double* tx, double* ty, double* tz,
                       bint* lx, bint* ly, bint* lz) noexcept nogil:
    # off[0..7]: flat offsets of the 8 cell corners, ordered 000,100,010,110,001,101,011,111
    cdef Py_ssize_t x0, y0, z0, dx, dy, dz, sxy = ny * nz
    _axis(i + d[vox], nx, &x0, tx, lx)
    _axis(j + d[vox + nx * sxy], ny, &y0, ty, ly)
    _axis(k + d[vox + 2 * nx * sxy], nz, &z0, tz, lz)
    dx = sxy if nx > 1 else 0
    dy = nz if ny > 1 else 0
    dz = 1 if nz > 1 else 0
    off[0] = x0 * sxy + y0 * nz + z0
    off[1] = off[0] + dx
    off[2] = off[0] + dy
    off[3] = off[2] + dx
    off[4] = off[0] + dz
    off[5] = off[1] + dz
    off[6] = off[2] + dz
    off[7] = off[3] + dz


def warp(const double[:, :, :, ::1] f, const double[:, :, :, ::1] disp):
    """out[c, x] = f[c, x + disp[:, x]] with clamp-to-edge trilinear sampling."""
    cdef Py_ssize_t C = f.shape[0], nx = f.shape[1], ny = f.shape[2], nz = f.shape[3]
    if disp.shape[0] != 3 or disp.shape[1] != nx or disp.shape[2] != ny or disp.shape[3] != nz:
        raise ValueError("displacement shape does not match the input grid")
    out_arr = np.empty((C, nx, ny, nz), dtype=np.float64)
    cdef double[:, :, :, ::1] out_mv = out_arr
    cdef double* out = &out_mv[0, 0, 0, 0]
    cdef const double* fp = &f[0, 0, 0, 0]
    cdef const double* d = &disp[0, 0, 0, 0]
    cdef Py_ssize_t nvox = nx * ny * nz
    cdef Py_ssize_t c, i, j, k, vox, base
    cdef Py_ssize_t off[8]
    cdef double tx, ty, tz, wx0, wy0, wz0
    cdef bint lx, ly, lz
    with nogil:
        vox = 0
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    _cell(d, i, j, k, nx, ny, nz, vox, off, &tx, &ty, &tz, &lx, &ly, &lz)
                    wx0 = 1.0 - tx
                    wy0 = 1.0 - ty
                    wz0 = 1.0 - tz
                    for c in range(C):
                        base = c * nvox
                        out[base + vox] = (
                            ((fp[base + off[0]] * wx0 + fp[base + off[1]] * tx) * wy0
                             + (fp[base + off[2]] * wx0 + fp[base + off[3]] * tx) * ty) * wz0
                            + ((fp[base + off[4]] * wx0 + fp[base + off[5]] * tx) * wy0
                               + (fp[base + off[6]] * wx0 + fp[base + off[7]] * tx) * ty) * tz
                        )
                    vox += 1
    return out_arr


def warp_vjp(const double[:, :, :, ::1] f, const double[:, :, :, ::1] disp,
             const double[:, :, :, ::1] g, bint need_f=True):
    """Pull the upstream gradient ``g`` back through :func:`warp`.

    Returns ``(grad_f, grad_disp)``; ``grad_f`` is None unless ``need_f``.
    """
    cdef Py_ssize_t C = f.shape[0], nx = f.shape[1], ny = f.shape[2], nz = f.shape[3]
    if disp.shape[0] != 3 or disp.shape[1] != nx or disp.shape[2] != ny or disp.shape[3] != nz:
        raise ValueError("displacement shape does not match the input grid")
    if g.shape[0] != C or g.shape[1] != nx or g.shape[2] != ny or g.shape[3] != nz:
        raise ValueError("upstream gradient shape does not match the output")
    cdef Py_ssize_t nvox = nx * ny * nz
    gd_arr = np.zeros((3, nx, ny, nz), dtype=np.float64)
    cdef double[:, :, :, ::1] gd_mv = gd_arr
    cdef double* gd = &gd_mv[0, 0, 0, 0]
    cdef double[:, :, :, ::1] gf_mv
    cdef double* gf = NULL
    gf_arr = None
    if need_f:
        gf_arr = np.zeros((C, nx, ny, nz), dtype=np.float64)
        gf_mv = gf_arr
        gf = &gf_mv[0, 0, 0, 0]
    cdef const double* fp = &f[0, 0, 0, 0]
    cdef const double* d = &disp[0, 0, 0, 0]
    cdef const double* gp = &g[0, 0, 0, 0]
    cdef Py_ssize_t c, i, j, k, vox, base
    cdef Py_ssize_t off[8]
    cdef double tx, ty, tz, wx0, wy0, wz0, gv, sx, sy, sz
    cdef double f000, f100, f010, f110, f001, f101, f011, f111
    cdef bint lx, ly, lz
    with nogil:
        vox = 0
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    _cell(d, i, j, k, nx, ny, nz, vox, off, &tx, &ty, &tz, &lx, &ly, &lz)
                    wx0 = 1.0 - tx
                    wy0 = 1.0 - ty
                    wz0 = 1.0 - tz
                    sx = 0.0
                    sy = 0.0
                    sz = 0.0
                    for c in range(C):
                        base = c * nvox
                        gv = gp[base + vox]
                        if gv == 0.0:
                            continue
                        f000 = fp[base + off[0]]
                        f100 = fp[base + off[1]]
                        f010 = fp[base + off[2]]
                        f110 = fp[base + off[3]]
                        f001 = fp[base + off[4]]
                        f101 = fp[base + off[5]]
                        f011 = fp[base + off[6]]
                        f111 = fp[base + off[7]]
                        if lx:
                            sx = sx + gv * (((f100 - f000) * wy0 + (f110 - f010) * ty) * wz0
                                            + ((f101 - f001) * wy0 + (f111 - f011) * ty) * tz)
                        if ly:
                            sy = sy + gv * (((f010 - f000) * wx0 + (f110 - f100) * tx) * wz0
                                            + ((f011 - f001) * wx0 + (f111 - f101) * tx) * tz)
                        if lz:
                            sz = sz + gv * (((f001 - f000) * wx0 + (f101 - f100) * tx) * wy0
                                            + ((f011 - f010) * wx0 + (f111 - f110) * tx) * ty)
                        if need_f:
                            gf[base + off[0]] += gv * wx0 * wy0 * wz0
                            gf[base + off[1]] += gv * tx * wy0 * wz0
                            gf[base + off[2]] += gv * wx0 * ty * wz0
                            gf[base + off[3]] += gv * tx * ty * wz0
                            gf[base + off[4]] += gv * wx0 * wy0 * tz
                            gf[base + off[5]] += gv * tx * wy0 * tz
                            gf[base + off[6]] += gv * wx0 * ty * tz
                            gf[base + off[7]] += gv * tx * ty * tz
                    gd[vox] = sx
                    gd[vox + nvox] = sy
                    gd[vox + 2 * nvox] = sz
                    vox += 1
    return gf_arr, gd_arr


cdef inline Py_ssize_t _bin(double v, double lo, double hi, int bins) noexcept nogil:
    cdef Py_ssize_t b
    if hi <= lo:
        return 0
    b = <Py_ssize_t>((v - lo) / (hi - lo) * bins)
    if b >= bins:
        b = bins - 1
    if b < 0:
        b = 0
    return b


def patch_mi(const double[:, :, ::1] a, const double[:, :, ::1] b,
             Py_ssize_t rx, Py_ssize_t ry, Py_ssize_t rz, int bins):
    """Base-2 mutual information of the joint histogram of each voxel's patch.

    Patches are truncated at the volume border; each patch is min-max binned
    independently per image.
    """
    cdef Py_ssize_t nx = a.shape[0], ny = a.shape[1], nz = a.shape[2]
    out_arr = np.zeros((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    joint_arr = np.zeros((bins, bins), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] joint = joint_arr
    ma_arr = np.zeros(bins, dtype=np.int64)
    mb_arr = np.zeros(bins, dtype=np.int64)
    cdef cnp.int64_t[::1] ma = ma_arr
    cdef cnp.int64_t[::1] mb = mb_arr
    cdef Py_ssize_t i, j, k, u, v, w, xa, xb, ya, yb, za, zb, p, q, n
    cdef double alo, ahi, blo, bhi, av, bv, mi, pxy
    with nogil:
        for i in range(nx):
            xa = i - rx if i >= rx else 0
            xb = i + rx if i + rx < nx else nx - 1
            for j in range(ny):
                ya = j - ry if j >= ry else 0
                yb = j + ry if j + ry < ny else ny - 1
                for k in range(nz):
                    za = k - rz if k >= rz else 0
                    zb = k + rz if k + rz < nz else nz - 1
                    alo = a[xa, ya, za]
                    ahi = alo
                    blo = b[xa, ya, za]
                    bhi = blo
                    for u in range(xa, xb + 1):
                        for v in range(ya, yb + 1):
                            for w in range(za, zb + 1):
                                av = a[u, v, w]
                                bv = b[u, v, w]
                                if av < alo:
                                    alo = av
                                if av > ahi:
                                    ahi = av
                                if bv < blo:
                                    blo = bv
                                if bv > bhi:
                                    bhi = bv
                    for p in range(bins):
                        ma[p] = 0
                        mb[p] = 0
                        for q in range(bins):
                            joint[p, q] = 0
                    n = 0
                    for u in range(xa, xb + 1):
                        for v in range(ya, yb + 1):
                            for w in range(za, zb + 1):
                                p = _bin(a[u, v, w], alo, ahi, bins)
                                q = _bin(b[u, v, w], blo, bhi, bins)
                                joint[p, q] += 1
                                ma[p] += 1
                                mb[q] += 1
                                n += 1
                    mi = 0.0
                    for p in range(bins):
                        if ma[p] == 0:
                            continue
                        for q in range(bins):
                            if joint[p, q] == 0:
                                continue
                            pxy = <double>joint[p, q] / n
                            mi = mi + pxy * log2(pxy * n * n / (<double>ma[p] * mb[q]))
                    out[i, j, k] = mi if mi > 0.0 else 0.0
    return out_arr
