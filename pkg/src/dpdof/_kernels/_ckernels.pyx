# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the defocus renderer.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and the same result up to floating-point summation order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil, exp

cnp.import_array()


cdef inline double _aa_weight(double rp5, double dist) nogil:
    cdef double w = rp5 - dist
    if w <= 0.0:
        return 0.0
    if w >= 1.0:
        return 1.0
    return w


def disk_norms(double[:, ::1] radius):
    """Sum of the anti-aliased disk weights for every pixel's own radius."""
    cdef Py_ssize_t h = radius.shape[0], w = radius.shape[1]
    cdef Py_ssize_t y, x
    cdef int dy, dx, R
    cdef double r, s
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for y in range(h):
            for x in range(w):
                r = radius[y, x]
                if r < 0.0:
                    r = 0.0
                R = <int>ceil(r + 0.5) - 1
                if R < 0:
                    R = 0
                s = 0.0
                for dy in range(-R, R + 1):
                    for dx in range(-R, R + 1):
                        s += _aa_weight(r + 0.5, sqrt(<double>(dx * dx + dy * dy)))
                o[y, x] = s
    return out


def scatter_brute(double[:, :, ::1] layer, double[:, ::1] radius):
    """Scatter expressed as a gather: every output pixel visits the window
    spanned by the largest radius and weights each source by its own
    normalized anti-aliased disk."""
    cdef Py_ssize_t h = layer.shape[0], w = layer.shape[1], nc = layer.shape[2]
    cdef Py_ssize_t y, x, sy, sx, c
    cdef int dy, dx, R
    cdef double rmax = 0.0, wgt, dist
    cdef Py_ssize_t i, j
    for i in range(h):
        for j in range(w):
            if radius[i, j] > rmax:
                rmax = radius[i, j]
    R = <int>ceil(rmax + 0.5) - 1
    if R < 0:
        R = 0
    norms = disk_norms(radius)
    cdef double[:, ::1] nrm = norms
    rp5_arr = np.maximum(np.asarray(radius), 0.0) + 0.5
    inv_arr = 1.0 / norms
    cdef double[:, ::1] rp5 = rp5_arr
    cdef double[:, ::1] inv = inv_arr
    dist_arr = np.sqrt(
        np.add.outer(np.arange(-R, R + 1) ** 2, np.arange(-R, R + 1) ** 2).astype(np.float64)
    )
    cdef double[:, ::1] dtab = dist_arr
    out = np.zeros((h, w, nc), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    with nogil:
        for y in range(h):
            for dy in range(-R, R + 1):
                sy = y + dy
                if sy < 0 or sy >= h:
                    continue
                for x in range(w):
                    for dx in range(-R, R + 1):
                        sx = x + dx
                        if sx < 0 or sx >= w:
                            continue
                        dist = dtab[dy + R, dx + R]
                        wgt = rp5[sy, sx] - dist
                        if wgt <= 0.0:
                            continue
                        if wgt > 1.0:
                            wgt = 1.0
                        wgt = wgt * inv[sy, sx]
                        for c in range(nc):
                            o[y, x, c] += wgt * layer[sy, sx, c]
    return out


def disk_sizes(double[:, ::1] radius):
    """Pixel count of the rasterized disk x^2 + y^2 <= (r + 0.5)^2."""
    cdef Py_ssize_t h = radius.shape[0], w = radius.shape[1]
    cdef Py_ssize_t y, x
    cdef int dx, R, hh
    cdef double rr, r
    cdef long n
    out = np.empty((h, w), dtype=np.int64)
    cdef long long[:, ::1] o = out
    with nogil:
        for y in range(h):
            for x in range(w):
                r = radius[y, x]
                if r < 0.0:
                    r = 0.0
                rr = (r + 0.5) * (r + 0.5)
                R = <int>floor(r + 0.5)
                n = 0
                for dx in range(-R, R + 1):
                    hh = <int>floor(sqrt(rr - dx * dx))
                    n += 2 * hh + 1
                o[y, x] = n
    return out


def scatter_gradient(double[:, :, ::1] layer, double[:, ::1] radius):
    """Scatter rasterized solid disks through their vertical gradient, then
    integrate each column."""
    cdef Py_ssize_t h = layer.shape[0], w = layer.shape[1], nc = layer.shape[2]
    cdef Py_ssize_t y, x, tx, c, top, bot
    cdef int dx, R, hh
    cdef double r, rr, inv
    sizes = disk_sizes(radius)
    cdef long long[:, ::1] sz = sizes
    grad = np.zeros((h + 1, w, nc), dtype=np.float64)
    cdef double[:, :, ::1] g = grad
    with nogil:
        for y in range(h):
            for x in range(w):
                r = radius[y, x]
                if r < 0.0:
                    r = 0.0
                rr = (r + 0.5) * (r + 0.5)
                R = <int>floor(r + 0.5)
                inv = 1.0 / <double>sz[y, x]
                for dx in range(-R, R + 1):
                    tx = x + dx
                    if tx < 0 or tx >= w:
                        continue
                    hh = <int>floor(sqrt(rr - dx * dx))
                    top = y - hh
                    if top < 0:
                        top = 0
                    bot = y + hh + 1
                    if bot > h:
                        bot = h
                    for c in range(nc):
                        g[top, tx, c] += inv * layer[y, x, c]
                        g[bot, tx, c] -= inv * layer[y, x, c]
        for y in range(1, h):
            for x in range(w):
                for c in range(nc):
                    g[y, x, c] += g[y - 1, x, c]
    return grad[:h].copy()


def joint_bilateral_upsample(double[:, :, ::1] low, double[:, :, ::1] guide_low,
                             double[:, :, ::1] guide, double sigma_spatial,
                             double sigma_range, int radius):
    """Guide-weighted upsampling of ``low`` (h, w, nc) to the guide's size."""
    cdef Py_ssize_t H = guide.shape[0], W = guide.shape[1], gc = guide.shape[2]
    cdef Py_ssize_t h = low.shape[0], w = low.shape[1], nc = low.shape[2]
    cdef Py_ssize_t Y, X, qy, qx, c, k
    cdef int dy, dx, cy, cx
    cdef double sy = <double>h / <double>H, sx = <double>w / <double>W
    cdef double py, px, wsp, wr, wt, tot, diff, d2, fy, fx, ax, ay
    cdef double inv2s = 1.0 / (2.0 * sigma_spatial * sigma_spatial)
    cdef double inv2r = 1.0 / (2.0 * sigma_range * sigma_range)
    cdef Py_ssize_t y0, x0, y1, x1
    out = np.zeros((H, W, nc), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    with nogil:
        for Y in range(H):
            py = (Y + 0.5) * sy - 0.5
            cy = <int>floor(py + 0.5)
            for X in range(W):
                px = (X + 0.5) * sx - 0.5
                cx = <int>floor(px + 0.5)
                tot = 0.0
                for dy in range(-radius, radius + 1):
                    qy = cy + dy
                    if qy < 0 or qy >= h:
                        continue
                    for dx in range(-radius, radius + 1):
                        qx = cx + dx
                        if qx < 0 or qx >= w:
                            continue
                        wsp = exp(-((qy - py) * (qy - py) + (qx - px) * (qx - px)) * inv2s)
                        d2 = 0.0
                        for k in range(gc):
                            diff = guide[Y, X, k] - guide_low[qy, qx, k]
                            d2 += diff * diff
                        wt = wsp * exp(-d2 * inv2r)
                        tot += wt
                        for c in range(nc):
                            o[Y, X, c] += wt * low[qy, qx, c]
                if tot >= 1e-8:
                    for c in range(nc):
                        o[Y, X, c] /= tot
                else:
                    # bilinear, edge-clamped
                    fy = py
                    if fy < 0.0:
                        fy = 0.0
                    if fy > h - 1:
                        fy = h - 1
                    fx = px
                    if fx < 0.0:
                        fx = 0.0
                    if fx > w - 1:
                        fx = w - 1
                    y0 = <Py_ssize_t>floor(fy)
                    x0 = <Py_ssize_t>floor(fx)
                    y1 = y0 + 1 if y0 + 1 < h else y0
                    x1 = x0 + 1 if x0 + 1 < w else x0
                    ay = fy - y0
                    ax = fx - x0
                    for c in range(nc):
                        o[Y, X, c] = ((1 - ay) * ((1 - ax) * low[y0, x0, c] + ax * low[y0, x1, c])
                                      + ay * ((1 - ax) * low[y1, x0, c] + ax * low[y1, x1, c]))
    return out
