"""Dual-pixel disparity: local normalization, tile matching, confidences.

Sign convention: a positive disparity ``d`` means the right view equals the
left view shifted right by ``d`` pixels, ``right(x) = left(x - d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imagecore import sample_bilinear

SEARCH = 3


@dataclass
class DpPair:
    view_left: np.ndarray
    view_right: np.ndarray
    scale_x: int = 1
    scale_y: int = 1

    def __post_init__(self):
        self.view_left = np.asarray(self.view_left, dtype=np.float64)
        self.view_right = np.asarray(self.view_right, dtype=np.float64)
        if self.view_left.ndim != 2 or self.view_left.shape != self.view_right.shape:
            raise ValueError("DP views must be single-channel and the same size")
        if self.scale_x < 1 or self.scale_y < 1:
            raise ValueError("scale factors must be >= 1")


@dataclass
class ConfidenceParams:
    """Scales for the per-tile confidence factors."""
    tau_grad: float = 0.01
    tau_resid: float = 0.04
    agree_var: float = 0.25
    unique_eps: float = 1e-6


@dataclass
class TileGrid:
    disparity: np.ndarray
    confidence: np.ndarray
    tile_size: int
    source_shape: tuple
    ssd_curve: np.ndarray | None = field(default=None, repr=False)

    @property
    def tiles_y(self) -> int:
        return self.disparity.shape[0]

    @property
    def tiles_x(self) -> int:
        return self.disparity.shape[1]


@dataclass
class DisparityField:
    disparity: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.disparity.shape != self.confidence.shape:
            raise ValueError("disparity and confidence must have equal dims")

    @property
    def shape(self):
        return self.disparity.shape

    def copy(self) -> "DisparityField":
        return DisparityField(self.disparity.copy(), self.confidence.copy())


def normalize_local(view, window: int = 9, epsilon: float = 0.001):
    """Subtract the local mean and divide by local std + epsilon."""
    if window % 2 != 1:
        raise ValueError("window must be odd")
    v = np.asarray(view, dtype=np.float64)
    mean = ndimage.uniform_filter(v, size=window, mode="nearest")
    sq = ndimage.uniform_filter(v * v, size=window, mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return (v - mean) / (std + epsilon)


def mean_pairs(pairs):
    """Plain average of K registered DP pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one pair")
    left = np.mean([p.view_left for p in pairs], axis=0)
    right = np.mean([p.view_right for p in pairs], axis=0)
    return DpPair(left, right, pairs[0].scale_x, pairs[0].scale_y)


def _shift_x(a, s):
    """(a(x + s), in-bounds mask) with edge clamping, integer s."""
    w = a.shape[1]
    idx = np.arange(w) + s
    ok = (idx >= 0) & (idx < w)
    return a[:, np.clip(idx, 0, w - 1)], np.broadcast_to(ok, a.shape)


def _tile_sum(a, ts, ty, tx):
    return a[: ty * ts, : tx * ts].reshape(ty, ts, tx, ts).sum(axis=(1, 3))


def ssd_curves(norm_left, norm_right, tile_size: int = 8, search: int = SEARCH, margin: int = 0):
    """SSD at each integer shift for every full tile, shape (ty, tx, 2*search+1).

    Shift ``s`` compares ``left(x - floor(s/2))`` with ``right(x + ceil(s/2))``
    so the split is centered on the tile. Shifts ``d - 1`` and ``d + 1`` then
    see the same pixel pairs, which keeps integer shifts exact under the
    quadratic fit, and swapping the views mirrors the curve. Columns that
    fall outside the image at any shift are dropped at every shift, so all
    samples of a curve sum over the same pixels; the sum is rescaled to a
    full tile. ``margin`` also drops samples within that many columns of the
    left and right edges, where the two views' normalization windows are
    clipped at different scene points (unless that would empty a tile).
    """
    L = np.asarray(norm_left, dtype=np.float64)
    R = np.asarray(norm_right, dtype=np.float64)
    h, w = L.shape
    ty, tx = h // tile_size, w // tile_size
    full = tile_size * tile_size
    shifts = range(-search, search + 1)
    ok = np.ones(L.shape, dtype=bool)
    inner = np.zeros(w, dtype=bool)
    inner[margin: w - margin] = True
    for s in shifts:
        a = s // 2
        ok &= _shift_x(L, -a)[1] & _shift_x(R, s - a)[1]
        if margin:
            idx_l = np.arange(w) - a
            idx_r = np.arange(w) + s - a
            inner &= (idx_l >= margin) & (idx_l < w - margin) & (idx_r >= margin) & (idx_r < w - margin)
    if margin:
        strict = ok & inner[None, :]
        n_strict = _tile_sum(strict.astype(float), tile_size, ty, tx)
        empty = np.kron(n_strict == 0, np.ones((tile_size, tile_size), dtype=bool))
        fallback = np.zeros_like(ok)
        fallback[: ty * tile_size, : tx * tile_size] = empty
        ok = strict | (ok & fallback)
    n = np.maximum(_tile_sum(ok.astype(float), tile_size, ty, tx), 1.0)
    curves = np.empty((ty, tx, 2 * search + 1))
    for k, s in enumerate(shifts):
        a = s // 2
        ls = _shift_x(L, -a)[0]
        rs = _shift_x(R, s - a)[0]
        sq = np.where(ok, (ls - rs) ** 2, 0.0)
        curves[..., k] = _tile_sum(sq, tile_size, ty, tx) * full / n
    return curves


def subpixel_minimum(curve):
    """(location, fitted value, integer index) of the minimum of one SSD curve."""
    n = len(curve)
    i = int(np.argmin(curve))
    if i == 0 or i == n - 1:
        return float(i - n // 2), float(curve[i]), i
    cm, c0, cp = curve[i - 1], curve[i], curve[i + 1]
    denom = cm - 2 * c0 + cp
    if denom <= 0:
        return float(i - n // 2), float(c0), i
    off = 0.5 * (cm - cp) / denom
    off = min(0.5, max(-0.5, off))
    val = c0 + 0.5 * (cp - cm) * off + 0.5 * denom * off * off
    return float(i - n // 2 + off), float(max(val, 0.0)), i


def second_minimum(curve, imin):
    """Lowest local minimum at least two samples from ``imin``, or None."""
    n = len(curve)
    best = None
    for i in range(n):
        if abs(i - imin) < 2:
            continue
        left = curve[i - 1] if i > 0 else np.inf
        right = curve[i + 1] if i < n - 1 else np.inf
        if curve[i] <= left and curve[i] <= right:
            if best is None or curve[i] < best:
                best = curve[i]
    return best


def tile_confidence(curve, grad_energy, disparity, neighbor_disparities,
                    tile_area: int = 64, params: ConfidenceParams | None = None):
    """Product of the gradient, uniqueness, residual and agreement factors."""
    p = params or ConfidenceParams()
    c_grad = min(1.0, grad_energy / (tile_area * p.tau_grad))
    if c_grad <= 0:
        return 0.0
    _, ssd_min, imin = subpixel_minimum(curve)
    second = second_minimum(curve, imin)
    if second is None:
        c_unique = 1.0
    else:
        # sample against sample; the fitted minimum can dip below both
        c_unique = (second - curve[imin]) / (second + p.unique_eps)
        c_unique = min(1.0, max(0.0, c_unique))
    c_resid = np.exp(-ssd_min / (tile_area * p.tau_resid))
    nb = np.asarray(neighbor_disparities, dtype=np.float64)
    if nb.size:
        c_agree = np.exp(-(disparity - np.median(nb)) ** 2 / p.agree_var)
    else:
        c_agree = 1.0
    return float(c_grad * c_unique * c_resid * c_agree)


def tile_match(norm_left, norm_right, tile_size: int = 8, search: int = SEARCH,
               params: ConfidenceParams | None = None, keep_curves: bool = False,
               margin: int = 0) -> TileGrid:
    """Brute-force horizontal SSD search with quadratic subpixel refinement."""
    L = np.asarray(norm_left, dtype=np.float64)
    R = np.asarray(norm_right, dtype=np.float64)
    if L.shape != R.shape:
        raise ValueError("views differ in size")
    h, w = L.shape
    if h < tile_size or w < tile_size:
        raise ValueError("views smaller than one tile")
    curves = ssd_curves(L, R, tile_size, search, margin)
    ty, tx = curves.shape[:2]

    disp = np.zeros((ty, tx))
    for j in range(ty):
        for i in range(tx):
            disp[j, i] = subpixel_minimum(curves[j, i])[0]
    disp = np.clip(disp, -search, search)

    gx = lambda a: np.diff(a, axis=1, append=a[:, -1:])  # noqa: E731
    grad = 0.5 * (_tile_sum(gx(L) ** 2, tile_size, ty, tx) + _tile_sum(gx(R) ** 2, tile_size, ty, tx))

    conf = np.zeros((ty, tx))
    area = tile_size * tile_size
    for j in range(ty):
        for i in range(tx):
            j0, j1 = max(0, j - 1), min(ty, j + 2)
            i0, i1 = max(0, i - 1), min(tx, i + 2)
            nb = np.delete(disp[j0:j1, i0:i1].ravel(), (j - j0) * (i1 - i0) + (i - i0))
            conf[j, i] = tile_confidence(curves[j, i], grad[j, i], disp[j, i], nb, area, params)
    # degenerate (textureless) tiles carry no disparity
    disp = np.where(grad > 0, disp, 0.0)
    return TileGrid(disp, conf, tile_size, (h, w), curves if keep_curves else None)


def upsample_tiles(grid: TileGrid, out_width: int, out_height: int) -> DisparityField:
    """Bilinear interpolation between tile centers, edge clamped.

    Output pixels are mapped through the DP view geometry, so the target may
    be the DP size or the (larger) color image size.
    """
    h, w = grid.source_shape
    ts = grid.tile_size
    xs = (np.arange(out_width) + 0.5) * (w / out_width) - 0.5
    ys = (np.arange(out_height) + 0.5) * (h / out_height) - 0.5
    u = (xs + 0.5) / ts - 0.5
    v = (ys + 0.5) / ts - 0.5
    V, U = np.meshgrid(v, u, indexing="ij")
    d = sample_bilinear(grid.disparity, V, U)
    c = sample_bilinear(grid.confidence, V, U)
    return DisparityField(d, np.clip(c, 0.0, 1.0))


def compute_disparity(pair: DpPair, out_width: int | None = None, out_height: int | None = None,
                      tile_size: int = 8, params: ConfidenceParams | None = None,
                      window: int = 9):
    """Normalize, match and upsample; returns (TileGrid, DisparityField)."""
    nl = normalize_local(pair.view_left, window)
    nr = normalize_local(pair.view_right, window)
    grid = tile_match(nl, nr, tile_size, params=params, margin=window // 2)
    h, w = pair.view_left.shape
    ow = out_width or w * pair.scale_x
    oh = out_height or h * pair.scale_y
    return grid, upsample_tiles(grid, ow, oh)
