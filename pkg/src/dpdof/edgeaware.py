"""Bilateral-space smoothing and its clients: mask refinement, mask/disparity
fusion, disparity smoothing and joint bilateral upsampling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy import ndimage

from . import _kernels
from .dpstereo import DisparityField
from .imagecore import bilinear, box2x, luma_chroma


class ConvergenceWarning(RuntimeWarning):
    """The iterative solve stopped at ``max_iterations``."""


@dataclass
class BilateralParams:
    sigma_spatial: float = 8.0
    sigma_luma: float = 0.12
    sigma_chroma: float = 0.12
    smoothness: float = 4.0
    max_iterations: int = 200
    tolerance: float = 1e-5
    # keeps unconfident, isolated grid cells well-posed
    confidence_floor: float = 1e-4
    bistochastic_iterations: int = 20

    def __post_init__(self):
        for name in ("sigma_spatial", "sigma_luma", "sigma_chroma", "smoothness",
                     "max_iterations", "tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class JbuParams:
    sigma_spatial: float = 2.0   # low-res pixels; window is 2*sigma+1 taps
    sigma_range: float = 0.1


@dataclass
class MaskParams:
    sigmoid_slope: float = 20.0
    blur_sigma: float = 2.0
    erosion_fraction: float = 0.05


@dataclass(frozen=True)
class FaceRect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty face rectangle {self}")

    def clamp(self, height: int, width: int) -> "FaceRect":
        x0 = min(max(self.x0, 0), width - 1)
        y0 = min(max(self.y0, 0), height - 1)
        return FaceRect(x0, y0, max(min(self.x1, width), x0 + 1), max(min(self.y1, height), y0 + 1))

    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    @classmethod
    def parse(cls, text: str) -> "FaceRect":
        parts = [int(float(p)) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"face rectangle needs x0,y0,x1,y1, got {text!r}")
        return cls(*parts)


# --------------------------------------------------------------------------
# bilateral grid


class BilateralGrid:
    """Hard-splat bilateral grid over (y, x, luma, u, v).

    ``labels`` maps each pixel to its vertex, ``counts`` holds pixels per
    vertex and ``blur`` is the sparse [1 2 1] blur summed over the five axes.
    """

    def __init__(self, guide, sigma_spatial, sigma_luma, sigma_chroma):
        g = np.asarray(guide, dtype=np.float64)
        h, w = g.shape[:2]
        luma, u, v = luma_chroma(g)
        yy, xx = np.mgrid[0:h, 0:w]
        coords = np.stack([
            np.round(yy / sigma_spatial),
            np.round(xx / sigma_spatial),
            np.round(luma / sigma_luma),
            np.round(u / sigma_chroma),
            np.round(v / sigma_chroma),
        ], axis=-1).reshape(-1, 5).astype(np.int64)
        coords -= coords.min(axis=0)
        ext = coords.max(axis=0) + 3
        mult = np.cumprod(np.concatenate([[1], ext[:-1]]))
        keys = (coords + 1) @ mult
        ukeys, labels = np.unique(keys, return_inverse=True)
        nv = len(ukeys)
        self.shape = (h, w)
        self.labels = labels.reshape(-1)
        self.counts = np.bincount(self.labels, minlength=nv).astype(np.float64)
        self.nvert = nv

        rows = [np.arange(nv)]
        cols = [np.arange(nv)]
        vals = [np.full(nv, 2.0 * coords.shape[1])]
        for d in range(coords.shape[1]):
            for step in (-1, 1):
                nk = ukeys + step * mult[d]
                pos = np.clip(np.searchsorted(ukeys, nk), 0, nv - 1)
                hit = ukeys[pos] == nk
                rows.append(np.nonzero(hit)[0])
                cols.append(pos[hit])
                vals.append(np.ones(hit.sum()))
        self.blur = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv, nv)
        )

    def splat(self, values):
        return np.bincount(self.labels, weights=np.ravel(values), minlength=self.nvert)

    def slice(self, vertex_values):
        return np.asarray(vertex_values)[self.labels].reshape(self.shape)

    def bistochastic_weights(self, iterations: int = 20):
        """Vertex scaling ``n`` with ``n * (blur @ n) ~= counts``."""
        m = self.counts
        n = np.ones_like(m)
        for _ in range(iterations):
            n = np.sqrt(n * m / (self.blur @ n))
        return n


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    converged: bool
    vertices: int


def _pcg(matvec, b, x0, precond, tol, max_iter):
    """Preconditioned conjugate gradients; stops on ||r|| <= tol * ||b||.

    ``precond`` is a callable applying a symmetric positive definite
    approximation of the inverse.
    """
    x = x0.copy()
    r = b - matvec(x)
    r0 = np.linalg.norm(b) or 1.0
    res = np.linalg.norm(r) / r0
    if res <= tol:
        return x, 0, float(res), True
    zv = precond(r)
    p = zv.copy()
    rz = r @ zv
    best_x, best_res = x.copy(), res
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        res = np.linalg.norm(r) / r0
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return x, it, float(res), True
        zv = precond(r)
        rz_new = r @ zv
        p = zv + (rz_new / rz) * p
        rz = rz_new
    return best_x, max_iter, float(best_res), False


def bilateral_solve(target, confidence, guide, params: BilateralParams | None = None,
                    return_info: bool = False):
    """Minimize ``lam * sum_ij W_ij (y_i - y_j)^2 + sum_i c_i (y_i - t_i)^2``.

    ``W`` is the bistochastized bilateral-grid affinity of ``guide``:
    ``W_ij = n_a n_b B[a, b] / (m_a m_b)`` for pixels i, j in vertices a, b.
    Because W only couples pixels through their vertices, the pixel-space
    optimum is recovered from a vertex-sized system solved by conjugate
    gradients, followed by a per-pixel slice that keeps the data term.
    """
    p = params or BilateralParams()
    t = np.asarray(target, dtype=np.float64)
    c = np.asarray(confidence, dtype=np.float64)
    if t.shape != c.shape or t.shape != np.asarray(guide).shape[:2]:
        raise ValueError("target, confidence and guide must share dims")
    c = np.maximum(c, p.confidence_floor)
    grid = BilateralGrid(guide, p.sigma_spatial, p.sigma_luma, p.sigma_chroma)
    n = grid.bistochastic_weights(p.bistochastic_iterations)
    m = grid.counts
    Bn = sp.diags(n) @ grid.blur @ sp.diags(n)
    lam2 = 2.0 * p.smoothness
    deg = np.asarray(Bn.sum(axis=1)).ravel() / m          # pixel degree per vertex
    lab = grid.labels
    cf = c.ravel()
    # constants are exact fixed points, so solve about the weighted mean
    mu = float(np.sum(cf * t.ravel()) / np.sum(cf))
    tf = t.ravel() - mu
    denom = lam2 * deg[lab] + cf                          # per pixel
    g = grid.splat(1.0 / denom)
    a = grid.splat(cf * tf / denom)
    inv_m = 1.0 / m

    def M(z):
        return inv_m * (Bn @ (inv_m * z))

    # z = S y solves (I - lam2 G M) z = a; symmetrize with z = sqrt(G) q
    sg = np.sqrt(g)

    def matvec(q):
        return q - lam2 * sg * M(sg * q)

    diag = 1.0 - lam2 * g * (Bn.diagonal() * inv_m * inv_m)
    jacobi = 1.0 / np.maximum(diag, 1e-12)
    # Grid components that no edge connects are independent subproblems, and
    # one with little confidence has a nearly free constant mode that Jacobi
    # cannot pin. Add an exact correction along each component's constant.
    ncomp, comp = csgraph.connected_components(grid.blur, directed=False)
    vconst = m / sg
    coarse = np.bincount(comp, weights=vconst * matvec(vconst), minlength=ncomp)

    def precond(r):
        return jacobi * r + vconst * (np.bincount(comp, weights=vconst * r, minlength=ncomp) / coarse)[comp]

    # start from the per-vertex confidence-weighted target
    cw = grid.splat(cf)
    z0 = m * grid.splat(cf * tf) / cw
    q, iters, res, ok = _pcg(matvec, a / sg, z0 / sg, precond, p.tolerance, p.max_iterations)
    z = sg * q
    y = (cf * tf + lam2 * M(z)[lab]) / denom
    if not ok:
        warnings.warn(
            f"bilateral solve stopped after {iters} iterations at relative residual {res:.2e}",
            ConvergenceWarning, stacklevel=2,
        )
    y = y.reshape(t.shape) + mu
    if return_info:
        return y, SolveInfo(iters, res, ok, grid.nvert)
    return y


# --------------------------------------------------------------------------
# simple filters


def median3x3(a):
    """3x3 median with edge clamping."""
    return ndimage.median_filter(np.asarray(a, dtype=np.float64), size=3, mode="nearest")


def _downsample(a, out_h, out_w):
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[:2]
    if h == 2 * out_h and w == 2 * out_w:
        return box2x(a)
    if h == 4 * out_h and w == 4 * out_w:
        return box2x(box2x(a))
    return bilinear(a, out_h, out_w)


def _as3(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def joint_bilateral_upsample(low_res, guide_full, params: JbuParams | None = None, guide_low=None):
    """Upsample ``low_res`` to the guide's size with guide-aware weights.

    Each output pixel averages the (2*sigma+1)^2 nearest low-res samples,
    weighted by spatial distance (in low-res pixels) and by the color
    difference between the full-res guide pixel and the guide averaged
    over the low-res sample's footprint.
    """
    p = params or JbuParams()
    low = _as3(low_res)
    guide = _as3(guide_full)
    h, w = low.shape[:2]
    if guide_low is None:
        guide_low = _downsample(guide, h, w)
    guide_low = _as3(guide_low)
    radius = int(round(p.sigma_spatial))
    out = _kernels.joint_bilateral_upsample(
        np.ascontiguousarray(low), np.ascontiguousarray(guide_low), np.ascontiguousarray(guide),
        float(p.sigma_spatial), float(p.sigma_range), radius,
    )
    return out[..., 0] if np.asarray(low_res).ndim == 2 else out


# --------------------------------------------------------------------------
# segmentation mask


def erosion_size(height: int, width: int, fraction: float = 0.05) -> int:
    k = max(1, int(round(fraction * max(height, width))))
    return k if k % 2 == 1 else k + 1


def mask_confidence(mask, fraction: float = 0.05):
    """Squared distance from 1/2 (rescaled to [0,1]), min-filtered over a
    k x k square, k about 5% of the larger image side."""
    M = np.asarray(mask, dtype=np.float64)
    k = erosion_size(*M.shape, fraction)
    c = ((M - 0.5) / 0.5) ** 2
    return ndimage.grey_erosion(c, size=(k, k), mode="nearest")


def refine_mask(mask, image, bilateral: BilateralParams | None = None,
                params: MaskParams | None = None, jbu: JbuParams | None = None):
    """Snap a coarse person mask to image edges; output in [0, 1]."""
    p = params or MaskParams()
    M = np.asarray(mask, dtype=np.float64)
    img = _as3(image)[..., :3]
    H, W = M.shape
    C = mask_confidence(M, p.erosion_fraction)
    h, w = max(1, H // 2), max(1, W // 2)
    Mh, Ch, Ih = _downsample(M, h, w), _downsample(C, h, w), _downsample(img, h, w)
    y = bilateral_solve(Mh, Ch, Ih, bilateral)
    y = 1.0 / (1.0 + np.exp(-p.sigmoid_slope * (y - 0.5)))
    y = ndimage.gaussian_filter(y, p.blur_sigma, mode="nearest")
    out = joint_bilateral_upsample(y, img, jbu, guide_low=Ih)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# disparity


def face_disparity(field: DisparityField, face: FaceRect) -> float:
    """Confidence-weighted mean disparity over the face rectangle."""
    f = face.clamp(*field.shape)
    ys, xs = f.slices()
    d = field.disparity[ys, xs]
    c = field.confidence[ys, xs]
    if c.sum() > 0:
        return float((d * c).sum() / c.sum())
    return float(d.mean())


def fuse_mask_disparity(field: DisparityField, mask, face: FaceRect,
                        threshold: float = 0.94, confidence_boost: float = 0.9) -> DisparityField:
    """Flatten the mask interior to the face disparity and raise its confidence."""
    M = np.asarray(mask, dtype=np.float64)
    if M.shape != field.shape:
        raise ValueError("mask and disparity must have the same size")
    inside = M > threshold
    out = field.copy()
    if not inside.any():
        return out
    d_face = face_disparity(field, face)
    out.disparity[inside] = d_face
    out.confidence[inside] = np.maximum(out.confidence[inside], confidence_boost)
    return out


def smooth_disparity(field: DisparityField, image, bilateral: BilateralParams | None = None,
                     jbu: JbuParams | None = None):
    """Quarter-resolution bilateral solve, 3x3 median, joint bilateral
    upsampling to the color image size."""
    img = _as3(image)[..., :3]
    H, W = img.shape[:2]
    h, w = max(1, H // 4), max(1, W // 4)
    d = np.asarray(field.disparity, dtype=np.float64)
    c = np.asarray(field.confidence, dtype=np.float64)
    if d.shape != (H, W):
        d = bilinear(d, H, W)
        c = bilinear(c, H, W)
    cq = _downsample(c, h, w)
    dq = _downsample(d * c, h, w) / np.maximum(cq, 1e-12)
    dq = np.where(cq > 1e-12, dq, _downsample(d, h, w))
    guide_q = _downsample(img, h, w)
    y = bilateral_solve(dq, cq, guide_q, bilateral)
    y = median3x3(y)
    return joint_bilateral_upsample(y, img, jbu, guide_low=guide_q)
