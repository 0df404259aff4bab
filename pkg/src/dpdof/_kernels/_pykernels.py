"""Pure numpy versions of the compiled kernels.

Used when the Cython extension is not built, or when ``DPDOF_PURE_PYTHON``
is set. Loops run over kernel offsets, never over pixels.
"""
import numpy as np


def _shifted(a, dy, dx):
    """View of ``a`` sampled at (y + dy, x + dx) with zero outside."""
    h, w = a.shape[:2]
    out = np.zeros_like(a)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = a[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def disk_norms(radius):
    r = np.maximum(np.asarray(radius, dtype=np.float64), 0.0)
    R = max(int(np.ceil(r.max() + 0.5)) - 1, 0) if r.size else 0
    out = np.zeros_like(r)
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            out += np.clip(r + 0.5 - np.hypot(dy, dx), 0.0, 1.0)
    return out


def scatter_brute(layer, radius):
    layer = np.asarray(layer, dtype=np.float64)
    r = np.maximum(np.asarray(radius, dtype=np.float64), 0.0)
    R = max(int(np.ceil(r.max() + 0.5)) - 1, 0) if r.size else 0
    inv = 1.0 / disk_norms(r)
    rp5 = r + 0.5
    out = np.zeros_like(layer)
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            wgt = np.clip(rp5 - np.hypot(dy, dx), 0.0, 1.0) * inv
            # source weights, then bring sources to their destinations
            out += _shifted(wgt[..., None] * layer, dy, dx)
    return out


def disk_sizes(radius):
    r = np.maximum(np.asarray(radius, dtype=np.float64), 0.0)
    rr = (r + 0.5) ** 2
    R = int(np.floor(r.max() + 0.5)) if r.size else 0
    n = np.zeros(r.shape, dtype=np.int64)
    reach = np.floor(r + 0.5)
    for dx in range(-R, R + 1):
        ok = reach >= abs(dx)
        hh = np.floor(np.sqrt(np.where(ok, rr - dx * dx, 0.0))).astype(np.int64)
        n += np.where(ok, 2 * hh + 1, 0)
    return n


def scatter_gradient(layer, radius):
    layer = np.asarray(layer, dtype=np.float64)
    h, w, nc = layer.shape
    r = np.maximum(np.asarray(radius, dtype=np.float64), 0.0)
    rr = (r + 0.5) ** 2
    reach = np.floor(r + 0.5)
    R = int(reach.max()) if r.size else 0
    val = layer / disk_sizes(r)[..., None]
    ys, xs = np.mgrid[0:h, 0:w]
    grad = np.zeros(((h + 1) * w, nc))
    for dx in range(-R, R + 1):
        tx = xs + dx
        ok = (reach >= abs(dx)) & (tx >= 0) & (tx < w)
        if not ok.any():
            continue
        hh = np.floor(np.sqrt(rr[ok] - dx * dx)).astype(np.int64)
        top = np.maximum(ys[ok] - hh, 0) * w + tx[ok]
        bot = np.minimum(ys[ok] + hh + 1, h) * w + tx[ok]
        v = val[ok]
        for c in range(nc):
            grad[:, c] += np.bincount(top, weights=v[:, c], minlength=(h + 1) * w)
            grad[:, c] -= np.bincount(bot, weights=v[:, c], minlength=(h + 1) * w)
    grad = grad.reshape(h + 1, w, nc)
    return np.cumsum(grad, axis=0)[:h]


def _bilinear(low, py, px):
    h, w = low.shape[:2]
    fy = np.clip(py, 0, h - 1)
    fx = np.clip(px, 0, w - 1)
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ay = (fy - y0)[..., None]
    ax = (fx - x0)[..., None]
    return ((1 - ay) * ((1 - ax) * low[y0, x0] + ax * low[y0, x1])
            + ay * ((1 - ax) * low[y1, x0] + ax * low[y1, x1]))


def joint_bilateral_upsample(low, guide_low, guide, sigma_spatial, sigma_range, radius):
    low = np.asarray(low, dtype=np.float64)
    H, W = guide.shape[:2]
    h, w = low.shape[:2]
    py = ((np.arange(H) + 0.5) * (h / H) - 0.5)[:, None] * np.ones((1, W))
    px = ((np.arange(W) + 0.5) * (w / W) - 0.5)[None, :] * np.ones((H, 1))
    cy = np.floor(py + 0.5).astype(int)
    cx = np.floor(px + 0.5).astype(int)
    acc = np.zeros((H, W, low.shape[2]))
    tot = np.zeros((H, W))
    for dy in range(-radius, radius + 1):
        qy = cy + dy
        oky = (qy >= 0) & (qy < h)
        qyc = np.clip(qy, 0, h - 1)
        for dx in range(-radius, radius + 1):
            qx = cx + dx
            ok = oky & (qx >= 0) & (qx < w)
            qxc = np.clip(qx, 0, w - 1)
            wsp = np.exp(-((qyc - py) ** 2 + (qxc - px) ** 2) / (2 * sigma_spatial ** 2))
            d2 = ((guide - guide_low[qyc, qxc]) ** 2).sum(axis=2)
            wt = np.where(ok, wsp * np.exp(-d2 / (2 * sigma_range ** 2)), 0.0)
            tot += wt
            acc += wt[..., None] * low[qyc, qxc]
    good = tot >= 1e-8
    out = np.where(good[..., None], acc / np.where(good, tot, 1.0)[..., None], 0.0)
    if not good.all():
        out[~good] = _bilinear(low, py, px)[~good]
    return out
