"""Disparity to defocused pixels: focus selection, blur radii, layered
scatter blur, compositing, the mask-only renderer and synthetic noise."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from .dpstereo import DisparityField
from .edgeaware import FaceRect
from .imagecore import bilinear, box2x, read_f32m, write_f32m

D_NULL_SCENE = 0.56
D_NULL_PERSON = 0.19
UNPREMULTIPLY_EPS = 1e-4


@dataclass
class BlurParams:
    """Blur strength and layering constants.

    ``scale`` is the global radius scale ``s`` in full-res pixels per unit
    disparity. ``r_brute`` is in working (half) resolution pixels,
    ``r_max`` in full-resolution pixels.
    """
    scale: float = 4.0
    r_max: float = 30.0
    r_brute: float = 2.75
    eta_fraction: float = 0.25
    frontal_factor: float = 0.6
    d_null_const: float = D_NULL_SCENE
    band_count: int = 5
    focus_distance: float = 1.0
    d_focus: float = 0.0

    def __post_init__(self):
        if not 0 < self.r_brute < self.r_max:
            raise ValueError("need 0 < r_brute < r_max")
        if not 0 < self.eta_fraction < 0.5:
            raise ValueError("eta_fraction must lie in (0, 0.5)")
        if self.band_count != 5:
            raise ValueError("the layered renderer uses exactly 5 bands")
        if self.scale <= 0 or self.focus_distance <= 0:
            raise ValueError("scale and focus distance must be positive")

    @property
    def kappa(self) -> float:
        return kappa(self.focus_distance, self.d_focus, self.scale)

    @property
    def d_null(self) -> float:
        return self.d_null_const / self.kappa


@dataclass
class LayerStack:
    cutoffs: np.ndarray
    layers: list
    radii: np.ndarray
    in_focus_index: int
    alphas: list = field(default_factory=list, repr=False)


@dataclass
class NoiseBank:
    patches: list
    periods: list

    def __post_init__(self):
        if len(self.patches) != len(self.periods):
            raise ValueError("one patch per period")
        for p, l in zip(self.patches, self.periods):
            if np.shape(p) != (l, l):
                raise ValueError(f"patch for period {l} has shape {np.shape(p)}")
        check_coprime(self.periods)

    def pattern(self, height: int, width: int):
        """Sum of all patches tiled over a ``height`` x ``width`` frame."""
        out = np.zeros((height, width))
        ys = np.arange(height)
        xs = np.arange(width)
        for p, l in zip(self.patches, self.periods):
            out += np.asarray(p)[np.ix_(ys % l, xs % l)]
        return out

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for p, l in zip(self.patches, self.periods):
            name = f"noise_{l}.f32m"
            write_f32m(d / name, np.asarray(p))
            names.append(name)
        (d / "bank.json").write_text(json.dumps({"periods": list(map(int, self.periods)),
                                                 "patches": names}, indent=2))

    @classmethod
    def load(cls, directory) -> "NoiseBank":
        d = Path(directory)
        doc = json.loads((d / "bank.json").read_text())
        patches = [read_f32m(d / n)[..., 0].astype(np.float64) for n in doc["patches"]]
        return cls(patches, [int(l) for l in doc["periods"]])


# --------------------------------------------------------------------------
# focus and radius


def _disparity(field_or_array):
    if isinstance(field_or_array, DisparityField):
        return field_or_array.disparity
    return np.asarray(field_or_array, dtype=np.float64)


def select_focus(field_or_array, face: FaceRect | None = None, tap=None,
                 face_threshold: float = 1.0, tap_window: int = 64) -> float:
    """Median disparity of the subject: face first, then tap, else 0."""
    d = _disparity(field_or_array)
    h, w = d.shape
    if face is not None:
        ys, xs = face.clamp(h, w).slices()
        med = float(np.median(d[ys, xs]))
        if abs(med) <= face_threshold:
            return med
    if tap is not None:
        tx, ty = int(round(tap[0])), int(round(tap[1]))
        tx = min(max(tx, 0), w - 1)
        ty = min(max(ty, 0), h - 1)
        half = tap_window // 2
        win = d[max(0, ty - half): min(h, ty + half), max(0, tx - half): min(w, tx + half)]
        return float(np.median(win))
    return 0.0


def kappa(z: float, d_focus: float, s: float = 1.0) -> float:
    if z <= 0:
        raise ValueError("focus distance must be positive")
    k1 = min(3.5, max(1.0, 0.33 * z + 0.17))
    q = 1.0 + d_focus / 2.0
    # the unclamped factor blows up (or flips sign) as q -> 0+, so take the cap
    k2 = 2.0 if q <= 0 else min(2.0, max(0.5, 1.0 / q))
    return s * k1 * k2


def blur_radius_map(disparity, params: BlurParams):
    """Full-resolution blur radius for each pixel."""
    d = _disparity(disparity)
    k = params.kappa
    delta = d - params.d_focus
    scale = np.where(delta > 0, params.frontal_factor * k, k)
    r = scale * np.maximum(0.0, np.abs(delta) - params.d_null)
    return np.minimum(r, params.r_max)


def band_cutoffs(d_range, d_focus: float, params: BlurParams):
    """Six ascending disparities bounding five bands, far to near.

    Returns ``(cutoffs, in_focus_index)``.
    """
    d_min, d_max = float(d_range[0]), float(d_range[1])
    k = params.kappa
    half = params.d_null + 2.0 * params.r_brute / k
    lo, hi = d_focus - half, d_focus + half
    far = lo - d_min
    near = d_max - hi
    if far > 0 and near > 0:
        cuts = [d_min, d_min + far / 2, lo, hi, hi + near / 2, d_max]
        idx = 2
    elif far > 0:
        cuts = [d_min + far * i / 4 for i in range(4)] + [lo, hi]
        idx = 4
    elif near > 0:
        cuts = [lo, hi] + [hi + near * i / 4 for i in range(1, 5)]
        idx = 0
    else:
        # nothing outside the in-focus band: pad with empty bands
        cuts = [lo - 2 * half, lo - half, lo, hi, hi + half, hi + 2 * half]
        idx = 2
    return np.array(cuts, dtype=np.float64), idx


def tent_alpha(d, lo, hi, eta, open_lo=False, open_hi=False):
    """Band membership: 1 on [lo, hi], linear taper to 0 over ``eta``."""
    d = np.asarray(d, dtype=np.float64)
    a = d - lo if not open_lo else np.full_like(d, np.inf)
    b = hi - d if not open_hi else np.full_like(d, np.inf)
    return np.clip(1.0 + np.minimum(a, b) / eta, 0.0, 1.0)


def band_alphas(disparity, cutoffs, eta_fraction: float = 0.25):
    """Alpha of each band; the outermost bands extend to infinity."""
    d = np.asarray(disparity, dtype=np.float64)
    n = len(cutoffs) - 1
    out = []
    for j in range(n):
        lo, hi = cutoffs[j], cutoffs[j + 1]
        eta = eta_fraction * (hi - lo)
        out.append(tent_alpha(d, lo, hi, eta, open_lo=(j == 0), open_hi=(j == n - 1)))
    return out


def decompose_layers(image, disparity, cutoffs, eta_fraction: float = 0.25,
                     radii=None, in_focus_index: int = 2) -> LayerStack:
    """Split an RGB image into premultiplied RGBA band layers."""
    img = np.asarray(image, dtype=np.float64)[..., :3]
    d = np.asarray(disparity, dtype=np.float64)
    if img.shape[:2] != d.shape:
        raise ValueError("image and disparity sizes differ")
    alphas = band_alphas(d, cutoffs, eta_fraction)
    layers = [np.concatenate([img * a[..., None], a[..., None]], axis=2) for a in alphas]
    if radii is None:
        radii = np.zeros_like(d)
    return LayerStack(np.asarray(cutoffs, dtype=np.float64), layers, np.asarray(radii, dtype=np.float64),
                      in_focus_index, alphas)


# --------------------------------------------------------------------------
# blurs


def _radius(layer, radius):
    r = np.asarray(radius, dtype=np.float64)
    if r.ndim == 0:
        r = np.full(layer.shape[:2], float(r))
    if r.shape != layer.shape[:2]:
        raise ValueError("radius map and layer sizes differ")
    return np.ascontiguousarray(np.maximum(r, 0.0))


def _layer(layer):
    a = np.asarray(layer, dtype=np.float64)
    return np.ascontiguousarray(a[..., None] if a.ndim == 2 else a)


def scatter_blur_brute(layer, radius, backend=None):
    """Scatter each pixel over an anti-aliased disk of its own radius,
    written as a gather. Kernels are normalized to unit sum."""
    a = _layer(layer)
    r = _radius(a, radius)
    if not r.any():
        out = a.copy()
    else:
        out = (backend or _kernels.active).scatter_brute(a, r)
    return out[..., 0] if np.ndim(layer) == 2 else out


def scatter_blur_gradient(layer, radius, backend=None):
    """Scatter each pixel uniformly over its rasterized disk by drawing the
    disk's top and bottom edges into a vertical-difference buffer and
    prefix-summing the columns."""
    a = _layer(layer)
    r = _radius(a, radius)
    if not r.any():
        out = a.copy()
    else:
        out = (backend or _kernels.active).scatter_gradient(a, r)
    return out[..., 0] if np.ndim(layer) == 2 else out


def blur_layers(stack: LayerStack, params: BlurParams, threads: int = 1):
    """Blur every layer with the working-resolution radius map.

    The in-focus band uses the brute kernel, the rest the gradient kernel.
    Layers are independent, so running them on several threads gives the
    same bits as running them in sequence.
    """
    def job(j):
        fn = scatter_blur_brute if j == stack.in_focus_index else scatter_blur_gradient
        return fn(stack.layers[j], stack.radii)

    idx = range(len(stack.layers))
    if threads <= 1:
        return [job(j) for j in idx]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, idx))


# --------------------------------------------------------------------------
# compositing


def over(front, back):
    """Premultiplied 'over'."""
    return front + (1.0 - front[..., 3:4]) * back


def unpremultiply(rgba, eps: float = UNPREMULTIPLY_EPS):
    a = rgba[..., 3:4]
    ok = a > eps
    return np.where(ok, rgba[..., :3] / np.where(ok, a, 1.0), 0.0)


def sharp_layer(color_full, disparity_full, cutoffs, in_focus_index: int, eta_fraction: float = 0.25):
    """Full-resolution premultiplied RGBA of the in-focus band."""
    img = np.asarray(color_full, dtype=np.float64)[..., :3]
    a = band_alphas(disparity_full, cutoffs, eta_fraction)[in_focus_index]
    return np.concatenate([img * a[..., None], a[..., None]], axis=2)


def composite(stack: LayerStack, blurred, sharp_full):
    """Far-to-near 'over' of the upsampled blurred layers, with the sharp
    full-resolution layer placed right after the in-focus band.

    Returns un-premultiplied RGB (black where coverage is negligible).
    """
    sharp = np.asarray(sharp_full, dtype=np.float64)
    H, W = sharp.shape[:2]
    acc = np.zeros((H, W, 4))
    for j, layer in enumerate(blurred):
        up = layer if layer.shape[:2] == (H, W) else bilinear(layer, H, W)
        acc = over(up, acc)
        if j == stack.in_focus_index:
            acc = over(sharp, acc)
    return unpremultiply(acc)


@dataclass
class RenderResult:
    image: np.ndarray
    radius: np.ndarray
    stack: LayerStack


def render_layered(color_full, disparity_full, params: BlurParams, threads: int = 1) -> RenderResult:
    """Depth-dependent defocus of a linear RGB image at its own resolution."""
    img = np.asarray(color_full, dtype=np.float64)[..., :3]
    d = np.asarray(disparity_full, dtype=np.float64)
    if img.shape[:2] != d.shape:
        raise ValueError("color image and disparity sizes differ")
    radius_full = blur_radius_map(d, params)
    img_w = box2x(img)
    d_w = box2x(d)
    r_w = blur_radius_map(d_w, params) / 2.0
    cutoffs, idx = band_cutoffs((d.min(), d.max()), params.d_focus, params)
    stack = decompose_layers(img_w, d_w, cutoffs, params.eta_fraction, r_w, idx)
    blurred = blur_layers(stack, params, threads)
    sharp = sharp_layer(img, d, cutoffs, idx, params.eta_fraction)
    return RenderResult(composite(stack, blurred, sharp), radius_full, stack)


def vertical_ramp(height: int):
    """Blend weight per row: 0 (sharp) at the bottom, 1 at the top."""
    if height == 1:
        return np.zeros(1)
    t = (height - 1 - np.arange(height)) / (height - 1)
    return np.clip(t * 1.25 - 0.125, 0.0, 1.0)


def mask_blur_render(image, mask, uniform_radius: float, ramp=None):
    """Blur the background (1 - mask) in one gather pass and blend it in,
    sharp at the bottom of the frame, blurred at the top."""
    img = np.asarray(image, dtype=np.float64)[..., :3]
    M = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    if M.shape != img.shape[:2]:
        raise ValueError("mask and image sizes differ")
    bg = 1.0 - M
    layer = np.concatenate([img * bg[..., None], bg[..., None]], axis=2)
    blurred = scatter_blur_brute(layer, float(uniform_radius))
    a = blurred[..., 3:4]
    ok = a > UNPREMULTIPLY_EPS
    blurred_rgb = np.where(ok, blurred[..., :3] / np.where(ok, a, 1.0), img)
    w = vertical_ramp(img.shape[0]) if ramp is None else np.broadcast_to(ramp, (img.shape[0],))
    wb = (w[:, None] * bg)[..., None]
    return (1.0 - wb) * img + wb * blurred_rgb


# --------------------------------------------------------------------------
# noise


def check_coprime(periods) -> None:
    for a, b in combinations(periods, 2):
        if math.gcd(int(a), int(b)) != 1:
            raise ValueError(f"periods {a} and {b} are not relatively prime")


def feather_alpha(size: int, width: int):
    """Separable alpha that ramps linearly from 0 to 1 over ``width`` pixels
    at each border."""
    if width <= 0:
        ramp = np.ones(size)
    else:
        x = np.arange(size) + 0.5
        ramp = np.clip(np.minimum(x, size - x) / width, 0.0, 1.0)
    return np.outer(ramp, ramp)


def periodic_patch(noise, period: int, feather: int):
    """Fold a feathered noise tile onto a ``period`` x ``period`` torus and
    normalize by the folded alpha. The result tiles without seams."""
    L = noise.shape[0]
    a = feather_alpha(L, feather)
    idx = np.arange(L) % period
    acc = np.zeros((period, period))
    wsum = np.zeros((period, period))
    np.add.at(acc, (idx[:, None], idx[None, :]), noise * a)
    np.add.at(wsum, (idx[:, None], idx[None, :]), a)
    return acc / wsum


def build_noise_bank(flats, size: int, periods, highpass_sigma: float = 2.0,
                     feather: int = 4) -> NoiseBank:
    """Zero-mean, unit-variance periodic noise tiles from flat-field frames.

    Period ``i`` uses frame ``i`` (cycling when there are fewer frames).
    """
    flats = [np.asarray(f, dtype=np.float64) for f in flats]
    if not flats:
        raise ValueError("need at least one flat-field image")
    periods = [int(l) for l in periods]
    check_coprime(periods)
    patches = []
    for i, l in enumerate(periods):
        if size <= l + 2 * feather:
            raise ValueError(f"patch size {size} must exceed period {l} + 2*feather ({l + 2 * feather})")
        f = flats[i % len(flats)]
        if f.ndim == 3:
            f = f.mean(axis=2)
        h, w = f.shape
        if h < size or w < size:
            raise ValueError(f"flat field {w}x{h} smaller than patch size {size}")
        y0, x0 = (h - size) // 2, (w - size) // 2
        tile = f[y0:y0 + size, x0:x0 + size]
        hp = tile - ndimage.gaussian_filter(tile, highpass_sigma, mode="reflect")
        p = periodic_patch(hp, l, feather)
        p -= p.mean()
        sd = p.std()
        patches.append(p / sd if sd > 0 else p)
    return NoiseBank(patches, periods)


def noise_sigma_map(image, a: float, b: float):
    """Shot/read noise model: sigma = sqrt(a * luma + b)."""
    img = np.asarray(image, dtype=np.float64)
    luma = img[..., :3].mean(axis=2) if img.ndim == 3 else img
    return np.sqrt(np.maximum(a * luma + b, 0.0))


def blur_mask_from_radius(radius, ramp: float = 1.0):
    return np.clip(np.asarray(radius, dtype=np.float64) / ramp, 0.0, 1.0)


def inject_noise(image, sigma, m_blur, bank: NoiseBank):
    """Add the tiled bank pattern where the image was blurred.

    The same noise value goes to every channel.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (h, w))
    m = np.asarray(m_blur, dtype=np.float64)
    if m.shape != (h, w):
        raise ValueError("blur mask and image sizes differ")
    n = s * m * bank.pattern(h, w)
    return img + (n[..., None] if img.ndim == 3 else n)


def with_focus(params: BlurParams, d_focus: float, person: bool | None = None) -> BlurParams:
    """Copy of ``params`` focused at ``d_focus``; ``person`` picks the d_null constant."""
    kw = {"d_focus": float(d_focus)}
    if person is not None:
        kw["d_null_const"] = D_NULL_PERSON if person else D_NULL_SCENE
    return replace(params, **kw)
