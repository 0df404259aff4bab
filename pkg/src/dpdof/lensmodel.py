"""Thin-lens disparity model, aberration calibration, synthetic DP captures."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dpstereo import SEARCH, DisparityField, DpPair
from .imagecore import sample_bilinear


class CalibrationError(ValueError):
    pass


@dataclass
class LensParams:
    """Thin-lens camera. Lengths in meters.

    ``alpha`` is the disparity-per-blur factor; its sign sets the disparity
    convention. The default is negative so that objects nearer than the
    focus plane get positive disparity, with ``|alpha * L * f / pixel_pitch|``
    equal to one DP pixel per diopter of defocus.
    """
    focal_length: float = 0.005
    aperture: float = 0.002
    alpha: float = -0.5
    focus_distance: float = 1.0
    pixel_pitch: float = 5e-6

    def __post_init__(self):
        if self.focal_length <= 0 or self.aperture <= 0 or self.pixel_pitch <= 0:
            raise ValueError("focal length, aperture and pixel pitch must be positive")
        if self.focus_distance <= self.focal_length:
            raise ValueError("focus distance must exceed the focal length")

    @property
    def disparity_gain(self) -> float:
        """Disparity (DP pixels) per unit of inverse depth (1/m)."""
        return self.alpha * self.aperture * self.focal_length / self.pixel_pitch

    @classmethod
    def from_gain(cls, gain: float, focus_distance: float = 1.0, **kw) -> "LensParams":
        """Lens whose alpha is chosen so that ``disparity_gain == gain``."""
        p = cls(focus_distance=focus_distance, **kw)
        p.alpha = gain * p.pixel_pitch / (p.aperture * p.focal_length)
        return p


def disparity_from_depth(lens: LensParams, depth):
    """Approximate thin-lens disparity in DP pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    return lens.disparity_gain * (1.0 / lens.focus_distance - 1.0 / depth)


def depth_from_disparity(lens: LensParams, d):
    """Inverse of :func:`disparity_from_depth`."""
    d = np.asarray(d, dtype=np.float64)
    inv = 1.0 / lens.focus_distance - d / lens.disparity_gain
    # sign of the gain decides which side is "beyond infinity"
    if np.any(inv <= 0):
        limit = lens.disparity_gain / lens.focus_distance
        raise ValueError(
            f"disparity implies non-positive inverse depth; valid disparities are "
            f"{'below' if lens.disparity_gain > 0 else 'above'} {limit:g}"
        )
    return 1.0 / inv


def blur_diameter(lens: LensParams, depth):
    """Signed blur diameter in meters from the exact thin-lens equations.

    Positive when the object's image forms in front of the sensor.
    ``depth`` may be ``inf``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    f, z = lens.focal_length, lens.focus_distance
    if np.any(depth <= f):
        raise ValueError("depth must exceed the focal length")
    inv_di = 1.0 / f - 1.0 / depth
    zi = 1.0 / (1.0 / f - 1.0 / z)
    return lens.aperture * zi * inv_di - lens.aperture


def exact_disparity(lens: LensParams, depth):
    """alpha * blur diameter, in DP pixels, without the f << z approximation."""
    return lens.alpha * blur_diameter(lens, depth) / lens.pixel_pitch


# --------------------------------------------------------------------------
# synthetic captures


@dataclass
class SceneSpec:
    """Oracle scene: a texture seen through a thin lens at given depths.

    ``texture`` is sampled at color resolution; the DP views are produced at
    color resolution and box-averaged down by ``scale_y`` x ``scale_x``.
    ``distortion`` is an optional (gain, offset) pair of DP-resolution maps
    applied to the true disparity to mimic aberrations.
    """
    texture: np.ndarray
    depth: np.ndarray | float
    lens: LensParams = field(default_factory=LensParams)
    noise_sigma: float = 0.0
    distortion: tuple | None = None
    scale_x: int = 1
    scale_y: int = 1
    seed: int = 0


def random_texture(height: int, width: int, seed: int = 0, blur: float = 1.5,
                   channels: int = 1):
    """Band-limited noise in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((height, width, channels))
    t = ndimage.gaussian_filter(t, sigma=(blur, blur, 0), mode="wrap")
    t = (t - t.mean()) / (t.std() + 1e-12)
    t = np.clip(0.5 + 0.15 * t, 0.1, 0.9)
    return t[..., 0] if channels == 1 else t


def _downscale(a, sy, sx):
    h, w = a.shape[0] // sy * sy, a.shape[1] // sx * sx
    return a[:h, :w].reshape(h // sy, sy, w // sx, sx).mean(axis=(1, 3))


def synth_dp_pair(scene: SceneSpec):
    """Render a DP pair and its ground-truth disparity (DP resolution)."""
    tex = np.asarray(scene.texture, dtype=np.float64)
    if tex.ndim == 3:
        tex = tex[..., 1] if tex.shape[2] >= 3 else tex[..., 0]
    H, W = tex.shape
    sx, sy = scene.scale_x, scene.scale_y
    h, w = H // sy, W // sx
    depth = scene.depth
    if np.isscalar(depth):
        depth = np.full((h, w), float(depth))
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape == (H, W) and (H, W) != (h, w):
        depth = _downscale(depth, sy, sx)
    if np.any(depth <= 0):
        raise ValueError("scene depth must be positive")
    d = disparity_from_depth(scene.lens, depth)
    if scene.distortion is not None:
        gain, offset = scene.distortion
        d = np.asarray(gain) * d + np.asarray(offset)
    if np.abs(d).max() > SEARCH:
        raise ValueError(f"ground-truth disparity {np.abs(d).max():.3f} exceeds the matcher range of {SEARCH}")

    # per color pixel shift in color pixels
    d_full = np.repeat(np.repeat(d, sy, axis=0), sx, axis=1)
    d_full = np.pad(d_full, ((0, H - d_full.shape[0]), (0, W - d_full.shape[1])), mode="edge")
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    half = 0.5 * d_full * sx
    left = _downscale(sample_bilinear(tex, ys, xs + half), sy, sx)
    right = _downscale(sample_bilinear(tex, ys, xs - half), sy, sx)
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(scene.seed)
        left = left + rng.normal(0, scene.noise_sigma, left.shape)
        right = right + rng.normal(0, scene.noise_sigma, right.shape)
    pair = DpPair(left, right, sx, sy)
    return pair, DisparityField(d, np.ones_like(d))


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibTable:
    focus_distances: np.ndarray
    slope: np.ndarray        # (Nz, grid_h, grid_w)
    intercept: np.ndarray    # (Nz, grid_h, grid_w)
    residual_rms: np.ndarray | None = None

    def __post_init__(self):
        self.focus_distances = np.asarray(self.focus_distances, dtype=np.float64)
        self.slope = np.asarray(self.slope, dtype=np.float64)
        self.intercept = np.asarray(self.intercept, dtype=np.float64)
        if self.slope.ndim != 3 or self.slope.shape != self.intercept.shape:
            raise ValueError("slope/intercept must both be (Nz, grid_h, grid_w)")
        if len(self.focus_distances) != self.slope.shape[0]:
            raise ValueError("one slice per focus distance")
        if np.any(np.diff(self.focus_distances) <= 0):
            raise ValueError("focus distances must be strictly increasing")

    @property
    def grid_w(self) -> int:
        return self.slope.shape[2]

    @property
    def grid_h(self) -> int:
        return self.slope.shape[1]

    def to_json(self) -> dict:
        doc = {
            "focus_distances": self.focus_distances.tolist(),
            "grid": [self.grid_w, self.grid_h],
            "S": [s.ravel().tolist() for s in self.slope],
            "I": [s.ravel().tolist() for s in self.intercept],
        }
        if self.residual_rms is not None:
            doc["residual_rms"] = [s.ravel().tolist() for s in self.residual_rms]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CalibTable":
        gw, gh = doc["grid"]
        nz = len(doc["focus_distances"])
        shape = (nz, gh, gw)
        rms = doc.get("residual_rms")
        return cls(
            doc["focus_distances"],
            np.asarray(doc["S"], dtype=np.float64).reshape(shape),
            np.asarray(doc["I"], dtype=np.float64).reshape(shape),
            None if rms is None else np.asarray(rms, dtype=np.float64).reshape(shape),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "CalibTable":
        return cls.from_json(json.loads(Path(path).read_text()))


def control_cells(height: int, width: int, grid_w: int, grid_h: int):
    """Label every pixel with its nearest control point (row-major index).

    Control points sit on a regular lattice whose corners coincide with the
    corner pixel centers.
    """
    def nearest(n, g):
        if g == 1:
            return np.zeros(n, dtype=int)
        pos = np.arange(n) * (g - 1) / max(n - 1, 1)
        return np.clip(np.round(pos).astype(int), 0, g - 1)
    cy = nearest(height, grid_h)
    cx = nearest(width, grid_w)
    return cy[:, None] * grid_w + cx[None, :]


def _cell_average(field: DisparityField, labels, ncells):
    w = field.confidence.ravel()
    wsum = np.bincount(labels.ravel(), weights=w, minlength=ncells)
    dsum = np.bincount(labels.ravel(), weights=w * field.disparity.ravel(), minlength=ncells)
    with np.errstate(invalid="ignore", divide="ignore"):
        return dsum / wsum, wsum


def fit_calibration(captures, grid_w: int = 17, grid_h: int = 13) -> CalibTable:
    """Weighted least-squares line of disparity against inverse depth per
    control point, for every focus distance.

    ``captures`` is an iterable of ``(focus_distance, target_depth, DisparityField)``.
    """
    by_z: dict[float, list] = {}
    for z, D, fld in captures:
        by_z.setdefault(float(z), []).append((float(D), fld))
    if not by_z:
        raise CalibrationError("no captures")
    zs = sorted(by_z)
    ncells = grid_w * grid_h
    S = np.empty((len(zs), grid_h, grid_w))
    I = np.empty_like(S)
    rms = np.empty_like(S)
    for k, z in enumerate(zs):
        caps = by_z[z]
        depths = {D for D, _ in caps}
        if len(depths) < 2:
            raise CalibrationError(
                f"focus distance {z:g} m has {len(depths)} distinct target depth(s); need >= 2"
            )
        xs, ys, ws = [], [], []
        for D, fld in caps:
            labels = control_cells(*fld.shape, grid_w, grid_h)
            dbar, wsum = _cell_average(fld, labels, ncells)
            xs.append(np.full(ncells, 1.0 / D))
            ys.append(np.nan_to_num(dbar))
            ws.append(wsum)
        x, y, wt = np.array(xs), np.array(ys), np.array(ws)
        sw = wt.sum(axis=0)
        if np.any(sw <= 0):
            raise CalibrationError(f"control points without confident data at z={z:g}")
        mx = (wt * x).sum(0) / sw
        my = (wt * y).sum(0) / sw
        sxx = (wt * (x - mx) ** 2).sum(0)
        sxy = (wt * (x - mx) * (y - my)).sum(0)
        if np.any(sxx <= 0):
            raise CalibrationError(f"degenerate depths at z={z:g}: confident samples share one depth")
        slope = sxy / sxx
        icpt = my - slope * mx
        res = y - (slope * x + icpt)
        S[k] = slope.reshape(grid_h, grid_w)
        I[k] = icpt.reshape(grid_h, grid_w)
        rms[k] = np.sqrt((wt * res ** 2).sum(0) / sw).reshape(grid_h, grid_w)
    return CalibTable(zs, S, I, rms)


def _grid_to_pixels(grid, height, width):
    """Bilinear interpolation of a control lattice to pixel centers."""
    gh, gw = grid.shape
    ys = np.arange(height) * (gh - 1) / max(height - 1, 1)
    xs = np.arange(width) * (gw - 1) / max(width - 1, 1)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    return sample_bilinear(grid, Y, X)


def interpolate_calib(table: CalibTable, z: float, width: int, height: int):
    """Slope and intercept maps at ``width`` x ``height`` for focus distance ``z``.

    Linear in ``z`` between stored slices, clamped outside the stored range.
    """
    zs = table.focus_distances
    if len(zs) == 1 or z <= zs[0]:
        s, i = table.slope[0], table.intercept[0]
    elif z >= zs[-1]:
        s, i = table.slope[-1], table.intercept[-1]
    else:
        k = int(np.searchsorted(zs, z)) - 1
        t = (z - zs[k]) / (zs[k + 1] - zs[k])
        s = (1 - t) * table.slope[k] + t * table.slope[k + 1]
        i = (1 - t) * table.intercept[k] + t * table.intercept[k + 1]
    return _grid_to_pixels(s, height, width), _grid_to_pixels(i, height, width)


def center_values(s_map, i_map):
    """Maps sampled at the geometric image center."""
    h, w = s_map.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return (float(sample_bilinear(s_map, np.array(cy), np.array(cx))),
            float(sample_bilinear(i_map, np.array(cy), np.array(cx))))


def correct_disparity(field: DisparityField, s_map, i_map, s_center=None, i_center=None,
                      min_slope: float = 1e-6) -> DisparityField:
    """Map every pixel's disparity onto the center pixel's disparity/depth line."""
    s_map = np.asarray(s_map, dtype=np.float64)
    i_map = np.asarray(i_map, dtype=np.float64)
    if s_center is None or i_center is None:
        sc, ic = center_values(s_map, i_map)
        s_center = sc if s_center is None else s_center
        i_center = ic if i_center is None else i_center
    bad = np.abs(s_map) < min_slope
    safe = np.where(bad, 1.0, s_map)
    d = i_center + s_center * (field.disparity - i_map) / safe
    d = np.where(bad, field.disparity, d)
    c = np.where(bad, 0.0, field.confidence)
    return DisparityField(d, c)

