"""End-to-end runs of the three rendering modes, their configuration and
synthetic scene generation."""
from __future__ import annotations

import configparser
import json
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bokeh, dpstereo, edgeaware, lensmodel
from .bokeh import BlurParams, NoiseBank
from .dpstereo import ConfidenceParams, DisparityField, DpPair
from .edgeaware import BilateralParams, FaceRect, JbuParams, MaskParams
from .imagecore import (LINEAR, SRGB, Image, load_image, save_field, save_field_preview,
                        save_image)
from .lensmodel import CalibTable, LensParams

MODES = ("dp", "seg", "dp+seg")


class InputError(ValueError):
    """Missing or inconsistent pipeline inputs."""


@dataclass
class NoiseParams:
    """Shot/read noise model sigma = sqrt(a * luma + b) and the bank used
    when no bank directory is configured."""
    a: float = 2e-4
    b: float = 1e-6
    periods: tuple = (61, 67, 73)
    patch_size: int = 96
    highpass_sigma: float = 2.0
    feather: int = 4
    seed: int = 0
    bank: str | None = None


@dataclass
class PipelineConfig:
    mode: str = "dp"
    lens: LensParams = field(default_factory=LensParams)
    blur: BlurParams = field(default_factory=BlurParams)
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    jbu: JbuParams = field(default_factory=JbuParams)
    mask: MaskParams = field(default_factory=MaskParams)
    stereo: ConfidenceParams = field(default_factory=ConfidenceParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    fusion_threshold: float = 0.94
    confidence_boost: float = 0.9
    seg_radius: float = 8.0
    threads: int = 1
    bit_depth: int = 8
    # paths
    image: str | None = None
    dp_left: str | None = None
    dp_right: str | None = None
    mask_path: str | None = None
    calib: str | None = None
    out: str | None = None
    diagnostics: str | None = None
    face: FaceRect | None = None
    tap: tuple | None = None
    emit_diagnostics: bool = False

    def validate(self, need_paths: bool = True) -> None:
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.mode == "dp+seg" and self.face is None and self.tap is None:
            raise InputError("dp+seg needs --face or --tap")
        if not need_paths:
            return
        missing = []
        if self.image is None:
            missing.append("--image")
        if self.out is None:
            missing.append("--out")
        if self.mode in ("dp", "dp+seg"):
            if self.dp_left is None:
                missing.append("--dp-left")
            if self.dp_right is None:
                missing.append("--dp-right")
        if self.mode in ("seg", "dp+seg") and self.mask_path is None:
            missing.append("--mask")
        if missing:
            raise InputError(f"mode {self.mode} requires {', '.join(missing)}")


_SECTIONS = {
    "lens": "lens",
    "blur": "blur",
    "bilateral": "bilateral",
    "jbu": "jbu",
    "mask": "mask",
    "stereo": "stereo",
    "noise": "noise",
}


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Read an INI file; unknown keys are errors, absent keys keep defaults."""
    cfg = base or PipelineConfig()
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "pipeline":
            target = cfg
        elif section in _SECTIONS:
            target = getattr(cfg, _SECTIONS[section])
        else:
            raise InputError(f"{path}: unknown section [{section}]")
        names = {f.name for f in fields(target)}
        updates = {}
        for key, raw in items.items():
            if key not in names:
                raise InputError(f"{path}: unknown key {key!r} in [{section}]")
            cur = getattr(target, key)
            try:
                updates[key] = _coerce(raw, cur) if cur is not None else raw
            except ValueError as exc:
                raise InputError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
        try:
            new = replace(target, **updates)
        except ValueError as exc:
            raise InputError(f"{path}: [{section}] {exc}") from exc
        if target is cfg:
            cfg = new
        else:
            cfg = replace(cfg, **{_SECTIONS[section]: new})
    return cfg


def default_config_text() -> str:
    """INI text listing every tunable constant with its default."""
    cfg = PipelineConfig()
    out = ["[pipeline]"]
    for name in ("mode", "fusion_threshold", "confidence_boost", "seg_radius", "threads", "bit_depth"):
        out.append(f"{name} = {getattr(cfg, name)}")
    for section, attr in _SECTIONS.items():
        out.append("")
        out.append(f"[{section}]")
        obj = getattr(cfg, attr)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# run


@dataclass
class RunReport:
    """Stage wall times in milliseconds, in execution order.

    Stage names: ``load``, ``stereo`` (normalize, tile match, upsample),
    ``calibration``, ``fusion``, ``smoothing`` (bilateral solve, median,
    upsampling), ``focus``, ``radius``, ``render`` (layers, blurs and
    compositing), ``mask_refine``, ``mask_render``, ``noise`` and ``encode``.
    """
    mode: str
    stages: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    total_ms: float = 0.0
    d_focus: float | None = None
    converged: bool = True

    def summary(self) -> str:
        parts = [f"{k}={v:.1f}ms" for k, v in self.stages.items()]
        return f"{self.mode}: total {self.total_ms:.1f}ms ({', '.join(parts)})"


@dataclass
class PipelineResult:
    image: np.ndarray
    report: RunReport
    raw: DisparityField | None = None
    fused: DisparityField | None = None
    disparity: np.ndarray | None = None
    radius: np.ndarray | None = None
    mask: np.ndarray | None = None
    interior: np.ndarray | None = None


class _Timer:
    def __init__(self, report: RunReport):
        self.report = report

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            ms = (time.perf_counter() - t0) * 1e3
            self.report.stages[name] = self.report.stages.get(name, 0.0) + ms


def _synthetic_bank(noise: NoiseParams) -> NoiseBank:
    rng = np.random.default_rng(noise.seed)
    size = noise.patch_size
    flats = [rng.standard_normal((size, size)) for _ in noise.periods]
    return bokeh.build_noise_bank(flats, size, noise.periods, noise.highpass_sigma, noise.feather)


def _noise_bank(noise: NoiseParams) -> NoiseBank:
    if noise.bank:
        return NoiseBank.load(noise.bank)
    return _synthetic_bank(noise)


def _face_for_tap(tap, height, width, window=64):
    tx, ty = int(round(tap[0])), int(round(tap[1]))
    half = window // 2
    return FaceRect(tx - half, ty - half, tx + half, ty + half).clamp(height, width)


def process(config: PipelineConfig, color, pair: DpPair | None = None, mask=None,
            calib: CalibTable | None = None, report: RunReport | None = None) -> PipelineResult:
    """Run one mode on in-memory inputs. ``color`` is linear RGB."""
    own = report is None
    report = report or RunReport(config.mode)
    t0 = time.perf_counter()
    result = _process(config, color, pair, mask, calib, report)
    if own:
        report.total_ms = (time.perf_counter() - t0) * 1e3
    return result


def _process(config, color, pair, mask, calib, report) -> PipelineResult:
    config.validate(need_paths=False)
    timer = _Timer(report)
    color = np.asarray(color, dtype=np.float64)
    if color.ndim == 2:
        color = np.repeat(color[..., None], 3, axis=2)
    color = color[..., :3]
    H, W = color.shape[:2]
    mode = config.mode
    if mode in ("seg", "dp+seg"):
        if mask is None:
            raise InputError(f"mode {mode} needs a mask")
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 3:
            mask = mask[..., 0]
        if mask.shape != (H, W):
            raise InputError(f"mask is {mask.shape[1]}x{mask.shape[0]}, image is {W}x{H}")

    if mode == "seg":
        with timer("mask_refine"):
            refined = edgeaware.refine_mask(mask, color, config.bilateral, config.mask, config.jbu)
        with timer("mask_render"):
            out = bokeh.mask_blur_render(color, refined, config.seg_radius)
        with timer("noise"):
            bank = _noise_bank(config.noise)
            # only background pixels were blurred
            m_blur = (1.0 - refined) * bokeh.vertical_ramp(H)[:, None]
            sigma = bokeh.noise_sigma_map(color, config.noise.a, config.noise.b)
            out = bokeh.inject_noise(out, sigma, m_blur, bank)
        return PipelineResult(out, report, mask=refined)

    if pair is None:
        raise InputError(f"mode {mode} needs a DP pair")
    h, w = pair.view_left.shape
    if H % h or W % w:
        raise InputError(f"DP views {w}x{h} do not divide the image size {W}x{H}")
    pair = DpPair(pair.view_left, pair.view_right, W // w, H // h)
    with timer("stereo"):
        _, raw = dpstereo.compute_disparity(pair, W, H, params=config.stereo)
    field = raw
    if calib is not None:
        with timer("calibration"):
            z = config.lens.focus_distance
            zs = calib.focus_distances
            if z < zs[0] or z > zs[-1]:
                warnings.warn(f"focus distance {z:g} m outside calibrated range "
                              f"[{zs[0]:g}, {zs[-1]:g}]; clamping", RuntimeWarning, stacklevel=2)
            s_map, i_map = lensmodel.interpolate_calib(calib, z, W, H)
            field = lensmodel.correct_disparity(field, s_map, i_map)
    interior = None
    face = config.face
    if mode == "dp+seg":
        if face is None:
            face = _face_for_tap(config.tap, H, W)
        with timer("fusion"):
            field = edgeaware.fuse_mask_disparity(field, mask, face, config.fusion_threshold,
                                                  config.confidence_boost)
            interior = mask > config.fusion_threshold
    with timer("smoothing"):
        smooth = edgeaware.smooth_disparity(field, color, config.bilateral, config.jbu)
        if interior is not None and interior.any():
            # smoothing bleeds background disparity into the subject; keep it flat
            smooth[interior] = field.disparity[interior][0]
    with timer("focus"):
        d_focus = bokeh.select_focus(smooth, face, config.tap)
        params = bokeh.with_focus(config.blur, d_focus, person=(mode == "dp+seg"))
        params = replace(params, focus_distance=config.lens.focus_distance)
    report.d_focus = d_focus
    with timer("radius"):
        radius = bokeh.blur_radius_map(smooth, params)
    with timer("render"):
        rendered = bokeh.render_layered(color, smooth, params, config.threads)
    with timer("noise"):
        bank = _noise_bank(config.noise)
        sigma = bokeh.noise_sigma_map(color, config.noise.a, config.noise.b)
        out = bokeh.inject_noise(rendered.image, sigma, bokeh.blur_mask_from_radius(radius), bank)
    return PipelineResult(out, report, raw=raw, fused=field, disparity=smooth, radius=radius,
                          mask=mask, interior=interior)


def load_pair(left_path, right_path) -> DpPair:
    left = load_image(left_path, LINEAR).data
    right = load_image(right_path, LINEAR).data
    if left.shape != right.shape:
        raise InputError(f"DP views differ in size: {left_path} vs {right_path}")
    return DpPair(left.mean(axis=2), right.mean(axis=2))


def _write_diagnostics(result: PipelineResult, directory, report: RunReport) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    maps = {}
    if result.raw is not None:
        maps["disparity_raw"] = result.raw.disparity
        maps["confidence"] = result.raw.confidence
    if result.fused is not None and result.fused is not result.raw:
        maps["disparity_fused"] = result.fused.disparity
    if result.disparity is not None:
        maps["disparity"] = result.disparity
    if result.radius is not None:
        maps["radius"] = result.radius
    if result.mask is not None:
        maps["mask"] = result.mask
    for name, data in maps.items():
        save_field(data, d / f"{name}.f32m")
        save_field_preview(data, d / f"{name}.png")
        report.outputs[name] = str(d / f"{name}.f32m")
    (d / "report.json").write_text(json.dumps({
        "mode": report.mode, "stages_ms": report.stages, "total_ms": report.total_ms,
        "warnings": report.warnings, "d_focus": report.d_focus,
    }, indent=2))


def run(config: PipelineConfig) -> RunReport:
    """Load inputs named in ``config``, process, and write the outputs."""
    config.validate()
    report = RunReport(config.mode)
    timer = _Timer(report)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with timer("load"):
            color = load_image(config.image, SRGB).data
            pair = load_pair(config.dp_left, config.dp_right) if config.mode != "seg" else None
            mask = load_image(config.mask_path, LINEAR).data if config.mode != "dp" else None
            calib = CalibTable.load(config.calib) if config.calib and config.mode != "seg" else None
        result = process(config, color, pair, mask, calib, report)
        with timer("encode"):
            save_image(Image(np.clip(result.image, 0.0, None), LINEAR), config.out,
                       bit_depth=config.bit_depth, encode=SRGB)
            report.outputs["image"] = str(config.out)
    for w in caught:
        report.warnings.append(f"{w.category.__name__}: {w.message}")
        if issubclass(w.category, edgeaware.ConvergenceWarning):
            report.converged = False
    report.total_ms = (time.perf_counter() - t0) * 1e3
    if config.emit_diagnostics and config.diagnostics:
        _write_diagnostics(result, config.diagnostics, report)
    return report


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthRegion:
    """Axis-aligned ellipse (or rectangle) at a constant depth."""
    shape: str
    box: tuple          # ellipse: cx, cy, rx, ry; rect: x0, y0, x1, y1
    depth: float
    person: bool = False
    tint: tuple = (1.0, 1.0, 1.0)

    def mask(self, height, width):
        yy, xx = np.mgrid[0:height, 0:width] + 0.5
        if self.shape == "ellipse":
            cx, cy, rx, ry = self.box
            return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        if self.shape == "rect":
            x0, y0, x1, y1 = self.box
            return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        raise InputError(f"unknown region shape {self.shape!r}")


@dataclass
class SynthScene:
    width: int = 320
    height: int = 240
    scale: int = 2
    lens: LensParams = field(default_factory=LensParams)
    background_depth: float = 3.0
    regions: list = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0
    face: FaceRect | None = None
    sweep: list = field(default_factory=list)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthScene":
        doc = dict(doc)
        lens_doc = dict(doc.pop("lens", {}))
        gain = lens_doc.pop("gain", None)
        lens = LensParams.from_gain(gain, **lens_doc) if gain is not None else LensParams(**lens_doc)
        regions = [SynthRegion(r["shape"], tuple(r["box"]), float(r["depth"]),
                               bool(r.get("person", False)), tuple(r.get("tint", (1, 1, 1))))
                   for r in doc.pop("regions", [])]
        face = doc.pop("face", None)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown scene keys: {', '.join(sorted(unknown))}")
        return cls(lens=lens, regions=regions, face=FaceRect(*face) if face else None, **doc)

    def depth_map(self):
        depth = np.full((self.height, self.width), float(self.background_depth))
        for r in self.regions:
            depth[r.mask(self.height, self.width)] = r.depth
        return depth

    def person_mask(self):
        m = np.zeros((self.height, self.width), dtype=bool)
        for r in self.regions:
            if r.person:
                m |= r.mask(self.height, self.width)
        return m

    def color(self):
        tex = lensmodel.random_texture(self.height, self.width, self.seed, channels=3)
        img = tex.copy()
        for r in self.regions:
            m = r.mask(self.height, self.width)
            img[m] = np.clip(tex[m] * np.asarray(r.tint), 0.0, 1.0)
        return img

    def render(self):
        """(linear color, DP pair, DP-resolution true disparity)."""
        if self.width % self.scale or self.height % self.scale:
            raise InputError("image size must be a multiple of the DP scale")
        color = self.color()
        spec = lensmodel.SceneSpec(color, self.depth_map(), self.lens, self.noise_sigma,
                                   scale_x=self.scale, scale_y=self.scale, seed=self.seed)
        pair, truth = lensmodel.synth_dp_pair(spec)
        return color, pair, truth.disparity

    def sweep_pairs(self):
        """Fronto-parallel pairs at each disparity in ``sweep``."""
        out = []
        color = self.color()
        gain = self.lens.disparity_gain
        for k, d in enumerate(self.sweep):
            inv = 1.0 / self.lens.focus_distance - d / gain
            if inv <= 0:
                raise InputError(f"sweep disparity {d} has no positive depth for this lens")
            spec = lensmodel.SceneSpec(color, 1.0 / inv, self.lens, self.noise_sigma,
                                       scale_x=self.scale, scale_y=self.scale, seed=self.seed + k)
            pair, truth = lensmodel.synth_dp_pair(spec)
            out.append((float(d), pair, truth.disparity))
        return out


def write_scene(scene: SynthScene, out_dir) -> dict:
    """Write color, DP views, truth, optional mask and sweep; returns the paths."""
    d = Path(out_dir)
    color, pair, truth = scene.render()
    sweep = scene.sweep_pairs()
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "color": d / "color.png",
        "dp_left": d / "dp_left.png",
        "dp_right": d / "dp_right.png",
        "truth": d / "truth.f32m",
    }
    save_image(Image(color, LINEAR), paths["color"], bit_depth=16, encode=SRGB)
    save_image(Image(np.clip(pair.view_left, 0, 1), LINEAR), paths["dp_left"], bit_depth=16, encode=LINEAR)
    save_image(Image(np.clip(pair.view_right, 0, 1), LINEAR), paths["dp_right"], bit_depth=16, encode=LINEAR)
    save_field(truth, paths["truth"])
    pm = scene.person_mask()
    if pm.any():
        paths["mask"] = d / "mask.png"
        save_image(Image(pm.astype(np.float64), LINEAR), paths["mask"], encode=LINEAR)
    if scene.face is not None:
        paths["face"] = d / "face.txt"
        f = scene.face
        paths["face"].write_text(f"{f.x0},{f.y0},{f.x1},{f.y1}\n")
    for k, (disp, p, t) in enumerate(sweep):
        sub = d / f"sweep_{k}"
        sub.mkdir(exist_ok=True)
        save_image(Image(np.clip(p.view_left, 0, 1), LINEAR), sub / "dp_left.png", bit_depth=16, encode=LINEAR)
        save_image(Image(np.clip(p.view_right, 0, 1), LINEAR), sub / "dp_right.png", bit_depth=16, encode=LINEAR)
        save_field(t, sub / "truth.f32m")
        (sub / "disparity.txt").write_text(f"{disp}\n")
        paths[f"sweep_{k}"] = sub
    return {k: str(v) for k, v in paths.items()}


def parse_manifest(path):
    """Calibration manifest: ``focus_distance target_depth left right`` per
    line, ``#`` comments, paths relative to the manifest."""
    base = Path(path).parent
    entries = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        try:
            if len(parts) != 4:
                raise ValueError("expected 4 fields")
            z, D = float(parts[0]), float(parts[1])
            if z <= 0 or D <= 0:
                raise ValueError("distances must be positive")
        except ValueError as exc:
            raise InputError(f"{path}:{n}: malformed line {line.strip()!r} ({exc})") from exc
        entries.append((z, D, base / parts[2], base / parts[3]))
    if not entries:
        raise InputError(f"{path}: no captures listed")
    return entries


def calibrate(manifest, params: ConfidenceParams | None = None,
              grid_w: int = 17, grid_h: int = 13) -> CalibTable:
    captures = []
    for z, D, left, right in parse_manifest(manifest):
        pair = load_pair(left, right)
        h, w = pair.view_left.shape
        _, fld = dpstereo.compute_disparity(pair, w, h, params=params)
        captures.append((z, D, fld))
    return lensmodel.fit_calibration(captures, grid_w, grid_h)
