"""Image containers, color transfer, resampling and file I/O.

Arrays are ``(height, width)`` or ``(height, width, channels)`` floating
point, row-major. All pipeline math runs on linear values; sRGB encoding
only happens at file boundaries.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

LINEAR = "linear"
SRGB = "srgb"

F32M_MAGIC = b"F32M"
_F32M_HEADER = struct.Struct("<4sIII")

FIELD_KINDS = ("disparity", "confidence", "mask", "radius", "sigma")


class ImageFormatError(ValueError):
    """Unsupported file or malformed contents."""


@dataclass
class Image:
    data: np.ndarray
    colorspace: str = LINEAR

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        if self.data.ndim != 3 or not 1 <= self.data.shape[2] <= 4:
            raise ValueError(f"image must be HxWxC with 1..4 channels, got {self.data.shape}")
        if self.colorspace not in (LINEAR, SRGB):
            raise ValueError(f"unknown colorspace {self.colorspace!r}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class FieldMap:
    data: np.ndarray
    kind: str = "disparity"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("field maps are single channel")
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind in ("confidence", "mask") and self.data.size:
            if self.data.min() < 0 or self.data.max() > 1:
                raise ValueError(f"{self.kind} values must lie in [0, 1]")
        if self.kind == "radius" and self.data.size and self.data.min() < 0:
            raise ValueError("radius values must be >= 0")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def srgb_decode(x):
    """sRGB-encoded values to linear (IEC 61966-2-1 curve)."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    lin = np.where(a <= 0.04045, a / 12.92, ((a + 0.055) / 1.055) ** 2.4)
    return np.sign(x) * lin


def srgb_encode(x):
    """Linear values to sRGB encoding. Values above 1 follow the curve."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    enc = np.where(a <= 0.0031308, a * 12.92, 1.055 * a ** (1 / 2.4) - 0.055)
    return np.sign(x) * enc


def to_linear(image: Image) -> Image:
    if image.colorspace == LINEAR:
        return image
    return Image(srgb_decode(image.data), LINEAR)


def to_srgb(image: Image) -> Image:
    if image.colorspace == SRGB:
        return image
    return Image(srgb_encode(image.data), SRGB)


# --------------------------------------------------------------------------
# resampling


def box2x(a):
    """Exact mean of 2x2 blocks. Odd trailing rows/columns are dropped."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def bilinear(a, new_h, new_w):
    """Pixel-center aligned bilinear resampling with edge clamping."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[:2]
    ys = np.clip((np.arange(new_h) + 0.5) * (h / new_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(new_w) + 0.5) * (w / new_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if a.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resample(a, new_width: int, new_height: int, filter: str = "bilinear"):
    """Resample an array or ``Image`` to ``new_width`` x ``new_height``."""
    if new_width < 1 or new_height < 1:
        raise ValueError("target dimensions must be >= 1")
    if isinstance(a, Image):
        return Image(resample(a.data, new_width, new_height, filter), a.colorspace)
    if filter == "box2x":
        if (a.shape[0] // 2, a.shape[1] // 2) != (new_height, new_width):
            raise ValueError("box2x halves each dimension")
        return box2x(a)
    if filter == "bilinear":
        return bilinear(a, new_height, new_width)
    raise ValueError(f"unknown filter {filter!r}")


def sample_bilinear(a, ys, xs):
    """Sample a 2-D array at fractional coordinates, edge-clamped."""
    h, w = a.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    return ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
            + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))


# --------------------------------------------------------------------------
# file I/O


def read_f32m(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _F32M_HEADER.size:
        raise ImageFormatError(f"{path}: truncated F32M header")
    magic, w, h, c = _F32M_HEADER.unpack_from(raw)
    if magic != F32M_MAGIC:
        raise ImageFormatError(f"{path}: bad magic {magic!r}")
    n = w * h * c
    body = raw[_F32M_HEADER.size:]
    if len(body) != 4 * n:
        raise ImageFormatError(
            f"{path}: header says {w}x{h}x{c} ({4 * n} bytes) but payload has {len(body)}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).copy()


def write_f32m(path, data) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(_F32M_HEADER.pack(F32M_MAGIC, w, h, c))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


_INT_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}


def load_image(path, expected_colorspace: str = SRGB) -> Image:
    """Load a file as a linear ``Image``.

    ``expected_colorspace`` says how integer files are encoded; sRGB data is
    linearized after scaling to [0, 1]. F32M files are always linear.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".f32m":
        return Image(read_f32m(path).astype(np.float64), LINEAR)
    if suffix not in _INT_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported format {suffix!r}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: could not decode")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 3:
        raw = raw[..., [2, 1, 0, 3][: raw.shape[2]]] if raw.shape[2] == 4 else raw[..., ::-1]
    data = raw.astype(np.float64) / scale
    if expected_colorspace == SRGB:
        if data.ndim == 3 and data.shape[2] == 4:
            data[..., :3] = srgb_decode(data[..., :3])
        else:
            data = srgb_decode(data)
    elif expected_colorspace != LINEAR:
        raise ValueError(f"unknown colorspace {expected_colorspace!r}")
    return Image(data, LINEAR)


def save_image(image, path, bit_depth: int = 8, encode: str = SRGB) -> None:
    """Write an ``Image`` (or bare array, taken as linear).

    Integer formats are clipped to [0, 1] after optional sRGB encoding.
    ``.f32m`` stores the linear samples losslessly.
    """
    if not isinstance(image, Image):
        image = Image(image, LINEAR)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".f32m":
        write_f32m(path, to_linear(image).data)
        return
    if suffix not in _INT_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported format {suffix!r}")
    data = to_linear(image).data.copy()
    if encode == SRGB:
        data[..., : min(3, data.shape[2])] = srgb_encode(data[..., : min(3, data.shape[2])])
    if bit_depth == 8:
        q = np.round(np.clip(data, 0, 1) * 255).astype(np.uint8)
    elif bit_depth == 16:
        q = np.round(np.clip(data, 0, 1) * 65535).astype(np.uint16)
    else:
        raise ValueError("bit_depth must be 8 or 16")
    c = q.shape[2]
    if c == 1:
        q = q[..., 0]
    elif c == 2:
        raise ImageFormatError("two-channel images cannot be written as PNG/PNM")
    elif c == 3:
        q = q[..., ::-1]
    else:
        q = q[..., [2, 1, 0, 3]]
    if suffix in (".pgm", ".ppm", ".pnm") and c == 4:
        raise ImageFormatError("PNM formats hold 1 or 3 channels")
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"could not write {path}")


def save_field(data, path) -> None:
    write_f32m(path, np.asarray(data, dtype=np.float64))


def save_field_preview(data, path) -> None:
    """Min-max normalized 8-bit PNG for eyeballing a map."""
    d = np.asarray(data, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    n = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
    save_image(Image(n, LINEAR), path, encode=LINEAR)


def luma_chroma(rgb):
    """Split a guide image into (luma, u, v) with luma = mean(R, G, B)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2 or rgb.shape[2] == 1:
        g = rgb.reshape(rgb.shape[0], rgb.shape[1])
        z = np.zeros_like(g)
        return g, z, z
    y = rgb[..., :3].mean(axis=2)
    return y, rgb[..., 0] - y, rgb[..., 2] - y
