import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dpdof.imagecore import (LINEAR, SRGB, FieldMap, Image, ImageFormatError, bilinear, box2x,
                             load_image, luma_chroma, read_f32m, resample, sample_bilinear,
                             save_image, srgb_decode, srgb_encode, to_linear, to_srgb, write_f32m)


def test_srgb_reference_points():
    # IEC 61966-2-1 breakpoints
    assert srgb_decode(0.04045) == pytest.approx(0.04045 / 12.92)
    assert srgb_decode(1.0) == pytest.approx(1.0)
    assert srgb_decode(0.5) == pytest.approx(0.21404114, abs=1e-7)
    assert srgb_encode(0.0031308) == pytest.approx(0.0031308 * 12.92)
    assert srgb_encode(0.18) == pytest.approx(0.46135612, abs=1e-7)


@given(arrays(np.float64, 16, elements=st.floats(-2, 2)))
def test_srgb_round_trip(x):
    np.testing.assert_allclose(srgb_decode(srgb_encode(x)), x, atol=1e-12)


def test_image_wrappers():
    img = Image(np.full((2, 3), 0.5), SRGB)
    assert img.channels == 1 and img.height == 2 and img.width == 3
    lin = to_linear(img)
    assert lin.colorspace == LINEAR
    np.testing.assert_allclose(to_srgb(lin).data, 0.5)
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2, 5)))
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2)), "rec709")


def test_fieldmap_validation():
    FieldMap(np.zeros((2, 2)), "confidence")
    with pytest.raises(ValueError):
        FieldMap(np.full((2, 2), 1.5), "mask")
    with pytest.raises(ValueError):
        FieldMap(np.full((2, 2), -1.0), "radius")
    with pytest.raises(ValueError):
        FieldMap(np.zeros((2, 2)), "depth")


def test_box2x_is_block_mean(rng):
    a = rng.uniform(size=(6, 8, 3))
    expect = a.reshape(3, 2, 4, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(box2x(a), expect, atol=1e-15)


def test_bilinear_identity_and_constant(rng):
    a = rng.uniform(size=(5, 7))
    np.testing.assert_allclose(bilinear(a, 5, 7), a, atol=1e-15)
    np.testing.assert_allclose(bilinear(np.full((3, 4), 2.5), 9, 13), 2.5)


def test_bilinear_upsample_of_ramp_is_linear():
    x = np.arange(8, dtype=float)
    a = np.tile(x, (4, 1))
    up = bilinear(a, 8, 16)
    # away from the clamped borders the 2x upsample of a ramp is a ramp
    xs = (np.arange(16) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(up[:, 1:-1], np.tile(xs[1:-1], (8, 1)), atol=1e-12)


def test_resample_variants(rng):
    a = rng.uniform(size=(8, 6))
    np.testing.assert_allclose(resample(a, 3, 4, "box2x"), box2x(a))
    with pytest.raises(ValueError):
        resample(a, 5, 4, "box2x")
    with pytest.raises(ValueError):
        resample(a, 3, 4, "lanczos")
    img = resample(Image(a), 12, 16)
    assert img.data.shape == (16, 12, 1)


def test_sample_bilinear_midpoint():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert sample_bilinear(a, np.array(0.5), np.array(0.5)) == pytest.approx(1.5)
    assert sample_bilinear(a, np.array(-3.0), np.array(9.0)) == pytest.approx(1.0)


def test_f32m_round_trip(tmp_path, rng):
    data = rng.normal(size=(5, 7, 3)).astype(np.float32)
    p = tmp_path / "x.f32m"
    write_f32m(p, data)
    raw = p.read_bytes()
    assert raw[:4] == b"F32M"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [7, 5, 3]
    np.testing.assert_array_equal(read_f32m(p), data)


def test_f32m_size_mismatch(tmp_path):
    p = tmp_path / "bad.f32m"
    write_f32m(p, np.zeros((4, 4)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ImageFormatError, match="payload"):
        read_f32m(p)
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ImageFormatError, match="magic"):
        read_f32m(p)


@pytest.mark.parametrize("suffix,channels,depth", [
    (".png", 3, 8), (".png", 3, 16), (".png", 4, 16), (".png", 1, 8),
    (".pgm", 1, 16), (".ppm", 3, 8),
])
def test_integer_round_trip(tmp_path, rng, suffix, channels, depth):
    data = rng.uniform(size=(6, 9, channels))
    p = tmp_path / f"img{suffix}"
    save_image(Image(data, LINEAR), p, bit_depth=depth)
    back = load_image(p, SRGB).data
    assert back.shape == data.shape
    step = 1 / 255 if depth == 8 else 1 / 65535
    # half a code of rounding times the decode slope (at most ~2.3)
    np.testing.assert_allclose(back, data, atol=step * 1.2)


def test_channel_order(tmp_path):
    data = np.zeros((2, 2, 3))
    data[..., 0] = 1.0
    p = tmp_path / "red.png"
    save_image(Image(data), p, encode=LINEAR)
    back = load_image(p, LINEAR).data
    np.testing.assert_array_equal(back[..., 0], 1.0)
    np.testing.assert_array_equal(back[..., 1:], 0.0)


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    p = tmp_path / "x.tiff"
    p.write_bytes(b"0")
    with pytest.raises(ImageFormatError):
        load_image(p)
    p = tmp_path / "junk.png"
    p.write_bytes(b"not a png")
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_luma_chroma():
    rgb = np.array([[[0.3, 0.6, 0.9]]])
    y, u, v = luma_chroma(rgb)
    assert y[0, 0] == pytest.approx(0.6)
    assert u[0, 0] == pytest.approx(-0.3)
    assert v[0, 0] == pytest.approx(0.3)
