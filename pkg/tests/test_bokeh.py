import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpdof.bokeh import (D_NULL_PERSON, D_NULL_SCENE, BlurParams, NoiseBank, band_alphas,
                         band_cutoffs, blur_mask_from_radius, blur_radius_map, build_noise_bank,
                         check_coprime, composite, decompose_layers, feather_alpha, inject_noise,
                         kappa, mask_blur_render, noise_sigma_map, over, periodic_patch,
                         render_layered, scatter_blur_brute, scatter_blur_gradient, select_focus,
                         sharp_layer, tent_alpha, unpremultiply, vertical_ramp, with_focus)
from dpdof.dpstereo import DisparityField
from dpdof.edgeaware import FaceRect


def params(**kw):
    base = dict(scale=1.0, focus_distance=0.5, d_focus=0.0)
    base.update(kw)
    return BlurParams(**base)


# ---------------------------------------------------------------- focus


def test_select_focus_cascade():
    d = np.zeros((100, 100))
    assert select_focus(d) == 0.0
    d[10:30, 10:30] = 0.4
    assert select_focus(d, face=FaceRect(10, 10, 30, 30)) == pytest.approx(0.4)
    d[10:30, 10:30] = 2.5
    d[60:, 60:] = 0.2
    assert select_focus(d, face=FaceRect(10, 10, 30, 30), tap=(80, 80)) == pytest.approx(0.2)
    # face rejected and no tap: fall back to 0
    assert select_focus(d, face=FaceRect(10, 10, 30, 30)) == 0.0


def test_select_focus_clamps_regions():
    d = np.full((40, 40), 0.3)
    f = DisparityField(d, np.ones_like(d))
    assert select_focus(f, face=FaceRect(-20, -20, 10, 10)) == pytest.approx(0.3)
    assert select_focus(f, tap=(500, -7)) == pytest.approx(0.3)


# ---------------------------------------------------------------- kappa and radius


def test_kappa_constants():
    assert kappa(10.0, 0.0) == pytest.approx(3.47, abs=1e-12)
    assert kappa(0.5, 0.0) == 1.0
    assert kappa(100.0, 0.0) == 3.5
    assert kappa(1.0, 6.0) / kappa(1.0, 0.0) == 0.5
    assert kappa(1.0, -1.5) / kappa(1.0, 0.0) == 2.0
    assert kappa(1.0, -2.0) / kappa(1.0, 0.0) == 2.0
    assert kappa(1.0, -5.0) / kappa(1.0, 0.0) == 2.0
    assert kappa(2.0, 1.0, s=3.0) == pytest.approx(3.0 * 1.0 * (1 / 1.5))
    with pytest.raises(ValueError):
        kappa(0.0, 0.0)


def test_d_null_constants():
    p = params(scale=2.5, focus_distance=10.0)
    assert p.d_null * p.kappa == pytest.approx(D_NULL_SCENE, abs=1e-15)
    q = with_focus(p, 0.0, person=True)
    assert q.d_null * q.kappa == pytest.approx(D_NULL_PERSON, abs=1e-15)


def test_radius_examples():
    p = params(scale=3.0)     # kappa = 3
    k, dn = p.kappa, p.d_null
    assert k == 3.0
    r = blur_radius_map(np.array([0.0, dn, -dn, -(dn + 1 / k), -20.0, 20.0]), p)
    assert r[0] == 0.0 and r[1] == 0.0 and r[2] == 0.0
    assert r[3] == pytest.approx(1.0, abs=1e-12)
    assert r[4] == 30.0 and r[5] == 30.0


def test_radius_plateau_width():
    for person in (False, True):
        p = with_focus(params(scale=4.0, focus_distance=3.0), 0.3, person=person)
        d = np.linspace(-5, 5, 200001)
        r = blur_radius_map(d, p)
        zero = d[r == 0.0]
        width = zero.max() - zero.min()
        assert width == pytest.approx(2 * p.d_null, abs=1e-4)
        assert zero.min() == pytest.approx(p.d_focus - p.d_null, abs=1e-4)


@given(st.floats(-8, 8), st.floats(-2, 2))
def test_radius_continuous_piecewise_linear(d0, focus):
    p = with_focus(params(scale=2.0), focus)
    eps = 1e-6
    r = blur_radius_map(np.array([d0 - eps, d0, d0 + eps]), p)
    assert abs(r[2] - r[0]) <= 2 * eps * p.kappa + 1e-12
    assert 0.0 <= r.min() and r.max() <= p.r_max


def test_frontal_pixels_blur_less():
    p = params(scale=2.0)
    r = blur_radius_map(np.array([-3.0, 3.0]), p)
    assert r[1] == pytest.approx(0.6 * r[0])


def test_params_validation():
    with pytest.raises(ValueError):
        BlurParams(r_brute=40.0)
    with pytest.raises(ValueError):
        BlurParams(eta_fraction=0.5)
    with pytest.raises(ValueError):
        BlurParams(band_count=4)


# ---------------------------------------------------------------- bands


def test_band_cutoffs_symmetric_example():
    p = params()
    assert p.kappa == 1.0
    cuts, idx = band_cutoffs((-20.0, 20.0), 0.0, p)
    assert idx == 2
    np.testing.assert_allclose(cuts[2:4], [-6.06, 6.06], atol=1e-12)
    np.testing.assert_allclose(cuts, [-20, -13.03, -6.06, 6.06, 13.03, 20], atol=1e-12)


def test_band_cutoffs_far_only():
    cuts, idx = band_cutoffs((-30.0, 1.0), 0.0, params())
    assert idx == 4
    np.testing.assert_allclose(np.diff(cuts[:5]), (30 - 6.06) / 4)
    assert cuts[0] == -30.0


def test_band_cutoffs_near_only_and_neither():
    cuts, idx = band_cutoffs((-1.0, 30.0), 0.0, params())
    assert idx == 0 and cuts[-1] == 30.0
    cuts, idx = band_cutoffs((-1.0, 1.0), 0.0, params())
    assert idx == 2
    assert np.all(np.diff(cuts) > 0)


@given(st.floats(-30, 30), st.floats(0.1, 40), st.floats(-3, 3))
def test_band_cutoffs_cover_range(lo, span, focus):
    d_min, d_max = min(lo, focus), max(lo + span, focus)
    cuts, idx = band_cutoffs((d_min, d_max), focus, params(scale=2.0))
    assert len(cuts) == 6 and np.all(np.diff(cuts) > 0)
    assert cuts[0] <= d_min + 1e-9 and cuts[-1] >= d_max - 1e-9
    assert cuts[idx] <= focus <= cuts[idx + 1]


def test_tent_examples():
    cuts = np.array([-4.0, -2.0, -1.0, 1.0, 2.0, 4.0])
    a = band_alphas(np.array([0.0, 1.0, 1.5, 1.0 + 0.5, -1.5]), cuts)
    # center of band 2
    assert a[2][0] == 1.0 and a[0][0] == 0.0 and a[4][0] == 0.0
    # exactly at a cutoff, both neighbours are 1
    assert a[2][1] == 1.0 and a[3][1] == 1.0
    # eta for band 2 is 0.5, so d = 1.5 is the taper endpoint
    assert a[2][3] == 0.0
    assert tent_alpha(np.array(1.25), -1, 1, 0.5) == pytest.approx(0.5)


def test_outer_bands_open():
    cuts = np.array([-4.0, -2.0, -1.0, 1.0, 2.0, 4.0])
    a = band_alphas(np.array([-100.0, 100.0]), cuts)
    assert a[0][0] == 1.0 and a[4][1] == 1.0


def test_decompose_layers_invariants(rng):
    img = rng.uniform(size=(16, 20, 3))
    d = rng.uniform(-10, 10, size=(16, 20))
    cuts, idx = band_cutoffs((d.min(), d.max()), 0.0, params())
    st_ = decompose_layers(img, d, cuts, 0.25, None, idx)
    assert len(st_.layers) == 5
    for L in st_.layers:
        a = L[..., 3]
        assert a.min() >= 0 and a.max() <= 1
        assert np.all(L[..., :3] <= a[..., None] * img.max() + 1e-12)
    total = sum(L[..., 3] for L in st_.layers)
    assert total.min() >= 1.0
    with pytest.raises(ValueError):
        decompose_layers(img, d[:5], cuts)


# ---------------------------------------------------------------- blur wrappers


@pytest.mark.parametrize("fn", [scatter_blur_brute, scatter_blur_gradient])
def test_blur_zero_radius_identity(fn, rng):
    a = rng.uniform(size=(12, 14, 4))
    np.testing.assert_array_equal(fn(a, 0.0), a)
    np.testing.assert_array_equal(fn(a[..., 0], np.zeros((12, 14))), a[..., 0])


@pytest.mark.parametrize("fn", [scatter_blur_brute, scatter_blur_gradient])
def test_blur_constant_interior(fn):
    a = np.full((40, 40, 4), 0.3)
    out = fn(a, 3.0)
    np.testing.assert_allclose(out[5:-5, 5:-5], 0.3, atol=1e-12)


@pytest.mark.parametrize("fn", [scatter_blur_brute, scatter_blur_gradient])
@given(seed=st.integers(0, 10_000))
def test_blur_energy_conservation(fn, seed):
    rng = np.random.default_rng(seed)
    a = np.zeros((48, 48, 4))
    a[16:32, 16:32, :3] = rng.uniform(size=(16, 16, 3))
    a[16:32, 16:32, 3] = 1.0
    r = rng.uniform(0, 15, size=(48, 48))
    out = fn(a, r)
    np.testing.assert_allclose(out.sum(axis=(0, 1)), a.sum(axis=(0, 1)), rtol=1e-4)


def test_brute_single_pixel_r2():
    a = np.zeros((11, 11, 4))
    a[5, 5] = 1.0
    out = scatter_blur_brute(a, 2.0)
    yy, xx = np.mgrid[-5:6, -5:6]
    k = np.clip(2.5 - np.hypot(yy, xx), 0, 1)
    np.testing.assert_allclose(out[..., 0], k / k.sum(), atol=1e-12)
    assert out[..., 1].sum() == pytest.approx(1.0, abs=1e-5)


def test_blur_radius_shape_checked():
    with pytest.raises(ValueError):
        scatter_blur_gradient(np.zeros((4, 4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------- compositing


def test_over_algebra():
    half = np.zeros((2, 2, 4))
    half[..., 3] = 0.5
    black = np.zeros((2, 2, 4))
    assert np.all(over(half, over(half, black))[..., 3] == 0.75)
    opaque = np.concatenate([np.full((2, 2, 3), 0.8), np.ones((2, 2, 1))], axis=2)
    np.testing.assert_array_equal(over(opaque, half), opaque)


def test_unpremultiply():
    x = np.array([[[0.2, 0.1, 0.05, 0.5], [1e-6, 1e-6, 1e-6, 1e-5]]])
    out = unpremultiply(x)
    np.testing.assert_allclose(out[0, 0], [0.4, 0.2, 0.1])
    np.testing.assert_array_equal(out[0, 1], 0.0)


def test_composite_identity_in_focus(rng):
    img = rng.uniform(0.05, 1, size=(32, 40, 3))
    d = np.zeros((32, 40))
    p = params()
    res = render_layered(img, d, p)
    np.testing.assert_array_equal(res.radius, 0.0)
    np.testing.assert_allclose(res.image, img, atol=1e-12)


def test_composite_sharp_layer_is_exact(rng):
    img = rng.uniform(0.05, 1, size=(32, 32, 3))
    d = np.zeros((32, 32))
    d[:, 16:] = -15.0
    p = params()
    res = render_layered(img, d, p)
    inner = d == 0.0
    inner[:, 12:] = False      # away from the band edge and the blurred far layer
    np.testing.assert_allclose(res.image[inner], img[inner], atol=1e-12)


def test_composite_near_wins():
    H = W = 8
    cuts = np.array([-4.0, -2.0, -1.0, 1.0, 2.0, 4.0])
    stack = decompose_layers(np.zeros((H // 2, W // 2, 3)), np.zeros((H // 2, W // 2)), cuts, 0.25,
                             None, 2)
    far = np.zeros((H, W, 4))
    far[..., 0] = far[..., 3] = 1.0
    near = np.zeros((H, W, 4))
    near[..., 1] = near[..., 3] = 1.0
    empty = np.zeros((H, W, 4))
    out = composite(stack, [far, empty, empty, empty, near], empty)
    np.testing.assert_array_equal(out, np.broadcast_to([0.0, 1.0, 0.0], (H, W, 3)))


def test_render_deterministic_across_threads(rng):
    img = rng.uniform(size=(48, 64, 3))
    d = rng.uniform(-12, 12, size=(48, 64))
    p = params(scale=2.0)
    a = render_layered(img, d, p, threads=1).image
    b = render_layered(img, d, p, threads=4).image
    np.testing.assert_array_equal(a, b)


def test_sharp_layer_uses_tent():
    img = np.ones((1, 3, 3))
    cuts = np.array([-4.0, -2.0, -1.0, 1.0, 2.0, 4.0])
    s = sharp_layer(img, np.array([[0.0, 1.25, 3.0]]), cuts, 2)
    np.testing.assert_allclose(s[0, :, 3], [1.0, 0.5, 0.0])


# ---------------------------------------------------------------- mask renderer


def test_ramp():
    w = vertical_ramp(101)
    assert w[-1] == 0.0 and w[0] == 1.0
    assert np.all(w[91:] == 0.0) and np.all(w[:10] == 1.0)
    assert np.all(np.diff(w) <= 0)


def test_mask_renderer_examples(rng):
    img = rng.uniform(size=(40, 50, 3))
    np.testing.assert_array_equal(mask_blur_render(img, np.ones((40, 50)), 4.0), img)
    full = mask_blur_render(img, np.zeros((40, 50)), 4.0, ramp=np.ones(40))
    layer = np.concatenate([img, np.ones((40, 50, 1))], axis=2)
    b = scatter_blur_brute(layer, 4.0)
    np.testing.assert_allclose(full, b[..., :3] / b[..., 3:], atol=1e-12)
    out = mask_blur_render(img, rng.uniform(size=(40, 50)), 4.0)
    np.testing.assert_array_equal(out[-1], img[-1])


# ---------------------------------------------------------------- noise


def flats(n=3, size=160, seed=0):
    rng = np.random.default_rng(seed)
    return [0.5 + 0.02 * rng.normal(size=(size, size)) for _ in range(n)]


def test_coprime_check():
    check_coprime([61, 67, 73])
    with pytest.raises(ValueError):
        check_coprime([60, 66])


def test_feather_alpha():
    a = feather_alpha(20, 4)
    assert a.shape == (20, 20)
    assert a[10, 10] == 1.0 and a[0, 0] == pytest.approx(1 / 64)
    np.testing.assert_array_equal(a, a.T)


def test_periodic_patch_normalizes_by_alpha():
    p = periodic_patch(np.full((50, 50), 2.0), 13, 4)
    np.testing.assert_allclose(p, 2.0)


def test_noise_bank_stats_and_tiling():
    bank = build_noise_bank(flats(), 96, [61, 67, 73])
    for p, l in zip(bank.patches, bank.periods):
        assert p.shape == (l, l)
        assert abs(p.mean()) < 1e-3
        assert abs(p.var() - 1) < 1e-3
        tiled = np.tile(p, (3, 3))
        assert np.max(np.abs(tiled[:-l] - tiled[l:])) == 0.0
        assert np.max(np.abs(tiled[:, :-l] - tiled[:, l:])) == 0.0


def test_noise_bank_errors():
    with pytest.raises(ValueError):
        build_noise_bank(flats(), 96, [60, 66])
    with pytest.raises(ValueError):
        build_noise_bank(flats(), 68, [61])
    with pytest.raises(ValueError):
        build_noise_bank(flats(size=64), 96, [61])
    with pytest.raises(ValueError):
        build_noise_bank([], 96, [61])


def test_noise_bank_highpass_spectrum():
    bank = build_noise_bank(flats(1, 256), 200, [127], highpass_sigma=2.0)
    p = bank.patches[0]
    P = np.abs(np.fft.fft2(p)) ** 2
    f = np.fft.fftfreq(127)
    rad = np.hypot(f[:, None], f[None, :])
    assert P[0, 0] < 1e-18 * P.sum() + 1e-20
    low = P[(rad > 0) & (rad < 0.03)].mean()
    high = P[rad > 0.25].mean()
    assert low < 0.2 * high


def test_noise_bank_roundtrip(tmp_path):
    bank = build_noise_bank(flats(), 96, [61, 67])
    bank.save(tmp_path / "bank")
    back = NoiseBank.load(tmp_path / "bank")
    assert back.periods == [61, 67]
    for a, b in zip(bank.patches, back.patches):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_noise_bank_rejects_bad_shapes():
    with pytest.raises(ValueError):
        NoiseBank([np.zeros((5, 5))], [7])


def test_pattern_periodicity():
    bank = build_noise_bank(flats(), 96, [61, 67])
    pat = bank.pattern(8, 61 * 67 + 5)
    np.testing.assert_allclose(pat[:, 4087:], pat[:, :5], atol=1e-12)


def test_inject_identities(rng):
    img = rng.uniform(size=(30, 40, 3))
    bank = build_noise_bank(flats(), 96, [61, 67])
    np.testing.assert_array_equal(inject_noise(img, 0.0, np.ones((30, 40)), bank), img)
    np.testing.assert_array_equal(inject_noise(img, 0.1, np.zeros((30, 40)), bank), img)
    out = inject_noise(img, 0.1, np.ones((30, 40)), bank)
    n = out - img
    np.testing.assert_allclose(n[..., 0], n[..., 2])
    np.testing.assert_allclose(n[..., 0], 0.1 * bank.pattern(30, 40))


def test_noise_helpers():
    s = noise_sigma_map(np.full((2, 2, 3), 0.5), 2e-4, 1e-6)
    np.testing.assert_allclose(s, np.sqrt(2e-4 * 0.5 + 1e-6))
    np.testing.assert_array_equal(blur_mask_from_radius(np.array([0.0, 0.5, 1.0, 7.0])),
                                  [0.0, 0.5, 1.0, 1.0])
