import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqpde.errors import ShapeError
from freqpde.fspe import (
    FilterField,
    WaveletQuad,
    apply_lowpass,
    build_pyramid,
    dwt_haar,
    fuse_level,
    idwt_haar,
    lowpass_geometry,
    predict_lowpass_filters,
    pyramid_geometry,
)
from freqpde.tensor import conv2d_3x3, seeded_init, softmax, zero_init


def loop_lowpass(x, wts, k):
    """Direct per-pixel evaluation of the weighted K×K neighbourhood sum."""
    c, h, w = x.shape
    r = k // 2
    out = np.zeros((c, h, w))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for p in range(-r, r + 1):
                    for q in range(-r, r + 1):
                        y, xx = i + p, j + q
                        if 0 <= y < h and 0 <= xx < w:
                            acc += float(wts[(p + r) * k + (q + r), i, j]) * float(x[ch, y, xx])
                out[ch, i, j] = acc
    return out


def random_field(rng, h, w, k=3):
    return FilterField(softmax(rng.standard_normal((k * k, h, w)) * 2, axis=0), k)


class TestFilterPrediction:
    def test_zero_weights_uniform(self, rng):
        f = predict_lowpass_filters(rng.standard_normal((3, 5, 6)), zero_init(lowpass_geometry(3)))
        np.testing.assert_allclose(f.weights, 1 / 9, atol=1e-7)

    def test_shape(self, rng):
        f = predict_lowpass_filters(rng.standard_normal((4, 5, 6)), seeded_init(0, lowpass_geometry(4)))
        assert f.weights.shape == (9, 5, 6)

    def test_configurable_kernel(self, rng):
        f = predict_lowpass_filters(rng.standard_normal((2, 4, 4)), seeded_init(0, lowpass_geometry(2, k=5)), k=5)
        assert f.weights.shape == (25, 4, 4)

    def test_simplex_against_direct_sum(self, rng):
        w = seeded_init(11, lowpass_geometry(4))
        x = rng.standard_normal((4, 6, 7)) * 5
        f = predict_lowpass_filters(x, w).weights.astype(np.float64)
        logits = conv2d_3x3(x, w["fspe.lowpass.weight"], w["fspe.lowpass.bias"]).astype(np.float64)
        for i in range(6):
            for j in range(7):
                e = np.exp(logits[:, i, j] - logits[:, i, j].max())
                np.testing.assert_allclose(f[:, i, j], e / e.sum(), atol=1e-6)
                assert abs(f[:, i, j].sum() - 1) <= 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            predict_lowpass_filters(np.zeros((3, 4, 4)), zero_init(lowpass_geometry(2)))


class TestApplyLowpass:
    def test_uniform_field_on_constant_interior(self):
        x = np.full((2, 6, 6), 3.0)
        y = apply_lowpass(x, FilterField(np.full((9, 6, 6), 1 / 9)))
        np.testing.assert_allclose(y[:, 1:-1, 1:-1], 3.0, atol=1e-6)

    def test_center_delta_is_identity(self, rng):
        wts = np.zeros((9, 4, 5))
        wts[4] = 1.0
        x = rng.standard_normal((3, 4, 5)).astype(np.float32)
        assert np.array_equal(apply_lowpass(x, FilterField(wts)), x)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 4, 4))
        field = random_field(rng, 4, 4)
        np.testing.assert_allclose(apply_lowpass(x, field), loop_lowpass(x, field.weights, 3), atol=1e-6)

    def test_grid_mismatch(self, rng):
        with pytest.raises(ShapeError, match="grid"):
            apply_lowpass(np.zeros((1, 4, 4)), random_field(rng, 4, 5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_never_amplifies_interior(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 6, 6)).astype(np.float32)
        y = apply_lowpass(x, random_field(rng, 6, 6))
        assert np.all(np.abs(y[:, 1:-1, 1:-1]).max(axis=(1, 2)) <= np.abs(x).max(axis=(1, 2)) + 1e-6)


class TestHaar:
    def test_constant(self):
        q = dwt_haar(np.full((2, 4, 6), 1.5))
        np.testing.assert_array_equal(q.ll, 3.0)
        for band in (q.lh, q.hl, q.hh):
            np.testing.assert_array_equal(band, 0.0)

    def test_block(self):
        q = dwt_haar(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert (q.ll.item(), q.lh.item(), q.hl.item(), q.hh.item()) == (5.0, -2.0, -1.0, 0.0)

    def test_energy(self, rng):
        x = rng.standard_normal((3, 8, 10)).astype(np.float32)
        q = dwt_haar(x)
        e_bands = sum(np.sum(b.astype(np.float64) ** 2) for b in (q.ll, q.lh, q.hl, q.hh))
        assert abs(e_bands - np.sum(x.astype(np.float64) ** 2)) < 1e-4

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            dwt_haar(np.zeros((1, 3, 4)))

    def test_inverse_of_constant(self):
        z = np.zeros((1, 2, 3))
        out = idwt_haar(WaveletQuad(np.full((1, 2, 3), 4.0), z, z, z))
        np.testing.assert_array_equal(out, np.full((1, 4, 6), 2.0))

    def test_zero_quad(self):
        z = np.zeros((2, 2, 2), np.float32)
        assert not idwt_haar(WaveletQuad(z, z, z, z)).any()

    def test_roundtrip(self, rng):
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        assert np.abs(idwt_haar(dwt_haar(x)) - x).max() < 1e-6

    def test_band_mismatch(self):
        with pytest.raises(ShapeError):
            WaveletQuad(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_perfect_reconstruction(self, c, hh, ww, seed):
        x = np.random.default_rng(seed).standard_normal((c, 2 * hh, 2 * ww)).astype(np.float32) * 10
        assert np.abs(idwt_haar(dwt_haar(x)) - x).max() < 1e-5 * max(1.0, np.abs(x).max())


class TestFuseLevel:
    def test_zero_injection_doubles(self, rng):
        s_prev = rng.standard_normal((3, 8, 6)).astype(np.float32)
        out = fuse_level(np.zeros((3, 4, 3)), s_prev, zero_init(lowpass_geometry(3)))
        np.testing.assert_allclose(out, 2 * s_prev, atol=1e-6)

    def test_shape(self, rng):
        out = fuse_level(rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 6, 10)), seeded_init(0, lowpass_geometry(2)))
        assert out.shape == (2, 6, 10)

    def test_compositional_oracle(self, rng):
        w = seeded_init(4, lowpass_geometry(3))
        s_n = rng.standard_normal((3, 4, 4)).astype(np.float32)
        s_prev = rng.standard_normal((3, 8, 8)).astype(np.float32)
        smoothed = apply_lowpass(s_n, predict_lowpass_filters(s_n, w))
        q = dwt_haar(s_prev)
        expected = idwt_haar(WaveletQuad(q.ll + smoothed, q.lh, q.hl, q.hh)) + s_prev
        np.testing.assert_allclose(fuse_level(s_n, s_prev, w), expected, atol=1e-5)

    def test_extent_relation(self, rng):
        with pytest.raises(ShapeError, match="must be"):
            fuse_level(np.zeros((2, 4, 4)), np.zeros((2, 8, 6)), zero_init(lowpass_geometry(2)))


class TestPyramid:
    def test_two_levels_is_fuse(self, rng):
        w = seeded_init(2, pyramid_geometry(2, 2))
        a, b = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 8, 8))
        pyr = build_pyramid([a, b], w)
        assert np.array_equal(pyr.levels[1], fuse_level(a, b, w, prefix="fspe.fuse0"))
        assert np.array_equal(pyr.levels[0], a.astype(np.float32))

    def test_shapes_preserved(self, rng):
        levels = [rng.standard_normal((4, s, s)) for s in (8, 16, 32)]
        pyr = build_pyramid(levels, seeded_init(0, pyramid_geometry(4, 3)))
        assert [x.shape for x in pyr.levels] == [(4, 8, 8), (4, 16, 16), (4, 32, 32)]
        assert pyr.factors == [16.0, 8.0, 4.0]

    def test_chaining_oracle(self, rng):
        w = seeded_init(8, pyramid_geometry(3, 3))
        l0, l1, l2 = (rng.standard_normal((3, 4 * 2**i, 6 * 2**i)) for i in range(3))
        step1 = fuse_level(l0, l1, w, prefix="fspe.fuse0")
        step2 = fuse_level(step1, l2, w, prefix="fspe.fuse1")
        np.testing.assert_allclose(build_pyramid([l0, l1, l2], w).levels[2], step2, atol=1e-5)

    def test_bad_geometry(self):
        with pytest.raises(ShapeError):
            build_pyramid([np.zeros((2, 4, 4)), np.zeros((2, 8, 10))], zero_init(pyramid_geometry(2, 2)))
        with pytest.raises(ShapeError):
            build_pyramid([np.zeros((2, 4, 4))], zero_init(pyramid_geometry(2, 2)))
