import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from selfy import stss as S
from selfy.tensor import ShapeError

SHAPES = [
    ((3, 4, 5, 2), (-1, 0, 1), 1, 2),
    ((4, 3, 3, 3), (0, 2), 2, 1),
    ((2, 5, 4, 4), (-2, 1), 1, 1),
]


def test_window_basics():
    w = S.OffsetWindow.symmetric(2, 4)
    assert w.temporal_offsets == (-2, -1, 0, 1, 2)
    assert w.extents == (5, 9, 9)
    assert S.OffsetWindow((1,), 4, 4).extents == (1, 9, 9)
    assert "d_u = 4" in w.describe()
    for bad in [((), 1, 1), ((0, 0), 1, 1), ((0,), -1, 0)]:
        with pytest.raises(ValueError):
            S.OffsetWindow(*bad)


def test_cosine_sim_examples():
    assert S.cosine_sim([1.0, 0.0], [1.0, 0.0]) == 1.0
    assert S.cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert S.cosine_sim([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)
    assert S.cosine_sim([0.0, 0.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ShapeError):
        S.cosine_sim([1.0], [1.0, 2.0])


@pytest.mark.parametrize("method", ["direct", "gram"])
@pytest.mark.parametrize("shape,offs,du,dv", SHAPES)
def test_stss_matches_oracle(method, shape, offs, du, dv):
    v = np.random.default_rng(sum(shape)).standard_normal(shape)
    w = S.OffsetWindow(offs, du, dv)
    got = S.stss_transform(v, w, method=method).values
    assert got.shape == shape[:3] + w.extents
    np.testing.assert_allclose(got, oracles.stss(v, offs, du, dv), atol=1e-12)


def test_embedded_gaussian_matches_oracle():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((3, 3, 4, 3))
    wt, wp = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    w = S.OffsetWindow((-1, 1), 1, 1)
    got = S.stss_transform(v, w, S.EmbeddedGaussian(wt, wp)).values
    np.testing.assert_allclose(got, oracles.stss(v, w.temporal_offsets, 1, 1, oracles.embedded_gaussian(wt, wp)), atol=1e-12)


def test_batched_leading_axes():
    v = np.random.default_rng(0).standard_normal((2, 3, 4, 4, 5, 2))
    w = S.OffsetWindow.symmetric(1, 1)
    out = S.stss_transform(v, w).values
    assert out.shape == (2, 3, 4, 4, 5, 3, 3, 3)
    np.testing.assert_allclose(out[1, 2], S.stss_transform(v[1, 2], w).values, atol=1e-15)


@pytest.mark.parametrize("tile,threads", [((1, 1), 1), ((2, 3), 1), ((4, 4), 3), ((16, 16), 2)])
def test_tiled_is_bitwise_direct(tile, threads):
    v = np.random.default_rng(1).standard_normal((4, 7, 6, 5)).astype(np.float32)
    w = S.OffsetWindow.symmetric(2, 2, 3)
    ref = S.stss_transform(v, w).values
    got = S.stss_transform_tiled(v, w, tile=tile, threads=threads).values
    assert got.tobytes() == ref.tobytes()


def test_zero_offset_slice_is_spatial_self_similarity():
    v = np.random.default_rng(2).standard_normal((5, 6, 6, 3))
    w = S.OffsetWindow.symmetric(2, 2)
    s = S.stss_transform(v, w).values
    for t in range(5):
        ss = S.spatial_self_similarity(v[t], S.OffsetWindow((0,), 2, 2))
        assert np.array_equal(s[t, :, :, 2], ss)
        np.testing.assert_allclose(ss, oracles.spatial_ss(v[t], 2, 2), atol=1e-12)


def test_center_of_zero_slice_is_one():
    v = np.random.default_rng(4).standard_normal((3, 4, 4, 2)) + 3.0
    s = S.stss_transform(v, S.OffsetWindow((0,), 1, 1)).values
    np.testing.assert_allclose(s[..., 0, 1, 1], 1.0, atol=1e-12)


def test_cross_slice_symmetry():
    v = np.random.default_rng(5).standard_normal((5, 6, 5, 3))
    w = S.OffsetWindow.symmetric(2, 2, 1)
    s = S.stss_transform(v, w).values
    T, X, Y = v.shape[:3]
    for t in range(T):
        for x in range(X):
            for y in range(Y):
                for li, k in enumerate(w.temporal_offsets):
                    for u in range(-2, 3):
                        for vv in range(-1, 2):
                            tt, xx, yy = t + k, x + u, y + vv
                            if 0 <= tt < T and 0 <= xx < X and 0 <= yy < Y:
                                mirror = s[tt, xx, yy, w.temporal_offsets.index(-k), 2 - u, 1 - vv]
                                assert abs(s[t, x, y, li, u + 2, vv + 1] - mirror) <= 1e-6


def test_out_of_bounds_targets_are_zero():
    v = np.random.default_rng(6).standard_normal((3, 3, 3, 2)) + 2.0
    s = S.stss_transform(v, S.OffsetWindow((2,), 1, 1)).values
    assert not s[1:].any()  # t + 2 falls outside for t >= 1
    assert not s[0, 0, :, 0, 0].any()


@given(st.integers(0, 10_000), st.sampled_from(["direct", "gram"]))
@settings(max_examples=30, deadline=None)
def test_cosine_range(seed, method):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((3, 4, 4, 3)) * rng.uniform(1e-3, 1e3)
    s = S.stss_transform(v, S.OffsetWindow.symmetric(1, 2), method=method).values
    assert np.all(np.abs(s) <= 1 + 1e-6)


@given(st.integers(0, 10_000), st.integers(-2, 2), st.integers(-2, 2))
@settings(max_examples=30, deadline=None)
def test_translation_equivariance(seed, dx, dy):
    # circularly shifted content away from the border gives shifted similarities
    rng = np.random.default_rng(seed)
    v = np.zeros((3, 12, 12, 2))
    v[:, 4:8, 4:8] = rng.standard_normal((3, 4, 4, 2))
    w = S.OffsetWindow.symmetric(1, 1)
    s = S.stss_transform(v, w).values
    s2 = S.stss_transform(np.roll(v, (dx, dy), axis=(1, 2)), w).values
    np.testing.assert_allclose(np.roll(s, (dx, dy), axis=(1, 2)), s2, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_appearance_invariance(seed):
    # positive per-position rescaling leaves cosine similarities unchanged
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((3, 5, 5, 3))
    scale = rng.uniform(0.1, 10.0, size=(3, 5, 5, 1))
    w = S.OffsetWindow.symmetric(1, 2)
    np.testing.assert_allclose(S.stss_transform(v * scale, w).values, S.stss_transform(v, w).values, atol=1e-5)


def test_zero_vectors_give_zero_similarity():
    v = np.zeros((2, 3, 3, 2))
    v[0, 1, 1] = [1.0, 0.0]
    s = S.stss_transform(v, S.OffsetWindow.symmetric(1, 1)).values
    assert s[0, 1, 1, 1, 1, 1] == 1.0
    assert np.count_nonzero(s) == 1


def test_gram_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    q, k = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 2))
    w = S.OffsetWindow.symmetric(1, 1)
    gs = rng.standard_normal((2, 3, 3) + w.extents)
    gq, gk = S.local_correlation_gram_backward(gs, q, k, w)
    h = 1e-6
    for arr, grad, which in [(q, gq, 0), (k, gk, 1)]:
        for idx in [(0, 0, 0, 0), (1, 2, 1, 1), (0, 1, 2, 0)]:
            a, b = q.copy(), k.copy()
            (a if which == 0 else b)[idx] += h
            fp = (S.local_correlation_gram(a, b, w) * gs).sum()
            (a if which == 0 else b)[idx] -= 2 * h
            fm = (S.local_correlation_gram(a, b, w) * gs).sum()
            assert abs((fp - fm) / (2 * h) - grad[idx]) < 1e-6


def test_input_validation():
    with pytest.raises(ShapeError):
        S.stss_transform(np.zeros((3, 3, 2)), S.OffsetWindow((0,), 1, 1))
    with pytest.raises(ValueError):
        S.stss_transform(np.zeros((2, 3, 3, 2)), S.OffsetWindow((0,), 1, 1), method="fft")
    with pytest.raises(ValueError):
        S.spatial_self_similarity(np.zeros((3, 3, 2)), S.OffsetWindow((0, 1), 1, 1))


@pytest.mark.parametrize("X,threads", [(14, 4), (14, 1), (3, 8)])
def test_stripe_tiles_cover_the_map_once(X, threads):
    tile = S.stripe_tile(X, 9, threads)
    assert tile[1] == 9 and len(S._tiles(X, 9, tile)) == min(threads, X)
    v = np.random.default_rng(X).standard_normal((3, X, 9, 4)).astype(np.float32)
    w = S.OffsetWindow.symmetric(1, 2)
    got = S.local_correlation_tiled(v, v, w, tile, threads=threads)
    assert got.tobytes() == S.local_correlation_direct(v, v, w).tobytes()
