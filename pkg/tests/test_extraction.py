import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from selfy import extraction as E
from selfy.stss import OffsetWindow, StssTensor
from selfy.tensor import ConfigError

WINDOWS = [OffsetWindow((-1, 0, 1), 1, 1), OffsetWindow((0, 2), 2, 1), OffsetWindow((1,), 2, 3)]


def _stss(window, lead, seed):
    rng = np.random.default_rng(seed)
    return StssTensor(rng.uniform(-1, 1, lead + window.extents), window)


def test_default_schedule_for_nine_by_nine():
    sched = E.default_conv_schedule(9, 9)
    assert [l.stride[1:] for l in sched] == [(1, 1), (2, 2), (2, 2), (1, 1)]
    assert [l.pad[1:] for l in sched] == [(1, 1), (1, 1), (1, 1), (0, 0)]
    assert [l.kernel for l in sched] == [(1, 3, 3)] * 4
    assert [l.cout for l in sched] == [16, 32, 64, 64]


@pytest.mark.parametrize("u,v", [(1, 1), (3, 3), (5, 9), (7, 7), (9, 9), (3, 13)])
def test_default_schedule_reaches_one(u, v):
    E.check_conv_schedule(E.default_conv_schedule(u, v), OffsetWindow((0,), u // 2, v // 2))


def test_bad_schedule_rejected():
    w = OffsetWindow((0,), 1, 1)
    with pytest.raises(ConfigError):
        E.check_conv_schedule((E.ConvLayer((1, 3, 3), (1, 1, 1), (0, 1, 1), 1, 4),), w)
    with pytest.raises(ConfigError):
        E.check_conv_schedule((E.ConvLayer((1, 3, 3), (1, 1, 1), (0, 0, 0), 2, 4),), w)
    with pytest.raises(ConfigError):
        E.SoftArgmaxHead(0.0)


@pytest.mark.parametrize("window", WINDOWS)
def test_soft_argmax_matches_oracle(window):
    s = _stss(window, (2, 3, 2), 1)
    got = E.soft_argmax(s, 0.3).values
    assert got.shape == (2, 3, 2, window.l_count, 2)
    np.testing.assert_allclose(got, oracles.soft_argmax(s.values, window.d_u, window.d_v, 0.3), atol=1e-12)


@pytest.mark.parametrize("window", WINDOWS)
def test_mlp_matches_oracle(window):
    s = _stss(window, (2, 2, 2), 2)
    rng = np.random.default_rng(3)
    ws = [rng.standard_normal((4, window.u_count * window.v_count)), rng.standard_normal((3, 4))]
    np.testing.assert_allclose(E.mlp_extract(s, ws).values, oracles.mlp(s.values, ws), atol=1e-12)


@pytest.mark.parametrize("window", WINDOWS)
def test_conv_extract_matches_oracle(window):
    s = _stss(window, (2, 2, 1), 4)
    sched = E.default_conv_schedule(window.u_count, window.v_count, (3, 2))
    rng = np.random.default_rng(5)
    ks = [rng.standard_normal(l.kernel + (l.cin, l.cout)) for l in sched]
    got = E.conv_extract(s, ks).values
    assert got.shape == (2, 2, 1, window.l_count, 2)
    ref = oracles.conv_extract(s.values, ks, [l.stride for l in sched], [l.pad for l in sched])
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_conv_extract_kernel_shape_checked():
    w = WINDOWS[0]
    with pytest.raises(ConfigError):
        E.conv_extract(_stss(w, (1,), 0), [np.zeros((1, 2, 2, 1, 3))])


@given(st.integers(0, 10**6), st.floats(1e-3, 10.0), st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=1000, deadline=None)
def test_soft_argmax_bounded(seed, tau, du, dv):
    w = OffsetWindow((0,), du, dv)
    s = StssTensor(np.random.default_rng(seed).uniform(-1, 1, (1, 1, 1) + w.extents), w)
    d = E.soft_argmax(s, tau).values
    assert np.all(np.abs(d[..., 0]) <= du) and np.all(np.abs(d[..., 1]) <= dv)


def test_soft_argmax_approaches_argmax():
    w = OffsetWindow((-1, 0, 1), 2, 2)
    rng = np.random.default_rng(6)
    checked = 0
    for _ in range(200):
        s = rng.uniform(-1, 1, w.extents)
        flat = np.sort(s.reshape(3, -1), axis=1)
        if np.any(flat[:, -1] - flat[:, -2] <= 1e-3):
            continue
        d = E.soft_argmax(StssTensor(s, w), 1e-6).values
        for l in range(3):
            u, v = np.unravel_index(np.argmax(s[l]), (5, 5))
            assert np.max(np.abs(d[l] - (u - 2, v - 2))) <= 1e-3
        checked += 1
    assert checked > 100


def test_soft_argmax_uniform_is_zero():
    w = OffsetWindow((0, 1), 3, 2)
    d = E.soft_argmax(StssTensor(np.full((2,) + w.extents, 0.7), w), 0.01).values
    assert np.array_equal(d, np.zeros_like(d))
