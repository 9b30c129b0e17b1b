import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from selfy import tensor as T


def test_zeros():
    assert T.zeros([2, 3]).size == 6
    assert T.zeros([1]).tolist() == [0.0]
    assert T.zeros([2, 2, 2]).sum() == 0.0


@pytest.mark.parametrize("shape", [[], [0], [2, -1]])
def test_zeros_rejects_bad_shapes(shape):
    with pytest.raises(T.ShapeError):
        T.zeros(shape)


def test_zeros_overflow():
    with pytest.raises(T.SizeError):
        T.zeros([2**21, 2**21])


def test_add():
    assert T.elementwise_add(np.array([1.0, 2.0]), np.array([3.0, 4.0])).tolist() == [4.0, 6.0]
    x = np.random.default_rng(0).standard_normal(5)
    assert np.array_equal(T.elementwise_add(x, np.zeros(5)), x)
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_allclose(T.elementwise_add(a, b), oracles.add(a, b), rtol=1e-12)
    with pytest.raises(T.ShapeError):
        T.elementwise_add(np.zeros(2), np.zeros(3))


def test_relu():
    assert T.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert not T.relu(-np.ones(4)).any()
    a = np.random.default_rng(11).standard_normal((3, 4))
    np.testing.assert_array_equal(T.relu(a), oracles.relu(a))


def test_mode_n_product():
    t = np.random.default_rng(3).standard_normal((2, 3, 4))
    w = np.random.default_rng(4).standard_normal((5, 4))
    out = T.mode_n_product(t, w, 2)
    assert out.shape == (2, 3, 5)
    np.testing.assert_allclose(out, oracles.mode_n(t, w, 2), rtol=1e-12)
    np.testing.assert_allclose(T.mode_n_product(t, np.ones((1, 3)), 1)[:, 0], t.sum(axis=1), rtol=1e-12)


@given(st.integers(0, 2), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_mode_n_identity_is_bitwise(axis, n, seed):
    shape = [3, 2, 4]
    shape[axis] = n
    t = np.random.default_rng(seed).standard_normal(shape)
    assert np.array_equal(T.mode_n_product(t, np.eye(n), axis), t)


def test_mode_n_errors():
    with pytest.raises(T.ShapeError):
        T.mode_n_product(np.zeros((2, 3)), np.zeros((2, 4)), 1)
    with pytest.raises(T.ShapeError):
        T.mode_n_product(np.zeros((2, 3)), np.zeros((2, 3)), 5)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_over_axis(np.zeros(4)), np.full(4, 0.25))
    assert T.softmax_over_axis(np.array([10.0, 0.0, 0.0]), temperature=0.01)[0] > 1 - 1e-6
    x = np.random.default_rng(9).standard_normal((3, 5))
    np.testing.assert_allclose(T.softmax_over_axis(x, 1, 1.0), oracles.softmax(x, 1, 1.0), rtol=1e-12)
    with pytest.raises(T.DomainError):
        T.softmax_over_axis(x, 0, 0.0)


@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=12),
    st.floats(1e-3, 100.0),
)
@settings(max_examples=100, deadline=None)
def test_softmax_is_a_distribution(values, tau):
    y = T.softmax_over_axis(np.array(values), temperature=tau)
    assert np.all((y >= 0) & (y <= 1))
    assert abs(y.sum() - 1) <= 1e-6


def test_conv3d_delta_is_identity():
    rng = np.random.default_rng(1)
    for shape in [(1, 3, 4, 5, 2), (2, 2, 6, 3, 3)]:
        x = rng.standard_normal(shape)
        c = shape[-1]
        k = np.zeros((3, 3, 3, c, c))
        k[1, 1, 1] = np.eye(c)
        np.testing.assert_array_equal(T.conv3d(x, k, 1, 1), x)


def test_conv3d_zero_kernel():
    x = np.random.default_rng(2).standard_normal((1, 2, 4, 4, 3))
    assert not T.conv3d(x, np.zeros((1, 3, 3, 3, 2)), 1, (0, 1, 1)).any()


def test_conv3d_example_against_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4, 4, 1))
    k = rng.standard_normal((1, 3, 3, 1, 1))
    out = T.conv3d(x[None], k, (1, 2, 2), (0, 1, 1))[0]
    assert out.shape == (1, 2, 2, 1)
    np.testing.assert_allclose(out, oracles.conv3d(x, k, (1, 2, 2), (0, 1, 1)), rtol=1e-12)


CONV_CASES = [
    ((3, 5, 4, 2), (3, 3, 2, 2, 3), (1, 1, 1), (1, 1, 0)),
    ((2, 7, 7, 3), (1, 3, 3, 3, 2), (1, 2, 2), (0, 1, 1)),
    ((4, 4, 4, 1), (2, 2, 2, 1, 2), (2, 1, 3), (1, 0, 1)),
    ((5, 9, 9, 4), (1, 3, 3, 4, 4), (1, 2, 2), (0, 1, 1)),
    ((1, 12, 12, 8), (1, 3, 3, 8, 12), (1, 1, 1), (0, 1, 1)),  # im2col path
]


@pytest.mark.parametrize("x_shape,k_shape,strides,padding", CONV_CASES)
def test_conv3d_matches_oracle(x_shape, k_shape, strides, padding):
    rng = np.random.default_rng(len(x_shape) + sum(x_shape))
    x = rng.standard_normal(x_shape)
    k = rng.standard_normal(k_shape)
    np.testing.assert_allclose(T.conv3d(x, k, strides, padding), oracles.conv3d(x, k, strides, padding), rtol=1e-12, atol=1e-12)


def test_conv3d_batched_and_both_paths_agree(monkeypatch):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 5, 6, 2))
    k = rng.standard_normal((1, 3, 3, 2, 3))
    dense = T.conv3d(x, k, 1, (0, 1, 1))
    monkeypatch.setattr(T, "DENSE_CONV_LIMIT", 0)
    cols = T.conv3d(x, k, 1, (0, 1, 1))
    np.testing.assert_allclose(dense, cols, rtol=1e-12, atol=1e-12)
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(dense[i, j], oracles.conv3d(x[i, j], k, (1, 1, 1), (0, 1, 1)), atol=1e-12)


def test_conv3d_errors():
    with pytest.raises(T.ShapeError):
        T.conv3d(np.zeros((1, 1, 2, 2, 1)), np.zeros((1, 3, 3, 1, 1)), 1, 0)
    with pytest.raises(T.ShapeError):
        T.conv3d(np.zeros((1, 1, 4, 4, 2)), np.zeros((1, 3, 3, 1, 1)), 1, 0)


def test_bilinear_examples():
    np.testing.assert_allclose(T.bilinear_resize_2d(np.full((4, 4), 2.5), 2, 2), np.full((2, 2), 2.5))
    x = np.random.default_rng(0).standard_normal((5, 6))
    np.testing.assert_allclose(T.bilinear_resize_2d(x, 5, 6), x, atol=1e-6)
    small = np.array([[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_allclose(T.bilinear_resize_2d(small, 4, 4), oracles.bilinear(small, 4, 4), rtol=1e-12)


@pytest.mark.parametrize("size", [(14, 14, 28, 28), (28, 28, 14, 14), (3, 5, 7, 2), (6, 4, 1, 1)])
def test_bilinear_matches_oracle(size):
    h, w, nh, nw = size
    x = np.random.default_rng(h * w).standard_normal((h, w, 2))
    np.testing.assert_allclose(T.bilinear_resize_2d(x, nh, nw, axes=(0, 1)), oracles.bilinear(x, nh, nw), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.floats(-5, 5))
@settings(max_examples=40, deadline=None)
def test_bilinear_preserves_constants(h, w, nh, nw, c):
    out = T.bilinear_resize_2d(np.full((h, w), c), nh, nw)
    np.testing.assert_allclose(out, c, atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(3,), (2, 3, 4), (1, 1, 2, 1, 3, 1)])
def test_vten_roundtrip(dtype, shape):
    x = np.random.default_rng(0).standard_normal(shape).astype(dtype)
    buf = io.BytesIO()
    n = T.write_vten(buf, x)
    raw = buf.getvalue()
    assert n == len(raw) == 7 + 8 * len(shape) + x.nbytes
    assert raw[:4] == b"VTEN" and raw[4] == 1 and raw[5] == (0 if dtype == np.float32 else 1) and raw[6] == len(shape)
    assert int.from_bytes(raw[7:15], "little") == shape[0]
    y = T.read_vten(io.BytesIO(raw))
    assert y.dtype == dtype and y.shape == shape
    assert y.tobytes() == x.tobytes()


def test_vten_rejects_garbage():
    with pytest.raises(ValueError):
        T.read_vten(io.BytesIO(b"NOPE\x01\x00\x01"))
    buf = io.BytesIO()
    T.write_vten(buf, np.zeros(4))
    with pytest.raises(ValueError):
        T.read_vten(io.BytesIO(buf.getvalue()[:-1]))
    with pytest.raises(TypeError):
        T.write_vten(io.BytesIO(), np.zeros(2, dtype=np.int32))
