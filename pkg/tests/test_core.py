import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dessilbi.core import conv2d, conv2d_backward, make_rng, matmul, spectral_norm_sq
from dessilbi.errors import ArgumentError, DimensionError, NumericError


def loop_conv(x, k, stride, pad):
    """Nested-loop cross-correlation used as the reference."""
    c, h, w = x.shape
    co, ci, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for cc in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            s += xp[cc, i * stride + a, j * stride + b] * k[o, cc, a, b]
                out[o, i, j] = s
    return out


def test_matmul_examples():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(a, np.eye(3)), a)
    assert np.array_equal(matmul(a, np.zeros((3, 4))), np.zeros((2, 4)))
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]]), [[19, 22], [43, 50]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_overflow():
    with pytest.raises(NumericError):
        matmul([[1e308, 1e308]], [[10.0], [10.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    rng = make_rng(seed)
    a, b, c = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal((3, 6))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(left)


def test_conv_examples():
    rng = make_rng(0)
    x = rng.standard_normal((3, 5, 5))
    assert np.allclose(conv2d(x, np.ones((1, 3, 1, 1)))[0], x.sum(axis=0), rtol=0, atol=1e-14)
    assert not np.any(conv2d(x, np.zeros((2, 3, 3, 3))))
    assert np.array_equal(conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3))), np.full((1, 3, 3), 9.0))


def test_conv_identity_kernel_selects_channel_exactly():
    rng = make_rng(1)
    x = rng.standard_normal((4, 6, 7))
    k = np.zeros((2, 4, 1, 1))
    k[0, 2] = 1.0
    k[1, 0] = 1.0
    out = conv2d(x, k)
    assert np.array_equal(out[0], x[2]) and np.array_equal(out[1], x[0])


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2), (1, 1)])
def test_conv_matches_loops(stride, pad):
    rng = make_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 7, 6))
    k = rng.standard_normal((3, 2, 3, 2))
    assert np.allclose(conv2d(x, k, stride, pad), loop_conv(x, k, stride, pad), rtol=0, atol=1e-12)


def test_conv_batched_matches_single():
    rng = make_rng(2)
    x = rng.standard_normal((3, 2, 6, 6))
    k = rng.standard_normal((4, 2, 3, 3))
    out = conv2d(x, k, 1, 1)
    for i in range(3):
        assert np.allclose(out[i], conv2d(x[i], k, 1, 1), rtol=0, atol=1e-13)


def test_conv_errors():
    with pytest.raises(DimensionError):
        conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ArgumentError):
        conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), stride=0)
    with pytest.raises(DimensionError):
        conv2d(np.ones((2, 4, 4)), np.ones((1, 1, 3, 3)))


def test_conv_backward_is_adjoint():
    rng = make_rng(3)
    x = rng.standard_normal((2, 3, 7, 7))
    k = rng.standard_normal((4, 3, 3, 3))
    dout = rng.standard_normal(conv2d(x, k, 2, 1).shape)
    dx, dk = conv2d_backward(x, k, dout, 2, 1)
    # <dout, conv(x, k)> is linear in x and in k
    total = np.sum(dout * conv2d(x, k, 2, 1))
    assert np.isclose(np.sum(dx * x), total, rtol=1e-12)
    assert np.isclose(np.sum(dk * k), total, rtol=1e-12)


def test_spectral_examples():
    assert spectral_norm_sq(np.eye(3)) == pytest.approx(1.0, rel=1e-12)
    assert spectral_norm_sq(np.zeros((4, 2))) == 0.0
    assert spectral_norm_sq([[3.0, 0.0], [0.0, 4.0]]) == pytest.approx(16.0, rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 10**6))
def test_spectral_matches_eigh(n, d, seed):
    x = make_rng(seed).standard_normal((n, d))
    ref = np.linalg.eigvalsh(x.T @ x)[-1]
    assert abs(spectral_norm_sq(x) - ref) <= 1e-8 * ref


def test_spectral_nonconvergence_raises():
    # two equal-magnitude eigenvalues of opposite sign never settle
    x = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)
    assert spectral_norm_sq(x) == pytest.approx(1.0)
    with pytest.raises(NumericError):
        spectral_norm_sq(np.diag([1.0, 0.999999999]) @ np.array([[1, 1e-3], [0, 1.0]]), max_iter=2)


def test_rng_streams_bitwise_equal():
    a, b = make_rng(123), make_rng(123)
    assert np.array_equal(a.standard_normal(1000), b.standard_normal(1000))
    assert not np.array_equal(make_rng(1).standard_normal(10), make_rng(2).standard_normal(10))
    with pytest.raises(ArgumentError):
        make_rng(None)
