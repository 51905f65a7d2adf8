import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deform3d import checks
from deform3d import tensor as T
from deform3d.errors import DimensionError

SEEDS = range(5)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv3d(x, w, b, stride, pad):
    ci, d, h, ww = x.shape
    co, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (ww + 2 * pw - kw) // sw + 1
    out = np.zeros((co, od, oh, ow))
    for o, z, y, xx in itertools.product(range(co), range(od), range(oh), range(ow)):
        acc = b[o]
        for c, a, bb, cc in itertools.product(range(ci), range(kd), range(kh), range(kw)):
            zi, yi, xi = z * sd + a - pd, y * sh + bb - ph, xx * sw + cc - pw
            if 0 <= zi < d and 0 <= yi < h and 0 <= xi < ww:
                acc += w[o, c, a, bb, cc] * x[c, zi, yi, xi]
        out[o, z, y, xx] = acc
    return out


# -- matmul ---------------------------------------------------------------------


def test_matmul_identity(rng):
    m = rng.normal(size=(3, 4))
    assert np.array_equal(T.matmul(np.eye(3), m), m)


def test_matmul_hand_case():
    out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out, [[3.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.abs(T.matmul(a, b) - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- softmax ----------------------------------------------------------------------


def test_softmax_equal_logits():
    assert np.allclose(T.softmax(np.zeros(4)), 0.25, rtol=0, atol=1e-16)


def test_softmax_large_logits_do_not_overflow():
    y = T.softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(y).all()
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-300


def test_softmax_matches_high_precision(rng):
    x = rng.normal(size=12) * 3
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(float(v))) for v in x]
        z = mpmath.fsum(e)
        ref = np.array([float(v / z) for v in e])
    assert np.abs(T.softmax(x) - ref).max() < 1e-14


def test_softmax_empty():
    with pytest.raises(DimensionError):
        T.softmax(np.array([]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-700, 700)))
def test_softmax_sums_to_one(x):
    y = T.softmax(x)
    assert abs(y.sum() - 1.0) < 1e-12
    assert ((y >= 0) & (y <= 1)).all()


# -- layer norm ---------------------------------------------------------------------


def test_layer_norm_constant_vector_collapses_to_bias():
    y, _ = T.layer_norm(np.full(6, 3.5), np.ones(6), np.zeros(6))
    assert np.array_equal(y, np.zeros(6))


def test_layer_norm_already_normalized():
    y, _ = T.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-300)
    assert np.allclose(y, [1.0, -1.0], rtol=0, atol=1e-15)


def test_layer_norm_statistics(rng):
    x = rng.normal(3, 5, size=384)
    y, _ = T.layer_norm(x, np.ones(384), np.zeros(384))
    assert abs(y.mean()) < 1e-12
    assert abs(y.var() - 1) < 1e-6


def test_layer_norm_length_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(np.ones(4), np.ones(3), np.zeros(4))


# -- conv3d ---------------------------------------------------------------------------


def test_conv3d_identity_kernel(rng):
    x = rng.normal(size=(3, 2, 3, 4))
    w = np.eye(3).reshape(3, 3, 1, 1, 1)
    assert np.array_equal(T.conv3d(x, w), x)


def test_conv3d_counts_ones():
    out = T.conv3d(np.ones((1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
    assert out.shape == (1, 1, 1, 1) and out.item() == 27


@pytest.mark.parametrize("stride,pad", [((1, 1, 1), (0, 0, 0)), ((1, 2, 2), (1, 1, 1)), ((2, 2, 2), (1, 0, 1))])
def test_conv3d_matches_naive(rng, stride, pad):
    x, w, b = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    assert np.abs(T.conv3d(x, w, b, stride, pad) - naive_conv3d(x, w, b, stride, pad)).max() < 1e-10


def test_conv3d_output_dims(rng):
    x = rng.normal(size=(1, 16, 48, 48))
    assert T.conv3d(x, np.ones((2, 1, 3, 3, 3)), None, (1, 2, 2), 1).shape == (2, 16, 24, 24)


def test_conv3d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv3d(np.ones((1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)))


# -- instance norm -----------------------------------------------------------------------


def test_instance_norm_constant_channel():
    y, _ = T.instance_norm(np.full((2, 2, 2, 2), 4.0), np.ones(2), np.array([0.5, -2.0]))
    assert np.array_equal(y[0], np.full((2, 2, 2), 0.5))
    assert np.array_equal(y[1], np.full((2, 2, 2), -2.0))


def test_instance_norm_symmetric_channel():
    x = np.array([-3.0, 3.0, -3.0, 3.0]).reshape(1, 1, 2, 2)
    y, _ = T.instance_norm(x, np.ones(1), np.zeros(1), eps=1e-300)
    assert np.allclose(y.ravel(), [-1, 1, -1, 1], rtol=0, atol=1e-15)


def test_instance_norm_statistics(rng):
    x = rng.normal(-2, 4, size=(3, 4, 5, 6))
    y, _ = T.instance_norm(x, np.ones(3), np.zeros(3))
    for c in range(3):
        assert abs(y[c].mean()) < 1e-12
        assert abs(y[c].var() - 1) < 1e-6


# -- transposed conv ------------------------------------------------------------------------


def test_transposed_conv_identity(rng):
    x = rng.normal(size=(2, 3, 3, 3))
    w = np.eye(2).reshape(2, 2, 1, 1, 1)
    assert np.array_equal(T.transposed_conv3d(x, w, None, 1), x)


def test_transposed_conv_block():
    out = T.transposed_conv3d(np.full((1, 1, 1, 1), 2.5), np.ones((1, 1, 2, 2, 2)), None, 2)
    assert np.array_equal(out, np.full((1, 2, 2, 2), 2.5))


@pytest.mark.parametrize("stride", [(2, 2, 2), (1, 2, 2), (1, 1, 1)])
def test_transposed_conv_is_adjoint_of_conv(rng, stride):
    w = rng.normal(size=(3, 2) + stride)
    x = rng.normal(size=(2, 4, 4, 6))
    y = rng.normal(size=(3, 4 // stride[0], 4 // stride[1], 6 // stride[2]))
    lhs = (T.conv3d(x, w, None, stride, 0) * y).sum()
    rhs = (x * T.transposed_conv3d(y, w, None, stride)).sum()
    assert abs(lhs - rhs) < 1e-10


def test_transposed_conv_kernel_must_equal_stride():
    with pytest.raises(DimensionError):
        T.transposed_conv3d(np.ones((1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)), None, 2)


# -- gradients, determinism, bookkeeping -------------------------------------------------


@pytest.mark.parametrize("name", sorted(checks.PRIMITIVES))
@pytest.mark.parametrize("seed", SEEDS)
def test_primitive_gradients(name, seed):
    report = checks.PRIMITIVES[name](seed)
    assert report.passed, report.table()


def test_ops_are_deterministic(rng):
    x, w = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3))
    assert np.array_equal(T.conv3d(x, w, None, 2, 1), T.conv3d(x.copy(), w.copy(), None, 2, 1))
    dy = rng.normal(size=(3, 2, 3, 3))
    a = T.conv3d_backward(x, w, dy, 2, 1)
    b = T.conv3d_backward(x, w, dy, 2, 1)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_single_precision_is_preserved(rng):
    x = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32)
    assert T.conv3d(x, w, None, 1, 1).dtype == np.float32
    y, _ = T.instance_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32))
    assert y.dtype == np.float32


def test_dual_value_accumulates():
    d = T.DualValue(np.ones((2, 2)))
    assert np.array_equal(d.grad, np.zeros((2, 2)))
    d.accumulate(np.full((2, 2), 0.5))
    d.accumulate(np.full((2, 2), 0.25))
    assert np.array_equal(d.grad, np.full((2, 2), 0.75))
    d.zero_grad()
    assert not d.grad.any()
    with pytest.raises(DimensionError):
        d.accumulate(np.ones(3))
