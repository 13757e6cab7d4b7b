import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradsuite
from srgan import nn_ops as F
from srgan.errors import DegenerateBatch, InvalidArgument, ShapeMismatch


def naive_conv(x, w, b, s):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    out[a, o, i, j] = np.sum(xp[a, :, i * s:i * s + k, j * s:j * s + k] * w[o]) + b[o]
    return out


# -- conv --------------------------------------------------------------------

def test_conv_spec_validation():
    assert F.ConvSpec(9, 3, 64).padding == 4
    with pytest.raises(InvalidArgument):
        F.ConvSpec(4, 1, 1)
    with pytest.raises(InvalidArgument):
        F.ConvSpec(3, 1, 1, 3)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(F.conv2d(x, w, np.zeros(3)), x)


def test_conv_all_ones_interior():
    x = np.full((1, 1, 5, 5), 0.7)
    out = F.conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out[0, 0, 2, 2] == pytest.approx(9 * 0.7)
    assert out[0, 0, 0, 0] == pytest.approx(4 * 0.7)  # zero padding at the corner


@pytest.mark.parametrize("k,s,cin,cout", [(3, 1, 2, 3), (3, 2, 2, 3), (5, 1, 4, 2), (9, 1, 3, 2), (1, 2, 3, 3)])
def test_conv_matches_nested_loops(k, s, cin, cout):
    rng = np.random.default_rng(k * 10 + s)
    x = rng.standard_normal((2, cin, 7, 6))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    np.testing.assert_allclose(F.conv2d(x, w, b, stride=s), naive_conv(x, w, b, s), atol=1e-12)


def test_conv_large_buffer_path_matches(monkeypatch):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4, 9, 8))
    w = rng.standard_normal((6, 4, 3, 3))
    b = rng.standard_normal(6)
    spec = F.ConvSpec(3, 4, 6, 2)
    g = rng.standard_normal(F.conv2d(x, w, b, spec).shape)
    ref = F.conv2d(x, w, b, spec), F.conv2d_backward(x, w, spec, g)
    monkeypatch.setattr(F, "_IM2COL_LIMIT", 0)
    np.testing.assert_allclose(F.conv2d(x, w, b, spec), ref[0], atol=1e-12)
    for a, r in zip(F.conv2d_backward(x, w, spec, g), ref[1]):
        np.testing.assert_allclose(a, r, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        F.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        F.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(1))


def test_conv_backward_bias_and_zero_grad():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    spec = F.ConvSpec(3, 3, 4)
    g = rng.standard_normal((2, 4, 5, 5))
    _, _, gb = F.conv2d_backward(x, w, spec, g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))
    for grad in F.conv2d_backward(x, w, spec, np.zeros_like(g)):
        assert not np.any(grad)


@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3, 5, 9]))
@settings(max_examples=30, deadline=None)
def test_stride_one_preserves_size(h, w, k):
    x = np.ones((1, 2, h, w))
    assert F.conv2d(x, np.ones((3, 2, k, k)), np.zeros(3)).shape == (1, 3, h, w)


# -- activations ----------------------------------------------------------------

def test_prelu_examples():
    assert F.prelu(np.array([[-2.0]]), np.array([0.25]))[0, 0] == -0.5
    x = np.abs(np.random.default_rng(0).standard_normal((2, 3, 2, 2)))
    np.testing.assert_array_equal(F.prelu(x, np.full(3, 0.25)), x)
    with pytest.raises(ShapeMismatch):
        F.prelu(np.zeros((1, 3, 2, 2)), np.zeros(2))


def test_leaky_relu_examples():
    assert F.leaky_relu(np.array(-1.0), 0.2) == pytest.approx(-0.2)
    assert F.leaky_relu(np.array(3.0), 0.2) == 3.0
    with pytest.raises(InvalidArgument):
        F.leaky_relu(np.zeros(1), 1.5)


def test_sigmoid_stable():
    assert F.sigmoid(np.array(0.0)) == 0.5
    assert F.sigmoid(np.array(40.0)) == pytest.approx(1.0, abs=1e-12)
    with np.errstate(over="raise", invalid="raise"):
        y = F.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(y)) and y[0] >= 0 and y[1] <= 1


# -- batch norm ------------------------------------------------------------------

def test_batch_norm_eval_identity_and_no_mutation():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    st_ = F.BatchNormState.create(3, dtype=np.float64, mode="eval")
    before = (st_.running_mean.copy(), st_.running_var.copy())
    y, _ = F.batch_norm(x, st_)
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), atol=1e-12)
    np.testing.assert_array_equal(st_.running_mean, before[0])
    np.testing.assert_array_equal(st_.running_var, before[1])


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    st_ = F.BatchNormState.create(3, dtype=np.float64)
    y, _ = F.batch_norm(x, st_)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)
    # running statistics moved 10% of the way, variance unbiased
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batch_norm_update_running_off():
    st_ = F.BatchNormState.create(2, dtype=np.float64)
    F.batch_norm(np.random.default_rng(0).standard_normal((2, 2, 3, 3)), st_, update_running=False)
    np.testing.assert_array_equal(st_.running_mean, 0)
    np.testing.assert_array_equal(st_.running_var, 1)


def test_batch_norm_degenerate():
    with pytest.raises(DegenerateBatch):
        F.batch_norm(np.zeros((1, 2, 1, 1)), F.BatchNormState.create(2))


def test_batch_norm_backward_2x3x4x4():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 4))
    st_ = F.BatchNormState.create(3, dtype=np.float64)
    st_.gamma.data[...] = [0.5, 1.0, 2.0]
    r = rng.standard_normal(x.shape)
    _, cache = F.batch_norm(x, st_, update_running=False)
    gx, gg, gb = F.batch_norm_backward(cache, st_, r)
    rep = F.finite_difference_check(lambda: np.sum(F.batch_norm(x, st_, False)[0] * r),
                                    {"x": x, "g": st_.gamma.data}, {"x": gx, "g": gg})
    assert rep.passed, rep.max_rel_error


# -- reshaping / dense / add / pool ----------------------------------------------

def test_pixel_shuffle_index_formula():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(F.pixel_shuffle(x, 2)[0, 0], [[1, 2], [3, 4]])
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2 * 9, 3, 4))
    y = F.pixel_shuffle(x, 3)
    for c, dy, dx, h, w in [(1, 2, 0, 1, 3), (0, 1, 2, 2, 0)]:
        assert y[1, c, 3 * h + dy, 3 * w + dx] == x[1, c * 9 + dy * 3 + dx, h, w]
    with pytest.raises(ShapeMismatch):
        F.pixel_shuffle(np.zeros((1, 6, 2, 2)), 2)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(2, 3))
@settings(max_examples=30, deadline=None)
def test_pixel_shuffle_bijection(n, c, h, w, u):
    x = np.arange(n * c * u * u * h * w, dtype=float).reshape(n, c * u * u, h, w)
    y = F.pixel_shuffle(x, u)
    np.testing.assert_array_equal(F.pixel_shuffle_backward(y, u), x)
    np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.ravel()))


def test_dense_examples():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(F.dense(x, np.eye(2), np.zeros(2)), x)
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(F.dense(x, w, np.array([0.5, -0.5])), [[7.5, 9.5]])
    with pytest.raises(ShapeMismatch):
        F.dense(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))


def test_elementwise_add():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
    np.testing.assert_array_equal(F.elementwise_add(x, np.zeros_like(x)), x)
    np.testing.assert_array_equal(F.elementwise_add(x, y), F.elementwise_add(y, x))
    g = rng.standard_normal(x.shape)
    gx, gy = F.elementwise_add_backward(g)
    assert gx is g and gy is g
    with pytest.raises(ShapeMismatch):
        F.elementwise_add(x, y[:, :2])


def test_max_pool():
    x = np.array([[1.0, 5.0, 2.0], [3.0, 4.0, 0.0], [9.0, 9.0, 9.0]]).reshape(1, 1, 3, 3)
    assert F.max_pool2d(x).ravel().tolist() == [5.0]
    g = F.max_pool2d_backward(x, np.array([[[[2.0]]]]))
    assert g[0, 0, 0, 1] == 2.0 and g.sum() == 2.0


# -- gradient oracle ---------------------------------------------------------------

def test_oracle_catches_corrupted_backward():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    b = np.zeros(2)
    spec = F.ConvSpec(3, 2, 2)
    r = rng.standard_normal((1, 2, 4, 4))
    gx, gw, _ = F.conv2d_backward(x, w, spec, r)
    rep = F.finite_difference_check(lambda: np.sum(F.conv2d(x, w, b, spec) * r),
                                    {"x": x, "w": w}, {"x": gx, "w": gw * 1.01})
    assert not rep.passed
    assert rep.max_rel_error["x"] < 1e-6 and rep.max_rel_error["w"] > 1e-3


def test_oracle_constant_function_exact():
    x = np.random.default_rng(0).standard_normal((2, 3))
    rep = F.finite_difference_check(lambda: 4.0, {"x": x}, {"x": np.zeros_like(x)})
    assert rep.max_rel_error["x"] == 0.0


def test_oracle_requires_float64():
    with pytest.raises(InvalidArgument):
        F.finite_difference_check(lambda: 0.0, {"x": np.zeros(2, np.float32)}, {"x": np.zeros(2)})


@pytest.mark.parametrize("name", sorted(gradsuite.OP_CHECKS))
def test_op_gradients_randomized(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        rep = gradsuite.OP_CHECKS[name](rng)
        assert rep.passed, (name, rep.max_rel_error)


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_ops_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 5, 5)) * 100
    st_ = F.BatchNormState.create(4, dtype=np.float64)
    outs = [F.conv2d(x, rng.standard_normal((3, 4, 3, 3)), np.zeros(3), stride=2),
            F.prelu(x, np.full(4, 0.25)), F.leaky_relu(x), F.sigmoid(x),
            F.batch_norm(x, st_)[0], F.pixel_shuffle(x, 2), F.max_pool2d(x)]
    assert all(np.all(np.isfinite(o)) for o in outs)
