import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adtransfer import tensor as T
from adtransfer.optim import Adam

import oracles
from gradcases import CASES, check_case


@pytest.mark.parametrize("builder", CASES, ids=lambda c: c.__name__[5:])
@given(seed=st.integers(0, 2**32 - 1))
def test_finite_difference(builder, seed):
    name, err, tol = check_case(builder, np.random.default_rng(seed))
    assert err < tol, f"{name}: relative error {err:.2e}"


def test_sigmoid_values():
    out = T.sigmoid(T.Tensor([0.0, 1.0])).values
    assert out[0] == 0.5
    assert out[1] == pytest.approx(oracles.SIGMOID_ONE, abs=1e-15)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        out = T.sigmoid(T.Tensor([-800.0, 800.0])).values
    assert out[0] == 0.0 and out[1] == 1.0


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
def test_log_sigmoid_matches_reference(x):
    got = T.log_sigmoid(T.Tensor(x)).values
    ref = np.array([-np.logaddexp(0.0, -v) for v in x])
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-300)


def test_log_sigmoid_clamp_range_and_gradient():
    eps = 1e-7
    x = T.Tensor([-50.0, 0.0, 50.0], requires_grad=True)
    out = T.log_sigmoid(x, eps)
    assert out.values[0] == pytest.approx(np.log(eps))
    assert out.values[2] == pytest.approx(np.log1p(-eps))
    T.backward(out.sum())
    assert x.grad[0] == 0.0 and x.grad[2] == 0.0
    assert x.grad[1] == pytest.approx(0.5)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2),
       st.integers(3, 7), st.integers(0, 2**31))
def test_conv_matches_direct_loops(n, c, o, stride, pad, h, seed):
    rng = np.random.default_rng(seed)
    k = 3
    x, w = rng.normal(size=(n, c, h, h)), rng.normal(size=(o, c, k, k))
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride, pad).values
    assert np.allclose(got, oracles.conv2d(x, w, stride, pad), atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1), st.integers(0, 2**31))
def test_deconv_matches_scatter(c, o, stride, pad, seed):
    rng = np.random.default_rng(seed)
    op = stride - 1
    x, w = rng.normal(size=(2, c, 3, 4)), rng.normal(size=(c, o, 3, 3))
    got = T.deconv2d(T.Tensor(x), T.Tensor(w), stride, pad, op).values
    assert np.allclose(got, oracles.deconv2d(x, w, stride, pad, op), atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1), st.integers(0, 2**31))
def test_deconv_is_adjoint_of_conv(c, o, stride, pad, seed):
    # <conv(x), y> == <x, deconv(y)>; both ops read the same kernel array
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, 7, 7))
    w = rng.normal(size=(o, c, 3, 3))
    y_shape = T.conv2d(T.Tensor(x), T.Tensor(w), stride, pad).shape
    y = rng.normal(size=y_shape)
    ho = T.deconv_output_extent(y_shape[2], 3, stride, pad)
    op = 7 - ho
    assert 0 <= op < stride
    lhs = np.sum(T.conv2d(T.Tensor(x), T.Tensor(w), stride, pad).values * y)
    back = T.deconv2d(T.Tensor(y), T.Tensor(w), stride, pad, op).values
    assert lhs == pytest.approx(np.sum(x * back), rel=1e-10)


def test_conv_geometry_errors():
    with pytest.raises(T.DimensionError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 5, 5))), T.Tensor(np.zeros((4, 3, 3, 3))))
    with pytest.raises(T.DimensionError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(T.DimensionError):
        T.deconv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))), 2, 0, 2)


def test_matmul_shape_error():
    with pytest.raises(T.DimensionError):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_grl_forward_identity_backward_reversed():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = T.grl(x, 0.7)
    assert np.array_equal(y.values, x.values)
    T.backward((y * T.Tensor(np.full((2, 3), 2.0))).sum())
    assert np.array_equal(x.grad, np.full((2, 3), -1.4))


def test_grl_rejects_negative_coefficient():
    with pytest.raises(ValueError):
        T.grl(T.Tensor([1.0]), -1.0)


def test_gradients_accumulate_across_calls():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward((x * x).sum())
    T.backward((x * x).sum())
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_shared_subexpression_sums_both_paths():
    x = T.Tensor([3.0], requires_grad=True)
    y = x * x
    T.backward((y + y * x).sum())  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


def test_backward_needs_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2)


def test_non_finite_raises():
    with pytest.raises(T.NonFiniteError):
        T.log(T.Tensor([0.0]))


def test_leaky_relu_kink_takes_negative_branch():
    x = T.Tensor([0.0], requires_grad=True)
    T.backward(T.leaky_relu(x, 0.2).sum())
    assert x.grad[0] == pytest.approx(0.2)


def test_dropout_eval_is_identity_and_train_rescales():
    x = T.Tensor(np.ones((2000,)))
    assert T.dropout(x, 0.5, training=False) is x
    out = T.dropout(x, 0.5, True, np.random.default_rng(0)).values
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.1
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, True, None)


def test_batch_norm_running_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, (8, 2))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=True, momentum=1.0)
    assert np.allclose(rm, x.mean(0))
    assert np.allclose(rv, x.var(0, ddof=1))
    with pytest.raises(ValueError):
        T.batch_norm(T.Tensor(x[:1]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=True)


def test_adam_first_steps_match_hand_computation():
    p = T.Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert np.allclose(p.values, [0.9, -1.9], atol=1e-7)
    p.grad = np.array([0.5, -4.0])
    opt.step()
    assert np.allclose(p.values, [0.8, -1.8], atol=1e-7)


def test_adam_minimizes_quadratic():
    p = T.Tensor([5.0, -3.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        T.backward((p * p).sum())
        opt.step()
    assert np.all(np.abs(p.values) < 1e-2)


def test_adam_skips_params_without_grad():
    a = T.Tensor([1.0], requires_grad=True)
    b = T.Tensor([1.0], requires_grad=True)
    opt = Adam([a, b], lr=0.1)
    a.grad = np.array([1.0])
    opt.step()
    assert b.values[0] == 1.0 and a.values[0] != 1.0


def test_batch_norm_train_output_is_standardized():
    x = np.random.default_rng(5).normal(4.0, 3.0, (16, 3, 2, 2))
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                       training=True).values
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-4)


def test_batch_norm_constant_channel():
    x = np.full((4, 2), 3.0)
    out = T.batch_norm(T.Tensor(x), T.Tensor([2.0, 5.0]), T.Tensor([0.5, -1.0]), np.zeros(2), np.ones(2),
                       training=True).values
    assert np.allclose(out, [[0.5, -1.0]] * 4)


@given(st.integers(0, 2**31))
def test_batch_norm_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    args = (T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
    a = T.batch_norm(T.Tensor(x), *args, np.zeros(3), np.ones(3), training=True).values
    b = T.batch_norm(T.Tensor(x[perm]), *args, np.zeros(3), np.ones(3), training=True).values
    assert np.allclose(a[perm], b, atol=1e-12)
