import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adveeg import tensorops as ops
from adveeg.errors import ConfigError, DimensionError, UsageError
from adveeg.tensorops import BatchNormStats, ParamTensor

SEEDS = range(5)


def param(value, name="w"):
    return ParamTensor(name, np.array(value, dtype=np.float64))


# ------------------------------------------------------------------------ conv


def test_same_padding_convention():
    assert ops.same_padding(90) == (44, 45)
    assert ops.same_padding(15) == (7, 7)
    assert ops.same_padding(1) == (0, 0)


def test_conv1d_preserves_time_extent_and_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 2, 11))
    k = rng.standard_normal((4, 3, 6))
    out, _ = ops.conv1d_forward(x, k)
    assert out.shape == (2, 4, 2, 11)
    left, _ = ops.same_padding(6)
    xp = np.pad(x, [(0, 0)] * 3 + [(left, 5 - left)])
    # direct cross-correlation oracle
    ref = np.zeros_like(out)
    for t in range(11):
        ref[..., t] = np.einsum("nchk,fck->nfh", xp[..., t:t + 6], k)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv1d_delta_kernel_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 1, 3, 9))
    k = np.zeros((1, 1, 5))
    k[0, 0, ops.same_padding(5)[0]] = 1.0
    out, _ = ops.conv1d_forward(x, k)
    np.testing.assert_allclose(out, x, atol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_gradients(seed):
    rng = np.random.default_rng(1000 + seed)  # independent of the checker's projection
    x = rng.standard_normal((2, 3, 2, 8))
    w = param(rng.standard_normal((2, 3, 4)))
    assert ops.grad_check(lambda v: ops.conv1d_forward(v, w), ops.conv1d_backward, x, [w], seed=seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_gradients(seed):
    rng = np.random.default_rng(1000 + seed)  # independent of the checker's projection
    x = rng.standard_normal((3, 2, 5, 7))
    w = param(rng.standard_normal((4, 5)))
    err = ops.grad_check(lambda v: ops.depthwise_spatial_forward(v, w), ops.depthwise_spatial_backward, x, [w],
                         seed=seed)
    assert err <= 1e-4


def test_depthwise_accepts_three_axis_kernels():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 4, 5))
    k = rng.standard_normal((2, 3, 4))
    a, _ = ops.depthwise_spatial_forward(x, k)
    b, _ = ops.depthwise_spatial_forward(x, k.reshape(6, 4))
    assert a.shape == (2, 6, 1, 5)
    np.testing.assert_array_equal(a, b)
    # map j reads input map j // D
    np.testing.assert_allclose(a[:, 4, 0], np.einsum("nct,c->nt", x[:, 1], k[1, 1]), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_and_dense_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 3, 1, 10))
    k = rng.standard_normal((2, 3, 5))
    conv = lambda v: ops.conv1d_forward(v, k)[0]  # noqa: E731
    np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-10)
    w = rng.standard_normal((30, 4))
    dense = lambda v: ops.dense_forward(v.reshape(2, -1), w)[0]  # noqa: E731
    np.testing.assert_allclose(dense(a * x + b * y), a * dense(x) + b * dense(y), atol=1e-10)


# ----------------------------------------------------------------- batch norm


def test_batchnorm_two_values_standardize_to_pm_one():
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    out, _ = ops.batchnorm_forward(x, param([1.0]), param([0.0]), BatchNormStats.fresh(1), train=True)
    np.testing.assert_allclose(out.ravel(), [-1, 1], atol=1e-4)


def test_batchnorm_idempotent_on_standardized_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 3, 1, 25))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _ = ops.batchnorm_forward(x, param(np.ones(3)), param(np.zeros(3)), BatchNormStats.fresh(3), True)
    assert np.abs(out - x).max() <= 1e-3
    out2, _ = ops.batchnorm_forward(x, param(2 * np.ones(3)), param(5 * np.ones(3)), BatchNormStats.fresh(3), True)
    np.testing.assert_allclose(out2, 2 * out + 5, atol=1e-12)


def test_batchnorm_train_output_has_beta_mean_and_gamma_scale():
    rng = np.random.default_rng(1)
    x = 3 + 2 * rng.standard_normal((20, 2, 1, 30))
    gamma, beta = param([1.5, 0.5]), param([-1.0, 2.0])
    out, _ = ops.batchnorm_forward(x, gamma, beta, BatchNormStats.fresh(2), True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta.value, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), np.abs(gamma.value), rtol=1e-5)


def test_batchnorm_running_stats_and_infer_mode():
    stats = BatchNormStats.fresh(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    ops.batchnorm_forward(x, param([1.0]), param([0.0]), stats, train=True)
    # momentum 0.9; unbiased variance of {1, 3} is 2
    np.testing.assert_allclose(stats.mean, [0.2])
    np.testing.assert_allclose(stats.var, [0.9 + 0.1 * 2.0])
    fresh = BatchNormStats.fresh(1)
    out, _ = ops.batchnorm_forward(x, param([1.0]), param([0.0]), fresh, train=False)
    np.testing.assert_allclose(out.ravel(), [1 / math.sqrt(1 + 1e-5), 3 / math.sqrt(1 + 1e-5)])
    np.testing.assert_array_equal(fresh.mean, [0.0])  # infer mode leaves stats alone


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(seed, train):
    rng = np.random.default_rng(1000 + seed)  # independent of the checker's projection
    x = rng.standard_normal((4, 3, 2, 5))
    gamma, beta = param(rng.uniform(0.5, 1.5, 3), "g"), param(rng.standard_normal(3), "b")
    stats = BatchNormStats(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    fwd = lambda v: ops.batchnorm_forward(v, gamma, beta, stats, train)  # noqa: E731
    assert ops.grad_check(fwd, ops.batchnorm_backward, x, [gamma, beta], seed=seed) <= 1e-4


# ------------------------------------------------------ pointwise / pooling / dense


def test_relu_forward_and_subgradient():
    x = np.array([-1.0, 0.0, 2.0])
    out, ctx = ops.relu_forward(x)
    np.testing.assert_array_equal(out, [0, 0, 2])
    np.testing.assert_array_equal(ops.relu_backward(ctx, np.ones(3)), [0, 0, 1])


def test_avgpool_hand_example():
    out, ctx = ops.avgpool_forward(np.array([3.0, 6, 9, 0, 0, 3]), 3)
    np.testing.assert_array_equal(out, [6, 1])
    np.testing.assert_allclose(ops.avgpool_backward(ctx, np.array([3.0, 6.0])), [1, 1, 1, 2, 2, 2])


def test_avgpool_rejects_non_dividing_width():
    with pytest.raises(ConfigError):
        ops.avgpool_forward(np.zeros(7), 3)


@pytest.mark.parametrize("seed", SEEDS)
def test_pool_relu_flatten_dense_gradients(seed):
    rng = np.random.default_rng(1000 + seed)  # independent of the checker's projection
    x = rng.standard_normal((3, 2, 1, 12))
    w = param(rng.standard_normal((2 * 4, 3)))

    def fwd(v):
        h, c1 = ops.relu_forward(v + 0.05)  # keep away from the kink
        h, c2 = ops.avgpool_forward(h, 3)
        h, c3 = ops.flatten_forward(h)
        h, c4 = ops.dense_forward(h, w)
        return h, (c1, c2, c3, c4)

    def bwd(ctxs, d):
        c1, c2, c3, c4 = ctxs
        d = ops.dense_backward(c4, d)
        d = ops.flatten_backward(c3, d)
        d = ops.avgpool_backward(c2, d)
        return ops.relu_backward(c1, d)

    assert ops.grad_check(fwd, bwd, x, [w], seed=seed) <= 1e-4


def test_dense_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    w = param(np.eye(4))
    out, ctx = ops.dense_forward(x, w)
    np.testing.assert_array_equal(out, x)
    d = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(ops.dense_backward(ctx, d), d)


def test_dense_shape_mismatch_names_axis():
    with pytest.raises(DimensionError) as err:
        ops.dense_forward(np.zeros((2, 3)), np.zeros((4, 1)))
    assert err.value.axis == 1


def test_dropout_zero_rate_and_infer_mode_are_identity():
    x = np.random.default_rng(0).standard_normal((4, 5))
    rng = np.random.default_rng(1)
    for train in (True, False):
        np.testing.assert_array_equal(ops.dropout_forward(x, 0.0, train, rng)[0], x)
    np.testing.assert_array_equal(ops.dropout_forward(x, 0.25, False, rng)[0], x)


def test_inverted_dropout_preserves_expectation():
    x = np.linspace(-1, 2, 12)
    rng = np.random.default_rng(0)
    acc = np.zeros_like(x)
    n = 20_000
    for _ in range(n):
        acc += ops.dropout_forward(x, 0.25, True, rng)[0]
    mean = acc / n
    assert np.all(np.abs(mean - x) <= 0.02 * np.abs(x) + 1e-2 * (x == 0))


def test_dropout_backward_uses_the_same_mask():
    x = np.ones((3, 8))
    out, ctx = ops.dropout_forward(x, 0.5, True, np.random.default_rng(3))
    np.testing.assert_array_equal(ops.dropout_backward(ctx, np.ones_like(x)), out)


def test_backward_context_is_single_use():
    out, ctx = ops.relu_forward(np.ones(3))
    ops.relu_backward(ctx, out)
    with pytest.raises(UsageError):
        ops.relu_backward(ctx, out)
    _, ctx = ops.relu_forward(np.ones(3))
    with pytest.raises(UsageError):
        ops.avgpool_backward(ctx, np.ones(3))


def test_param_grads_accumulate_until_zeroed():
    x = np.ones((2, 3))
    w = param(np.ones((3, 1)))
    for _ in range(2):
        _, ctx = ops.dense_forward(x, w)
        ops.dense_backward(ctx, np.ones((2, 1)))
    np.testing.assert_array_equal(w.grad, 4 * np.ones((3, 1)))
    w.zero_grad()
    assert not w.grad.any()


# ---------------------------------------------------------------------- losses


def test_softmax_xent_reference_values():
    assert ops.softmax_xent(np.zeros((4, 2)), [0, 1, 0, 1])[0] == pytest.approx(math.log(2), abs=1e-12)
    assert ops.softmax_xent(np.zeros((3, 3)), [0, 1, 2])[0] == pytest.approx(math.log(3), abs=1e-12)
    assert ops.softmax_xent(np.array([[2.0, 0.0]]), [0])[0] == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)


def test_softmax_xent_gradient_closed_form_and_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss, d = ops.softmax_xent(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(d, (p - np.eye(3)[labels]) / 5, atol=1e-14)
    h = 1e-6
    for i, j in [(0, 0), (1, 2), (4, 1)]:
        e = np.zeros_like(logits)
        e[i, j] = h
        num = (ops.softmax_xent(logits + e, labels)[0] - ops.softmax_xent(logits - e, labels)[0]) / (2 * h)
        assert num == pytest.approx(d[i, j], rel=1e-6)


def test_softmax_xent_is_stable_for_huge_logits():
    loss, d = ops.softmax_xent(np.array([[1000.0, -1000.0], [0.0, 800.0]]), [0, 1])
    assert loss == pytest.approx(0.0) and np.all(np.isfinite(d))


def test_softmax_xent_decreases_as_true_logit_grows():
    losses = [ops.softmax_xent(np.array([[z, 0.5, -0.2]]), [0])[0] for z in np.linspace(-3, 8, 40)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_softmax_xent_rejects_bad_labels():
    with pytest.raises(ValueError):
        ops.softmax_xent(np.zeros((2, 2)), [0, 2])


# ------------------------------------------------------------------------ adam


def test_adam_zero_gradient_is_a_noop():
    w = param(np.arange(4.0))
    for _ in range(7):
        ops.adam_step(w)
    np.testing.assert_array_equal(w.value, np.arange(4.0))
    assert w.adam_t == 7


def test_adam_first_step_moves_by_lr():
    w = param(np.array([1.0, -2.0, 0.5]))
    w.grad[...] = [3.0, -0.01, 1e3]
    before = w.value.copy()
    ops.adam_step(w, lr=1e-3)
    step = w.value - before
    # m_hat = g and v_hat = g^2 after bias correction: update = -lr * g / (|g| + eps)
    np.testing.assert_allclose(step, -1e-3 * w.grad / (np.abs(w.grad) + 1e-8), rtol=1e-12)
    np.testing.assert_array_equal(w.grad, [3.0, -0.01, 1e3])  # caller zeroes


def test_adam_constant_gradient_updates_do_not_grow():
    w = param(np.array([0.0]))
    w.grad[...] = 0.7
    prev = w.value.copy()
    ops.adam_step(w)
    first = abs(w.value - prev)[0]
    prev = w.value.copy()
    ops.adam_step(w)
    second = abs(w.value - prev)[0]
    assert second <= first * (1 + 1e-6)


def test_adam_matches_textbook_recursion():
    rng = np.random.default_rng(4)
    w = param(rng.standard_normal(3))
    ref = w.value.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        w.grad[...] = g
        ops.adam_step(w, lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
    np.testing.assert_allclose(w.value, ref, rtol=1e-12)


# -------------------------------------------------------------- grad checker


def test_grad_check_detects_a_wrong_gradient():
    x = np.random.default_rng(0).standard_normal((2, 3))
    w = param(np.random.default_rng(1).standard_normal((3, 2)))

    def bad_backward(ctx, d):
        return 2 * ops.dense_backward(ctx, d)

    assert ops.grad_check(lambda v: ops.dense_forward(v, w), bad_backward, x, [w]) > 0.1


# ---------------------------------------------- fused temporal conv + BN + depthwise


def _fused_inputs(seed, n=5, c=4, t=16, f=3, d=2, k=6):
    rng = np.random.default_rng(1000 + seed)  # independent of the checker's projection
    x = rng.standard_normal((n, c, t))
    tconv = param(rng.standard_normal((f, 1, k)), "tconv")
    gamma = param(rng.uniform(0.5, 1.5, f), "gamma")
    beta = param(rng.standard_normal(f), "beta")
    dw = param(rng.standard_normal((f * d, c)), "dw")
    return x, tconv, gamma, beta, dw


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("train", [True, False])
def test_fused_block_matches_layered_path(seed, train):
    x, tconv, gamma, beta, dw = _fused_inputs(seed)
    s1 = BatchNormStats(np.full(3, 0.1), np.full(3, 1.3))
    s2 = s1.copy()
    fused, fctx = ops.temporal_bn_depthwise_forward(x, tconv, gamma, beta, s1, dw, train)
    h, c1 = ops.conv1d_forward(x[:, None], tconv, need_input_grad=False)
    h, c2 = ops.batchnorm_forward(h, gamma, beta, s2, train)
    layered, c3 = ops.depthwise_spatial_forward(h, dw)
    np.testing.assert_allclose(fused, layered, atol=1e-10)
    np.testing.assert_allclose(s1.mean, s2.mean, atol=1e-12)
    np.testing.assert_allclose(s1.var, s2.var, atol=1e-12)

    dout = np.random.default_rng(seed + 100).standard_normal(fused.shape)
    ops.temporal_bn_depthwise_backward(fctx, dout)
    fused_grads = [p.grad.copy() for p in (tconv, gamma, beta, dw)]
    for p in (tconv, gamma, beta, dw):
        p.zero_grad()
    g = ops.depthwise_spatial_backward(c3, dout)
    g = ops.batchnorm_backward(c2, g)
    ops.conv1d_backward(c1, g)
    for fg, p in zip(fused_grads, (tconv, gamma, beta, dw)):
        np.testing.assert_allclose(fg, p.grad, atol=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_fused_block_gradients(seed):
    x, tconv, gamma, beta, dw = _fused_inputs(1000 + seed, n=3, c=3, t=9, f=2, d=2, k=4)
    stats = BatchNormStats.fresh(2)
    fwd = lambda v: ops.temporal_bn_depthwise_forward(v, tconv, gamma, beta, stats, dw, True)  # noqa: E731
    assert ops.grad_check(fwd, ops.temporal_bn_depthwise_backward, x, [tconv, gamma, beta, dw], seed=seed) <= 1e-4
