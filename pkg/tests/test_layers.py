import math

import mpmath
import numpy as np
import pytest

from fusenet.layers import (BatchNorm, Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool2D, ReLU, batchnorm_forward,
                            conv2d_forward, dropout_forward, fc_forward, maxpool_forward, relu, softmax_cross_entropy)
from fusenet.tensor import ConfigurationError, DimensionError

from _helpers import layer_grad_error

SEEDS = range(20)


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    s = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y, xx = i + di - ph, j + dj - pw
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[ni, ci, y, xx] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = s
    return out


def naive_pool(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for a in range(n):
        for b in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    best = -np.inf
                    for di in range(k):
                        for dj in range(k):
                            best = max(best, x[a, b, i * k + di, j * k + dj])
                    out[a, b, i, j] = best
    return out


# convolution -----------------------------------------------------------------

def test_conv_ones_same_padding():
    layer = Conv2D(1, 1, 3)
    layer.weight.value[...] = 1.0
    out = conv2d_forward(np.ones((1, 1, 3, 3)), layer)
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == out[0, 0, 0, 2] == out[0, 0, 2, 0] == out[0, 0, 2, 2] == 4.0
    assert out[0, 0, 0, 1] == 6.0


def test_conv_delta_kernel_is_identity(rng):
    layer = Conv2D(1, 1, 3)
    layer.weight.value[...] = 0.0
    layer.weight.value[0, 0, 1, 1] = 1.0
    x = rng.standard_normal((2, 1, 5, 6))
    np.testing.assert_array_equal(conv2d_forward(x, layer), x)


def test_conv_matches_naive_loops(rng):
    layer = Conv2D(3, 4, 3, rng=rng)
    layer.bias.value[...] = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 8, 8))
    ref = naive_conv(x, layer.weight.value, layer.bias.value)
    assert np.max(np.abs(conv2d_forward(x, layer) - ref)) < 1e-10


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        Conv2D(3, 2).forward(np.ones((1, 2, 4, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = rng.integers(1, 4), rng.integers(1, 4)
    layer = Conv2D(int(c_in), int(c_out), 3, rng=rng)
    layer.bias.value[...] = rng.standard_normal(int(c_out))
    x = rng.standard_normal((2, int(c_in), int(rng.integers(3, 6)), int(rng.integers(3, 6))))
    assert layer_grad_error(layer, x, seed=seed) < 1e-4


# max pooling -----------------------------------------------------------------

def test_maxpool_small():
    out, idx = maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    assert out.tolist() == [[[[4.0]]]]
    assert idx.item() == 3


def test_maxpool_ties_route_to_first_element():
    pool = MaxPool2D(2)
    out = pool.forward(np.full((1, 1, 4, 4), 7.0))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 7.0))
    grad = pool.backward(np.ones((1, 1, 2, 2)))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1.0
    np.testing.assert_array_equal(grad[0, 0], expected)


def test_maxpool_matches_window_scan(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out, _ = maxpool_forward(x, 2)
    np.testing.assert_array_equal(out, naive_pool(x, 2))


def test_maxpool_non_divisible():
    with pytest.raises(DimensionError):
        MaxPool2D(2).forward(np.ones((1, 1, 5, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 3)) + 1
    x = rng.standard_normal((2, 2, 2 * k, 3 * k))
    assert layer_grad_error(MaxPool2D(k), x, seed=seed) < 1e-4


# fully connected -------------------------------------------------------------

def test_fc_identity():
    layer = Dense(6, 6)
    layer.weight.value[...] = np.eye(6)
    x = np.arange(12.0).reshape(2, 1, 2, 3)
    np.testing.assert_array_equal(fc_forward(x, layer), x.reshape(2, 6))


def test_fc_hand_value():
    layer = Dense(2, 1)
    layer.weight.value[...] = [[1.0], [1.0]]
    layer.bias.value[...] = [1.0]
    assert fc_forward(np.array([[1.0, 2.0]]), layer).tolist() == [[4.0]]


def test_fc_matches_matmul_oracle(rng):
    layer = Dense(12, 5, rng=rng)
    layer.bias.value[...] = rng.standard_normal(5)
    x = rng.standard_normal((4, 3, 2, 2))
    flat = x.reshape(4, 12)
    ref = np.array([[sum(flat[i, k] * layer.weight.value[k, j] for k in range(12)) + layer.bias.value[j]
                     for j in range(5)] for i in range(4)])
    assert np.max(np.abs(fc_forward(x, layer) - ref)) < 1e-12


def test_fc_extent_mismatch():
    with pytest.raises(DimensionError):
        Dense(5, 2).forward(np.ones((1, 6)))


@pytest.mark.parametrize("seed", SEEDS)
def test_fc_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Dense(12, int(rng.integers(1, 5)), rng=rng)
    layer.bias.value[...] = rng.standard_normal(layer.out_features)
    assert layer_grad_error(layer, rng.standard_normal((3, 3, 2, 2)), seed=seed) < 1e-4


# batch norm ------------------------------------------------------------------

def test_batchnorm_standardized_input_passes_through(rng):
    x = rng.standard_normal((8, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + 1e-5)
    bn = BatchNorm(3)
    assert np.max(np.abs(batchnorm_forward(x, bn, training=True) - x)) < 1e-6


@pytest.mark.parametrize("shape", [(5, 3, 4, 4), (7, 4)])
def test_batchnorm_normalizes_per_channel(rng, shape):
    bn = BatchNorm(shape[1])
    x = 3.0 + 5.0 * rng.standard_normal(shape)
    out = bn.forward(x, training=True)
    axes = (0, 2, 3) if len(shape) == 4 else (0,)
    var_x = x.var(axis=axes)
    assert np.all(np.abs(out.mean(axis=axes)) < 1e-8)
    # epsilon inside the square root shrinks the variance by var / (var + eps)
    np.testing.assert_allclose(out.var(axis=axes), var_x / (var_x + 1e-5), atol=1e-12)
    assert np.all(np.abs(out.var(axis=axes) - 1.0) < 1e-6)


def test_batchnorm_moving_average_unrolled():
    bn = BatchNorm(1, decay=0.9)
    bn.moving_mean[...] = 0.0
    x = np.array([[0.0], [2.0]])  # batch mean 1
    bn.forward(x, training=True)
    bn.forward(x, training=True)
    # 0.9 * (0.9 * 0 + 0.1 * 1) + 0.1 * 1
    assert abs(bn.moving_mean[0] - 0.19) < 1e-15


def test_batchnorm_inference_uses_moving_stats(rng):
    bn = BatchNorm(2)
    bn.moving_mean[...] = [1.0, -1.0]
    bn.moving_var[...] = [4.0, 9.0]
    x = rng.standard_normal((3, 2, 2, 2))
    out = bn.forward(x, training=False)
    ref = (x - bn.moving_mean[None, :, None, None]) / np.sqrt(bn.moving_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)
    before = bn.moving_mean.copy()
    bn.forward(x, training=False)
    np.testing.assert_array_equal(bn.moving_mean, before)


def test_batchnorm_single_sample_training_is_an_error():
    with pytest.raises(ConfigurationError):
        BatchNorm(2).forward(np.ones((1, 2, 3, 3)), training=True)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3)
    bn.gamma.value[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta.value[...] = rng.standard_normal(3)
    bn.moving_var[...] = rng.uniform(0.5, 2.0, 3)
    shape = (4, 3, 3, 3) if seed % 2 else (6, 3)
    # training-mode forward mutates the moving stats; gradients do not depend on them
    assert layer_grad_error(bn, rng.standard_normal(shape), training=training, seed=seed) < 1e-4


# softmax cross-entropy ---------------------------------------------------------

def test_softmax_ce_uniform():
    loss, probs = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert abs(loss - math.log(4)) < 1e-15
    assert abs(loss - 1.3862944) < 1e-7
    np.testing.assert_allclose(probs, 0.25)


def test_softmax_ce_is_stable_for_huge_logits():
    loss, probs = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(loss) and loss < 1e-300 + 1e-12
    assert np.all(np.isfinite(probs))


def test_softmax_ce_matches_high_precision_formula(rng):
    logits = rng.standard_normal((3, 5)) * 3
    labels = np.array([4, 0, 2])
    loss, probs = softmax_cross_entropy(logits, labels)
    mpmath.mp.dps = 50
    ref = mpmath.fsum(mpmath.log(mpmath.fsum(mpmath.e ** mpmath.mpf(v) for v in row)) - mpmath.mpf(row[y])
                      for row, y in zip(logits.tolist(), labels)) / 3
    assert abs(loss - float(ref)) < 1e-10
    for row, p in zip(logits.tolist(), probs):
        z = mpmath.fsum(mpmath.e ** mpmath.mpf(v) for v in row)
        assert max(abs(float(mpmath.e ** mpmath.mpf(v) / z) - pv) for v, pv in zip(row, p)) < 1e-12


def test_softmax_rows_sum_to_one(rng):
    for scale in (1e-3, 1.0, 50.0, 700.0):
        _, probs = softmax_cross_entropy(rng.standard_normal((6, 9)) * scale, np.zeros(6, dtype=int))
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9


def test_softmax_ce_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_ce_gradient(seed):
    from fusenet.layers import softmax_cross_entropy_backward
    from fusenet.tensor import Parameter, grad_check

    rng = np.random.default_rng(seed)
    z = Parameter("logits", rng.standard_normal((4, 5)))
    y = rng.integers(0, 5, 4)

    def analytic():
        _, p = softmax_cross_entropy(z.value, y)
        z.grad[...] = softmax_cross_entropy_backward(p, y)

    assert grad_check(lambda: softmax_cross_entropy(z.value, y)[0], [z], 1e-6, analytic) < 1e-4


# relu / dropout / gap ---------------------------------------------------------

def test_relu_values():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert ReLU().forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    assert layer_grad_error(ReLU(), x, seed=seed) < 1e-4


def test_dropout_keep_one_is_identity(rng):
    x = rng.standard_normal((4, 5))
    out, mask = dropout_forward(x, Dropout(1.0), training=True)
    np.testing.assert_array_equal(out, x)
    assert mask.all()


def test_dropout_inference_is_identity(rng):
    x = rng.standard_normal((4, 5))
    out, mask = dropout_forward(x, Dropout(0.5), training=False)
    np.testing.assert_array_equal(out, x)


def test_dropout_monte_carlo():
    x = np.full((1, 100_000), 2.0)
    out, mask = dropout_forward(x, Dropout(0.5, seed=11), training=True)
    assert abs(mask.mean() - 0.5) < 0.01
    assert abs(out.mean() - 2.0) / 2.0 < 0.02
    assert set(np.unique(out)) <= {0.0, 4.0}


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Dropout(0.6, seed=seed)
    layer.fixed_mask = rng.random((3, 8)) < 0.6
    assert layer_grad_error(layer, rng.standard_normal((3, 8)), seed=seed) < 1e-4


def test_dropout_rejects_bad_keep_prob():
    with pytest.raises(ConfigurationError):
        Dropout(0.0)


def test_global_average_pool_constant_map():
    out = GlobalAvgPool().forward(np.full((2, 5, 3, 4), 0.25))
    np.testing.assert_array_equal(out, np.full((2, 5), 0.25))


@pytest.mark.parametrize("seed", SEEDS)
def test_global_average_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    assert layer_grad_error(GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), seed=seed) < 1e-4


def test_inference_is_a_pure_function(rng):
    bn, do = BatchNorm(3), Dropout(0.5)
    x = rng.standard_normal((4, 3, 2, 2))
    a = do.forward(bn.forward(x, False), False)
    b = do.forward(bn.forward(x, False), False)
    np.testing.assert_array_equal(a, b)


def test_same_padding_and_pool_shapes():
    conv, bn, pool = Conv2D(3, 8), BatchNorm(8), MaxPool2D(2)
    assert conv.output_shape((3, 224, 224)) == (8, 224, 224)
    assert bn.output_shape((8, 224, 224)) == (8, 224, 224)
    assert pool.output_shape((8, 224, 224)) == (8, 112, 112)
