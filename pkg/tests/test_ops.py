import math

import numpy as np
import pytest

import oracles
from cnnav.engine import (
    ShapeError,
    Tape,
    Tensor,
    activation,
    add,
    backward,
    batchnorm2d,
    broadcast_mul,
    channel_slice,
    conv2d,
    conv_transpose2d,
    elementwise,
    gap,
    linear,
    mul,
    reshape,
    shadow_mode,
    softmax_cross_entropy,
    sum_all,
    upsample_nearest,
)

SEEDS = range(10)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


def assert_grads_match(fn, arrays, seed=0, rtol=1e-5, atol=1e-8, h=1e-6):
    """Compare tape gradients of sum(fn(*xs) * R) with central differences, all in float64."""
    rng = np.random.default_rng(seed)
    with shadow_mode():
        xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out_shape = fn(*xs).shape
        proj = Tensor(rng.standard_normal(out_shape))
        with Tape() as tape:
            loss = sum_all(mul(fn(*xs), proj))
        backward(tape, loss)
        for x in xs:
            num = oracles.central_difference(lambda: float(sum_all(mul(fn(*xs), proj)).data), x.data, h)
            np.testing.assert_allclose(x.grad, num, rtol=rtol, atol=atol)


# --------------------------------------------------------------------------
# conv2d
# --------------------------------------------------------------------------


def test_conv2d_all_ones_sums_kernel_support():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_1x1_is_affine():
    out = conv2d(T([[[[1, 2], [3, 4]]]]), T([[[[2.0]]]]), T([1.0]))
    np.testing.assert_array_equal(out.data, [[[[3, 5], [7, 9]]]])


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    ref = oracles.conv2d_loops(x, w, b, 1, 1)
    with shadow_mode():
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
    np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-6)
    out32 = conv2d(T(x), T(w), T(b), 1, 1)
    np.testing.assert_allclose(out32.data, ref, rtol=0, atol=1e-5)


@pytest.mark.parametrize("stride,padding,k", [(2, 1, 3), (1, 0, 1), (2, 0, 2), (3, 2, 3)])
def test_conv2d_strided_shapes_and_values(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((3, 4, k, k))
    with shadow_mode():
        out = conv2d(Tensor(x), Tensor(w), None, stride, padding)
    expect = (8 + 2 * padding - k) // stride + 1
    assert out.shape == (2, 3, expect, expect)
    np.testing.assert_allclose(out.data, oracles.conv2d_loops(x, w, None, stride, padding), atol=1e-6)


def test_conv2d_errors():
    with pytest.raises(ShapeError):
        conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(ShapeError):
        conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride, padding = (1, 1) if seed % 2 == 0 else (2, 1)
    arrays = [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    assert_grads_match(lambda x, w, b: conv2d(x, w, b, stride, padding), arrays, seed)


# --------------------------------------------------------------------------
# conv_transpose2d
# --------------------------------------------------------------------------


def test_conv_transpose_zero_weights():
    out = conv_transpose2d(T(np.random.default_rng(0).random((2, 3, 4, 4))), T(np.zeros((3, 2, 3, 3))), T([0, 0]), 1, 1)
    assert out.shape == (2, 2, 4, 4)
    assert not out.data.any()


def test_conv_transpose_padding_crops_to_centre():
    out = conv_transpose2d(T([[[[5.0]]]]), T(np.ones((1, 1, 3, 3))), T([0.0]), 1, 1)
    np.testing.assert_array_equal(out.data, [[[[5.0]]]])


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_matches_scatter_oracle(seed):
    rng = np.random.default_rng(seed)
    stride, padding = [(1, 1), (2, 1), (1, 0), (2, 0)][seed % 4]
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(3)
    ref = oracles.conv_transpose2d_scatter(x, w, b, stride, padding)
    with shadow_mode():
        out = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    assert out.shape[2] == (4 - 1) * stride - 2 * padding + 3
    np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-6)
    np.testing.assert_allclose(conv_transpose2d(T(x), T(w), T(b), stride, padding).data, ref, atol=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_gradient(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    arrays = [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(2)]
    assert_grads_match(lambda x, w, b: conv_transpose2d(x, w, b, stride, 1), arrays, seed)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ShapeError):
        conv_transpose2d(T(np.zeros((1, 2, 3, 3))), T(np.zeros((3, 1, 3, 3))))


# --------------------------------------------------------------------------
# linear / gap / upsample
# --------------------------------------------------------------------------


def test_linear_identity_and_scalar_case():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(linear(T(x), T(np.eye(3)), T(np.zeros(3))).data, x)
    np.testing.assert_array_equal(linear(T([[1, 2]]), T([[3, 4]]), T([5])).data, [[16]])


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_oracle_and_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((4, 16)), rng.standard_normal((5, 16)), rng.standard_normal(5)
    with shadow_mode():
        out = linear(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, oracles.linear_loops(x, w, b), atol=1e-6)
    assert_grads_match(linear, [x, w, b], seed)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        linear(T(np.zeros((2, 3))), T(np.zeros((4, 5))), T(np.zeros(4)))


def test_gap_values_and_gradient():
    np.testing.assert_array_equal(gap(T(np.full((2, 3, 4, 5), 2.5))).data, np.full((2, 3), 2.5))
    np.testing.assert_array_equal(gap(T([[[[1, 2], [3, 4]]]])).data, [[2.5]])
    x = T(np.random.default_rng(0).random((2, 3, 4, 5)), grad=True)
    with Tape() as tape:
        y = sum_all(gap(x))
    backward(tape, y)
    np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20), rtol=1e-7)


def test_upsample_replicates_blocks():
    out = upsample_nearest(T([[[[1, 2], [3, 4]]]]), 4, 4)
    np.testing.assert_array_equal(
        out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    )


def test_upsample_identity():
    x = np.random.default_rng(1).random((2, 3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(upsample_nearest(T(x), 5, 5).data, x)


def test_upsample_shrink_picks_even_pixels():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = upsample_nearest(T(x), 2, 2)
    # floor(dst * 4 / 2) -> rows/cols 0 and 2
    np.testing.assert_array_equal(out.data[0, 0], [[x[0, 0, 0, 0], x[0, 0, 0, 2]], [x[0, 0, 2, 0], x[0, 0, 2, 2]]])


@pytest.mark.parametrize("size", [(7, 5), (2, 3), (8, 8), (3, 9)])
def test_upsample_gradient(size):
    arrays = [np.random.default_rng(sum(size)).standard_normal((2, 2, 4, 6))]
    assert_grads_match(lambda x: upsample_nearest(x, *size), arrays)


def test_upsample_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        upsample_nearest(T(np.zeros((1, 1, 2, 2))), 0, 2)


# --------------------------------------------------------------------------
# activations / elementwise
# --------------------------------------------------------------------------


def test_activation_fixed_points():
    z = T([0.0])
    assert activation(z, "sigmoid").data.item() == 0.5
    assert activation(z, "tanh").data.item() == 0.0
    assert activation(T([-1.0]), "relu").data.item() == 0.0


def test_sigmoid_derivative_at_zero_matches_finite_difference():
    with shadow_mode():
        x = Tensor(np.array([0.0]), requires_grad=True)
        with Tape() as tape:
            y = sum_all(activation(x, "sigmoid"))
        backward(tape, y)
    num = oracles.central_difference(lambda: oracles.sigmoid(float(x.data[0])), x.data, h=1e-3)
    assert x.grad[0] == 0.25
    assert abs(num[0] - 0.25) < 1e-7


def test_sigmoid_stays_in_open_interval():
    s = activation(T([-200.0, -30.0, 0.0, 30.0, 200.0]), "sigmoid").data
    assert np.all(s > 0) and np.all(s < 1)
    r = activation(T(np.random.default_rng(0).standard_normal(100)), "relu").data
    assert np.all(r >= 0)


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu"])
@pytest.mark.parametrize("seed", SEEDS)
def test_activation_gradients(kind, seed):
    arrays = [np.random.default_rng(seed).standard_normal((3, 4)) * 2]
    assert_grads_match(lambda x: activation(x, kind), arrays, seed)


def test_elementwise_kinds():
    a, b = T([1.0, 2.0]), T([3.0, 4.0])
    np.testing.assert_array_equal(elementwise(a, b, "add").data, [4, 6])
    np.testing.assert_array_equal(elementwise(a, b, "mul").data, [3, 8])
    with pytest.raises(ValueError):
        elementwise(a, b, "div")
    with pytest.raises(ShapeError):
        add(T(np.zeros(3)), T(np.zeros(4)))


def test_broadcast_mul_identities():
    x = np.random.default_rng(0).random((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(broadcast_mul(T(x), T(np.ones((2, 1, 4, 4)))).data, x)
    assert not broadcast_mul(T(x), T(np.zeros((2, 1, 4, 4)))).data.any()
    with pytest.raises(ShapeError):
        broadcast_mul(T(x), T(np.ones((2, 2, 1, 1))))


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_mul_matches_materialized_expansion(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    sp = rng.random((2, 1, 4, 5)).astype(np.float32)
    ch = rng.random((2, 3, 1, 1)).astype(np.float32)
    np.testing.assert_array_equal(broadcast_mul(T(x), T(sp)).data, x * np.repeat(sp, 3, axis=1))
    np.testing.assert_array_equal(broadcast_mul(T(x), T(ch)).data, x * np.tile(ch, (1, 1, 4, 5)))
    assert_grads_match(broadcast_mul, [x, sp], seed)
    assert_grads_match(broadcast_mul, [x, ch], seed)


def test_slice_and_reshape_gradients():
    x = np.random.default_rng(3).standard_normal((2, 6, 3, 3))
    assert_grads_match(lambda t: channel_slice(t, 2, 5), [x])
    assert_grads_match(lambda t: reshape(t, (2, 54)), [x])


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(0)
    x = T(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = batchnorm2d(x, T(np.ones(3)), T(np.zeros(3)), rm, rv, train=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)
    mu = x.data.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)) * 100 / 99, rtol=1e-5)


def test_batchnorm_eval_identity():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = batchnorm2d(T(x), T(np.ones(3)), T(np.zeros(3)), rm, rv, train=False).data
    np.testing.assert_allclose(out, x, rtol=1e-5)
    assert rm.tolist() == [0, 0, 0] and rv.tolist() == [1, 1, 1]


def test_batchnorm_degenerate_batch():
    with pytest.raises(ValueError):
        batchnorm2d(T(np.zeros((1, 2, 1, 1))), T(np.ones(2)), T(np.zeros(2)), np.zeros(2), np.ones(2), train=True)


@pytest.mark.parametrize("train", [True, False])
@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gradient(train, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal((3, 2, 3, 3)), rng.random(2) + 0.5, rng.standard_normal(2)]
    rm, rv = rng.standard_normal(2), rng.random(2) + 0.5

    def fn(x, g, b):
        return batchnorm2d(x, g, b, rm.copy(), rv.copy(), train=train)

    assert_grads_match(fn, arrays, seed, rtol=1e-3, atol=1e-7)


# --------------------------------------------------------------------------
# cross entropy
# --------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(T(np.zeros((3, 4))), [0, 1, 3])
    assert loss.data.item() == pytest.approx(math.log(4), rel=1e-6)


def test_cross_entropy_confident_logit_does_not_vanish():
    # -log(sigmoid(10)) = log1p(exp(-10))
    loss = softmax_cross_entropy(T([[10.0, 0.0]]), [0])
    assert loss.data.item() == pytest.approx(math.log1p(math.exp(-10)), rel=1e-6)
    assert loss.data.item() == pytest.approx(4.54e-5, rel=1e-3)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 2, 1, 3])
    with shadow_mode():
        t = Tensor(z, requires_grad=True)
        with Tape() as tape:
            loss = softmax_cross_entropy(t, labels)
        backward(tape, loss)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    p[np.arange(5), labels] -= 1
    np.testing.assert_allclose(t.grad, p / 5, rtol=1e-10)
    num = oracles.central_difference(lambda: float(softmax_cross_entropy(Tensor(t.data), labels).data), t.data)
    np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-9)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(T(np.zeros((2, 3))), [0, 3])


# --------------------------------------------------------------------------
# determinism
# --------------------------------------------------------------------------


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(7)
    x, w, b = (rng.standard_normal(s).astype(np.float32) for s in [(2, 4, 8, 8), (5, 4, 3, 3), (5,)])
    a = conv2d(T(x), T(w), T(b), 1, 1).data
    c = conv2d(T(x), T(w), T(b), 1, 1).data
    assert a.tobytes() == c.tobytes()
