import asyncio

import numpy as np
import pytest

from errors import DimensionError, NumericalError, UsageError
from tensor import (
    Tape,
    Tensor,
    activation,
    add,
    add_bias,
    avg_pool2d,
    backward,
    conv2d,
    current_tape,
    flatten,
    forward_conv2d,
    forward_dense,
    lowrank_delta,
    matmul,
    mse_loss,
    reshape,
    scale,
    softmax,
)

H = 1e-5
TOLERANCE = 1e-6


def _away_from_zero(rng, shape):
    """Entries in ±[0.1, 1] so relu kinks stay far outside the difference stencil."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def check_gradients(build, *arrays, seed=0):
    """Compare tape gradients of mse(build(...), R) with central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    target = np.random.default_rng(seed + 1000).normal(size=out_shape)

    def loss_value():
        return mse_loss(build(*[Tensor(a, copy=False) for a in arrays]), Tensor(target)).item()

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = mse_loss(build(*leaves), Tensor(target))
    backward(loss)

    for leaf, a in zip(leaves, arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + H
            up = loss_value()
            a[idx] = orig - H
            down = loss_value()
            a[idx] = orig
            numeric[idx] = (up - down) / (2 * H)
        scale_ = max(np.linalg.norm(leaf.grad), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(leaf.grad - numeric) / scale_ <= TOLERANCE


# ──────────────────────────────────────────────
# Forward values
# ──────────────────────────────────────────────

def test_matmul_single_and_batched():
    W = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(matmul(Tensor([1.0, 1.0]), W).data, [3.0, 7.0, 11.0])
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), W)
    assert np.array_equal(out.data, [[1.0, 3.0, 5.0], [2.0, 4.0, 6.0]])


def test_conv2d_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_output_extents():
    x = Tensor(np.zeros((2, 3, 32, 32)))
    K = Tensor(np.zeros((8, 3, 3, 3)))
    assert conv2d(x, K, stride=2, padding=1).shape == (2, 8, 16, 16)
    assert conv2d(x, K, stride=1, padding=0).shape == (2, 8, 30, 30)


def test_avg_pool_means_each_window():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = avg_pool2d(Tensor(x), 2)
    assert np.array_equal(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])


def test_softmax_rows_sum_to_one():
    out = softmax(Tensor([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
    assert np.allclose(out.data.sum(axis=1), 1.0)
    assert np.allclose(out.data[1], [0.25, 0.75])


def test_activations():
    x = Tensor([-1.0, 0.0, 2.0])
    assert np.array_equal(activation(x, "relu").data, [0.0, 0.0, 2.0])
    assert np.array_equal(activation(x, "identity").data, x.data)
    gelu = activation(x, "gelu").data
    assert gelu[1] == 0.0 and gelu[2] == pytest.approx(1.9546, abs=1e-4)
    with pytest.raises(UsageError):
        activation(x, "tanh")


def test_dense_layer_is_linear_with_identity_activation():
    rng = np.random.default_rng(4)
    W, b = Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(3))
    x1, x2 = rng.normal(size=4), rng.normal(size=4)
    a, c = 0.7, -1.3
    combined = forward_dense(W, b, Tensor(a * x1 + c * x2)).data
    separate = a * forward_dense(W, b, Tensor(x1)).data + c * forward_dense(W, b, Tensor(x2)).data
    assert np.allclose(combined, separate, rtol=0, atol=1e-12)


def test_conv_layer_is_linear_with_identity_activation():
    rng = np.random.default_rng(5)
    K, b = Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(np.zeros(2))
    x1, x2 = rng.normal(size=(1, 6, 6)), rng.normal(size=(1, 6, 6))
    combined = forward_conv2d(K, b, Tensor(2.0 * x1 - x2), padding=1).data
    separate = 2.0 * forward_conv2d(K, b, Tensor(x1), padding=1).data - forward_conv2d(K, b, Tensor(x2), padding=1).data
    assert combined.shape == (2, 6, 6)
    assert np.allclose(combined, separate, rtol=0, atol=1e-12)


def test_lowrank_delta_reshapes_outer_product():
    U = Tensor([[1.0], [2.0]])
    V = Tensor([[1.0], [0.0], [0.0], [1.0]])
    out = lowrank_delta(U, V, (2, 1, 2, 2))
    assert np.array_equal(out.data.reshape(2, 4), [[1.0, 0.0, 0.0, 1.0], [2.0, 0.0, 0.0, 2.0]])


def test_dense_matches_explicit_loops():
    rng = np.random.default_rng(21)
    W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
    expected = np.zeros((5, 3))
    for n in range(5):
        for o in range(3):
            total = b[o]
            for i in range(4):
                total += W[o, i] * x[n, i]
            expected[n, o] = total
    out = forward_dense(Tensor(W), Tensor(b), Tensor(x)).data
    assert np.allclose(out, expected, rtol=0, atol=1e-12)
    assert np.allclose(forward_dense(Tensor(W), Tensor(b), Tensor(x[0])).data, expected[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_explicit_loops(stride, padding):
    rng = np.random.default_rng(22)
    K, b, x = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), rng.normal(size=(3, 8, 8))
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    size = (8 + 2 * padding - 3) // stride + 1
    expected = np.zeros((2, size, size))
    for o in range(2):
        for i in range(size):
            for j in range(size):
                total = b[o]
                for c in range(3):
                    for u in range(3):
                        for v in range(3):
                            total += K[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                expected[o, i, j] = total
    out = forward_conv2d(Tensor(K), Tensor(b), Tensor(x), stride=stride, padding=padding).data
    assert out.shape == expected.shape
    assert np.allclose(out, expected, rtol=0, atol=1e-12)


def test_unit_kernel_sums_channels_and_zero_kernel_gives_bias():
    x = np.random.default_rng(23).normal(size=(3, 8, 8))
    summed = forward_conv2d(Tensor(np.ones((1, 3, 1, 1))), Tensor(np.zeros(1)), Tensor(x)).data
    assert np.allclose(summed[0], x.sum(axis=0), rtol=0, atol=1e-12)
    zero = forward_conv2d(Tensor(np.zeros((2, 3, 3, 3))), Tensor([0.0, 0.5]), Tensor(x), padding=1).data
    assert np.array_equal(zero[0], np.zeros((8, 8)))
    assert np.array_equal(zero[1], np.full((8, 8), 0.5))


def test_mse_values():
    assert mse_loss(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 1.0
    rng = np.random.default_rng(24)
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    total = 0.0
    for p, t in zip(pred.ravel(), target.ravel()):
        total += (p - t) ** 2
    assert mse_loss(Tensor(pred), Tensor(target)).item() == pytest.approx(total / pred.size, rel=1e-12)


# ──────────────────────────────────────────────
# Shape and numerical errors
# ──────────────────────────────────────────────

@pytest.mark.parametrize("call", [
    lambda: matmul(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4)))),
    lambda: conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3)))),
    lambda: conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3)))),
    lambda: avg_pool2d(Tensor(np.zeros((1, 1, 5, 5))), 2),
    lambda: add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)), channel_axis=-1),
    lambda: mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4))),
    lambda: add(Tensor(np.zeros(3)), Tensor(np.zeros((3, 1)))),
    lambda: reshape(Tensor(np.zeros(6)), (4, 2)),
    lambda: flatten(Tensor(np.zeros(6))),
    lambda: lowrank_delta(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))), (2, 4)),
])
def test_shape_mismatch_raises_dimension_error(call):
    with pytest.raises(DimensionError):
        call()


def test_dimension_error_is_a_usage_error():
    with pytest.raises(UsageError):
        matmul(Tensor(np.zeros(2)), Tensor(np.zeros((2, 3))))


def test_overflow_raises_numerical_error():
    with pytest.raises(NumericalError):
        scale(Tensor([1e308]), 10.0)


def test_backward_needs_a_tape_and_a_scalar():
    with pytest.raises(UsageError):
        backward(Tensor(1.0))
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = scale(x, 2.0)
    with pytest.raises(UsageError):
        backward(y)


def test_ops_outside_a_tape_record_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = scale(x, 2.0)
    assert current_tape() is None
    with pytest.raises(UsageError):
        backward(mse_loss(y, Tensor([0.0, 0.0])))


def test_frozen_inputs_get_no_gradient():
    W = Tensor([[1.0, 2.0]], requires_grad=False)
    x = Tensor([3.0, 4.0], requires_grad=True)
    with Tape():
        loss = mse_loss(matmul(x, W), Tensor([0.0]))
    backward(loss)
    assert W.grad is None
    assert np.array_equal(x.grad, 2 * 11.0 * np.array([1.0, 2.0]))


async def test_tapes_in_worker_threads_are_isolated():
    def run(offset: float):
        x = Tensor([offset, offset + 1.0], requires_grad=True)
        with Tape() as tape:
            loss = mse_loss(scale(x, 3.0), Tensor([0.0, 0.0]))
            recorded = len(tape)
        backward(loss)
        return recorded, x.grad

    results = await asyncio.gather(*(asyncio.to_thread(run, float(i)) for i in range(8)))
    for i, (recorded, grad) in enumerate(results):
        assert recorded == 2
        assert np.allclose(grad, 9.0 * np.array([i, i + 1.0]))


# ──────────────────────────────────────────────
# Gradients against finite differences
# ──────────────────────────────────────────────

@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    check_gradients(matmul, rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), seed=seed)
    check_gradients(matmul, rng.normal(size=4), rng.normal(size=(3, 4)), seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_add_bias_gradients(seed):
    rng = np.random.default_rng(seed)
    check_gradients(lambda x, b: add_bias(x, b, channel_axis=1), rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3))
    check_gradients(lambda x, b: add_bias(x, b, channel_axis=-1), rng.normal(size=(4, 3)), rng.normal(size=3))


@pytest.mark.parametrize("kind", ["relu", "gelu", "identity"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(11)
    check_gradients(lambda x: activation(x, kind), _away_from_zero(rng, (3, 5)))


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    size = int(rng.integers(max(k, 3), 7))
    x = rng.normal(size=(2, 2, size, size))
    K = rng.normal(size=(3, 2, k, k))
    check_gradients(lambda a, w: conv2d(a, w, stride, padding), x, K, seed=seed)


@pytest.mark.parametrize("size", [1, 2, 3])
def test_avg_pool_gradients(size):
    rng = np.random.default_rng(size)
    check_gradients(lambda x: avg_pool2d(x, size), rng.normal(size=(2, 2, 6, 6)))


def test_reshape_and_flatten_gradients():
    rng = np.random.default_rng(2)
    check_gradients(flatten, rng.normal(size=(2, 3, 2, 2)))
    check_gradients(lambda x: reshape(x, (3, 4)), rng.normal(size=(2, 6)))


@pytest.mark.parametrize("seed", range(3))
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    check_gradients(softmax, rng.normal(size=(3, 4)), seed=seed)


def test_mse_gradients_with_respect_to_both_sides():
    rng = np.random.default_rng(9)
    check_gradients(mse_loss, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_add_and_scale_gradients():
    rng = np.random.default_rng(10)
    check_gradients(lambda a, b: scale(add(a, b), 0.5), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


@pytest.mark.parametrize("shape", [(3, 4), (2, 3, 2, 2)])
def test_lowrank_delta_gradients(shape):
    rng = np.random.default_rng(len(shape))
    n, m = shape[0], int(np.prod(shape[1:]))
    check_gradients(lambda U, V: lowrank_delta(U, V, shape), rng.normal(size=(n, 2)), rng.normal(size=(m, 2)))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("act", ["relu", "gelu", "identity"])
def test_dense_layer_gradients(seed, act):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    rows = []
    while len(rows) < 5:
        row = rng.normal(size=4)
        # relu: keep every pre-activation clear of the kink
        if act != "relu" or np.all(np.abs(W @ row + b) > 0.05):
            rows.append(row)
    check_gradients(lambda w, bb, xx: forward_dense(w, bb, xx, act), W, b, np.array(rows), seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_conv_layer_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    K = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    x = rng.normal(size=(1, 5, 5))
    check_gradients(lambda k, bb, xx: forward_conv2d(k, bb, xx, stride=2, padding=1, act="gelu"), K, b, x, seed=seed)


# ──────────────────────────────────────────────
# Hand-derived gradients
# ──────────────────────────────────────────────

def test_single_weight_gradient_by_hand():
    # loss = (w x - y)^2 with w=2, x=3, y=5: dloss/dw = 2 (w x - y) x = 6
    W = Tensor([[2.0]], requires_grad=True)
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = mse_loss(matmul(x, W), Tensor([5.0]))
    assert loss.item() == 1.0
    backward(loss)
    assert np.array_equal(W.grad, [[6.0]])
    assert np.array_equal(x.grad, [4.0])


def test_loss_against_itself_has_zero_gradient():
    rng = np.random.default_rng(25)
    W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = rng.normal(size=(2, 4))
    target = forward_dense(W, Tensor(np.zeros(3)), Tensor(x), "gelu").data
    with Tape():
        loss = mse_loss(forward_dense(W, Tensor(np.zeros(3)), Tensor(x), "gelu"), Tensor(target))
    assert loss.item() == 0.0
    backward(loss)
    assert np.array_equal(W.grad, np.zeros((3, 4)))

    y = Tensor(rng.normal(size=5), requires_grad=True)
    with Tape():
        same = mse_loss(y, y)
    backward(same)
    assert np.array_equal(y.grad, np.zeros(5))


def _weight_grad(make_loss, W0):
    W = Tensor(W0, requires_grad=True)
    with Tape():
        loss = make_loss(W)
    backward(loss)
    return W.grad


def test_gradient_is_linear_in_the_loss():
    rng = np.random.default_rng(26)
    W0 = rng.normal(size=(3, 4))
    x1, x2 = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(2, 4)))
    y1, y2 = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(2, 3)))
    a, c = 0.3, -2.5

    def loss1(W):
        return mse_loss(matmul(x1, W), y1)

    def loss2(W):
        return mse_loss(activation(matmul(x2, W), "gelu"), y2)

    combined = _weight_grad(lambda W: add(scale(loss1(W), a), scale(loss2(W), c)), W0)
    separate = a * _weight_grad(loss1, W0) + c * _weight_grad(loss2, W0)
    assert np.allclose(combined, separate, rtol=0, atol=1e-12)


def test_forward_and_backward_are_deterministic():
    rng = np.random.default_rng(27)
    K0, x0, target = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 2, 4, 4))
    runs = []
    for _ in range(2):
        K = Tensor(K0, requires_grad=True)
        with Tape():
            out = forward_conv2d(K, Tensor(np.zeros(2)), Tensor(x0), stride=2, padding=1, act="gelu")
            loss = mse_loss(out, Tensor(target))
        backward(loss)
        runs.append((out.data.copy(), loss.item(), K.grad.copy()))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]
    assert np.array_equal(runs[0][2], runs[1][2])
