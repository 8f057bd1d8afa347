"""
Minimal Dense Tensor + Reverse-Mode Autodiff
============================================

Exactly the op vocabulary the classifier networks need: dense matmul,
conv2d, bias add, relu/gelu, average pooling, reshape/flatten, softmax,
MSE, plus the low-rank delta and the small arithmetic ops used to combine
losses.

Every op records a node on the *active* tape (``with Tape():``).  The
active tape lives in a ``ContextVar`` so runs executing in worker threads
(``asyncio.to_thread`` copies the context) never share tape state.

All data is 64-bit float.  Any op that would emit NaN/Inf raises
``NumericalError`` instead.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, NumericalError, UsageError

Activation = Literal["relu", "gelu", "identity"]
ACTIVATIONS = ("relu", "gelu", "identity")

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


# ──────────────────────────────────────────────
# Tensor
# ──────────────────────────────────────────────

class Tensor:
    """Dense float64 array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# ──────────────────────────────────────────────
# Tape
# ──────────────────────────────────────────────

@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "shiftedit_active_tape", default=None
)


class Tape:
    """Ordered record of primitive ops; consumed by ``backward``."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes.clear()


def current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _record(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    result = Tensor(out, copy=False)
    tape = current_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        result._tape = tape
        tape.nodes.append(TapeNode(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    tape = loss._tape
    if tape is None:
        raise UsageError("backward() called on a tensor that is not attached to a tape")
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for tensor, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not (tensor.requires_grad or tensor._tape is tape):
                continue
            key = id(tensor)
            grads[key] = grads[key] + g if key in grads else g
            if tensor.requires_grad:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        tensor.grad = grads[key]
    tape.clear()


# ──────────────────────────────────────────────
# Primitive ops
# ──────────────────────────────────────────────

def matmul(x: Tensor, W: Tensor) -> Tensor:
    """x @ Wᵀ for x of shape (n_in,) or (batch, n_in) and W of shape (n_out, n_in)."""
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"matmul: cannot apply W{W.shape} to x{x.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T

    def _backward(g):
        if xd.ndim == 1:
            return g @ Wd, np.outer(g, xd)
        return g @ Wd, g.T @ xd

    return _record("matmul", (x, W), out, _backward)


def add_bias(x: Tensor, b: Tensor, channel_axis: int) -> Tensor:
    """Add a per-channel bias along ``channel_axis``."""
    axis = channel_axis % x.ndim if x.ndim else 0
    if b.ndim != 1 or x.ndim == 0 or x.shape[axis] != b.shape[0]:
        raise DimensionError(f"add-bias: bias{b.shape} does not match axis {channel_axis} of x{x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = b.shape[0]
    out = x.data + b.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def _backward(g):
        return g, g.sum(axis=reduce_axes) if reduce_axes else g

    return _record("add-bias", (x, b), out, _backward)


def activation(x: Tensor, kind: Activation) -> Tensor:
    if kind not in ACTIVATIONS:
        raise UsageError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    xd = x.data
    if kind == "identity":
        return _record("activation", (x,), xd.copy(), lambda g: (g,))
    if kind == "relu":
        mask = xd > 0
        return _record("activation", (x,), np.where(mask, xd, 0.0), lambda g: (g * mask,))

    # gelu, tanh form
    u = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def _backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du),)

    return _record("activation", (x,), out, _backward)


def conv2d(x: Tensor, K: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched cross-correlation: x (B, C, H, W), K (O, C, k, k) -> (B, O, H', W')."""
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1] or K.shape[2] != K.shape[3]:
        raise DimensionError(f"conv2d: kernel{K.shape} incompatible with input{x.shape}")
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    k = K.shape[2]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {k}x{k} larger than padded input {x.shape[2:]} (padding {padding})"
        )

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    Kd = K.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, Kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def _backward(g):
        dK = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        dwin = np.tensordot(g, Kd, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
        dxp = np.zeros_like(xp)
        h_span = stride * (Ho - 1) + 1
        w_span = stride * (Wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h_span:stride, j:j + w_span:stride] += dwin[..., i, j].transpose(0, 3, 1, 2)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return dxp, dK

    return _record("conv2d", (x, K), np.ascontiguousarray(out), _backward)


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping average pooling with a size x size window."""
    if x.ndim != 4 or size < 1 or x.shape[2] % size or x.shape[3] % size:
        raise DimensionError(f"pool: window {size} does not tile input{x.shape}")
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def _backward(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) * scale,)

    return _record("pool", (x,), out, _backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from None
    return _record("flatten", (x,), out.copy(), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    if x.ndim < 2:
        raise DimensionError(f"flatten needs a batched tensor, got {x.shape}")
    return reshape(x, (x.shape[0], -1))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), s, _backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred{pred.shape} vs target{target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def _backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _record("mse", (pred, target), np.array(np.mean(diff * diff)), _backward)


def lowrank_delta(U: Tensor, V: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """U Vᵀ reshaped to ``shape`` (rows = shape[0], cols = prod(shape[1:]))."""
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
        raise DimensionError(f"lowrank: U{U.shape} and V{V.shape} must share rank")
    n, m = shape[0], int(np.prod(shape[1:]))
    if U.shape[0] != n or V.shape[0] != m:
        raise DimensionError(f"lowrank: U{U.shape} V{V.shape} incompatible with weight {shape}")
    Ud, Vd = U.data, V.data
    out = (Ud @ Vd.T).reshape(shape)

    def _backward(g):
        G = g.reshape(n, m)
        return G @ Vd, G.T @ Ud

    return _record("matmul", (U, V), out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record("scale", (a,), a.data * factor, lambda g: (g * factor,))


# ──────────────────────────────────────────────
# Layer-level forwards
# ──────────────────────────────────────────────

def forward_dense(W: Tensor, b: Tensor, x: Tensor, act: Activation = "identity") -> Tensor:
    """σ(W x + b) for x of shape (n_in,) or (batch, n_in)."""
    return activation(add_bias(matmul(x, W), b, channel_axis=-1), act)


def forward_conv2d(
    K: Tensor,
    b: Tensor,
    x: Tensor,
    stride: int = 1,
    padding: int = 0,
    act: Activation = "identity",
) -> Tensor:
    """σ(K ⋆ x + b) for x of shape (c_in, h, w) or (batch, c_in, h, w)."""
    if x.ndim == 3:
        out = forward_conv2d(K, b, reshape(x, (1,) + x.shape), stride, padding, act)
        return reshape(out, out.shape[1:])
    return activation(add_bias(conv2d(x, K, stride, padding), b, channel_axis=1), act)
