"""
Layered classifier f = f_L ∘ … ∘ f_1 with per-layer trainability,
prefix evaluation f_{≤l}, base training and accuracy evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Union

import numpy as np

from checkpoint import Checkpoint
from config import settings
from errors import DimensionError, NumericalError, TrainingError, UsageError
from models import Architecture, CheckpointMeta, LayerKind, LayerSpec
from tensor import (
    Tape,
    Tensor,
    avg_pool2d,
    backward,
    flatten,
    forward_conv2d,
    forward_dense,
    mse_loss,
    softmax,
)

if TYPE_CHECKING:
    from shiftbench import SynthDataset

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]


@dataclass
class Layer:
    spec: LayerSpec
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None


class Network:
    """Ordered layers with parameter tensors and a per-layer trainable mask."""

    def __init__(self, architecture: Architecture, layers: List[Layer]):
        if len(layers) != architecture.depth:
            raise UsageError(f"architecture has {architecture.depth} layers, got {len(layers)}")
        self.architecture = architecture
        self.layers = layers
        self.trainable: List[bool] = [False] * len(layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def class_count(self) -> int:
        return self.architecture.class_count

    def layer(self, l: int) -> Layer:
        if not 1 <= l <= self.depth:
            raise UsageError(f"layer index {l} out of range 1..{self.depth}")
        return self.layers[l - 1]

    def set_trainable(self, mask: Sequence[bool]) -> None:
        """Set the trainable mask; requires_grad follows it."""
        if len(mask) != self.depth:
            raise UsageError(f"trainable mask needs {self.depth} entries, got {len(mask)}")
        self.trainable = [bool(m) for m in mask]
        for flag, layer in zip(self.trainable, self.layers):
            for p in (layer.weight, layer.bias):
                if p is not None:
                    p.requires_grad = flag
                    p.grad = None

    def parameters(self, trainable_only: bool = False) -> List[Tensor]:
        """Weight then bias of every weighted layer, in layer order."""
        params = []
        for flag, layer in zip(self.trainable, self.layers):
            if trainable_only and not flag:
                continue
            params.extend(p for p in (layer.weight, layer.bias) if p is not None)
        return params

    def to_checkpoint(self, meta: CheckpointMeta) -> Checkpoint:
        return Checkpoint(
            architecture=self.architecture,
            params=[p.data.copy() for p in self.parameters()],
            meta=meta,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "Network":
        arch = checkpoint.architecture
        shapes = arch.layer_shapes()
        params = iter(checkpoint.params)
        layers = []
        for spec, (in_shape, out_shape) in zip(arch.layers, shapes):
            if not spec.has_weights:
                layers.append(Layer(spec))
                continue
            W, b = next(params), next(params)
            expected = spec.weight_shape(in_shape)
            if W.shape != expected or b.shape != (expected[0],):
                raise DimensionError(f"checkpoint tensors {W.shape}/{b.shape} do not fit {spec.token()}")
            layers.append(Layer(spec, Tensor(W), Tensor(b)))
        return cls(arch, layers)

    @classmethod
    def initialize(cls, architecture: Architecture, seed: Union[int, np.random.SeedSequence]) -> "Network":
        """Scaled-normal weights (fan-in), zero biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for spec, (in_shape, _) in zip(architecture.layers, architecture.layer_shapes()):
            shape = spec.weight_shape(in_shape)
            if shape is None:
                layers.append(Layer(spec))
                continue
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if spec.activation == "identity" else 2.0
            W = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
            layers.append(Layer(spec, Tensor(W), Tensor(np.zeros(shape[0]))))
        return cls(architecture, layers)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply_layer(layer: Layer, x: Tensor, weight: Optional[Tensor]) -> Tensor:
    spec = layer.spec
    if spec.kind == LayerKind.CONV2D:
        return forward_conv2d(weight, layer.bias, x, spec.stride, spec.padding, spec.activation)
    if spec.kind == LayerKind.DENSE:
        return forward_dense(weight, layer.bias, x, spec.activation)
    if spec.kind == LayerKind.POOL:
        return avg_pool2d(x, spec.pool_size)
    return flatten(x)


def forward_prefix(
    net: Network,
    l: int,
    x: ArrayLike,
    weight_overrides: Optional[Dict[int, Tensor]] = None,
) -> Tensor:
    """Activations after layer l, i.e. f_{≤l}(x), for a batch x."""
    if not 1 <= l <= net.depth:
        raise UsageError(f"prefix length {l} out of range 1..{net.depth}")
    x = _as_tensor(x)
    expected = tuple(net.architecture.input_shape)
    if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
        raise DimensionError(f"input batch {x.shape} does not match input extents {expected}")
    overrides = weight_overrides or {}
    for i in range(1, l + 1):
        layer = net.layers[i - 1]
        x = _apply_layer(layer, x, overrides.get(i, layer.weight))
    return x


def forward(
    net: Network,
    x: ArrayLike,
    weight_overrides: Optional[Dict[int, Tensor]] = None,
) -> Tensor:
    """Class probabilities (softmax head) or raw outputs (identity head)."""
    out = forward_prefix(net, net.depth, x, weight_overrides)
    return softmax(out) if net.architecture.head == "softmax" else out


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    y = np.zeros((len(labels), class_count))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def predict(net: Network, images: ArrayLike) -> np.ndarray:
    """Argmax class per example (ties → lowest class index), in evaluation chunks."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    preds = []
    for start in range(0, len(data), settings.EVAL_BATCH_SIZE):
        probs = forward(net, Tensor(data[start:start + settings.EVAL_BATCH_SIZE], copy=False))
        preds.append(np.argmax(probs.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, data: "SynthDataset") -> float:
    """Fraction of examples whose argmax class equals the label."""
    if len(data) == 0:
        raise UsageError(f"cannot evaluate on empty dataset {data.dataset_id!r}")
    correct = int(np.count_nonzero(predict(net, data.images) == data.labels))
    return correct / len(data)


def batch_stream(n: int, batch_size: Optional[int], rng: np.random.Generator):
    """Endless stream of index arrays; full batch when batch_size is None or >= n."""
    if batch_size is None or batch_size >= n:
        full = np.arange(n)
        while True:
            yield full
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train_base(
    architecture: Architecture,
    train: "SynthDataset",
    val: "SynthDataset",
    lr: float,
    steps: int,
    seed: int,
    batch_size: Optional[int] = None,
    momentum: float = 0.0,
) -> Checkpoint:
    """SGD on MSE(f(x), one_hot(y)); deterministic given seed."""
    if len(train) == 0:
        raise UsageError("training set is empty")
    if not lr > 0:
        raise UsageError(f"lr must be > 0, got {lr}")
    if steps < 0 or not 0.0 <= momentum < 1.0:
        raise UsageError(f"need steps >= 0 and 0 <= momentum < 1 (got {steps}, {momentum})")

    init_seq, order_seq = np.random.SeedSequence(seed).spawn(2)
    net = Network.initialize(architecture, init_seq)
    net.set_trainable([True] * net.depth)
    params = net.parameters(trainable_only=True)
    velocity = [np.zeros_like(p.data) for p in params]

    x_all = train.images.data
    y_all = one_hot(train.labels, architecture.class_count)
    batches = batch_stream(len(train), batch_size, np.random.default_rng(order_seq))

    logger.info(f"🏋️ Training base model: {steps} steps, lr={lr}, batch={batch_size or 'full'}, seed={seed}")
    for step in range(steps):
        idx = next(batches)
        try:
            with Tape():
                loss = mse_loss(forward(net, Tensor(x_all[idx], copy=False)), Tensor(y_all[idx], copy=False))
            backward(loss)
        except NumericalError as e:
            raise TrainingError(f"base training diverged at step {step}: {e.detail}", step=step) from e
        for p, v in zip(params, velocity):
            v *= momentum
            v += p.grad
            p.data -= lr * v
            p.grad = None
        if (step + 1) % settings.TRAIN_LOG_EVERY == 0:
            logger.info(f"📊 step {step + 1}/{steps} loss={loss.item():.6f}")

    if not all(np.all(np.isfinite(p.data)) for p in params):
        raise TrainingError(f"base training diverged at step {steps}: non-finite parameters", step=steps)

    net.set_trainable([False] * net.depth)
    val_acc = evaluate(net, val)
    train_acc = evaluate(net, train)
    logger.info(f"✅ Base model trained: train acc {train_acc:.4f}, val acc {val_acc:.4f}")
    return net.to_checkpoint(CheckpointMeta(
        seed=seed,
        dataset_id=val.dataset_id,
        base_val_accuracy=val_acc,
        origin="train_base" if steps else "init",
        steps=steps,
        lr=lr,
        train_accuracy=train_acc,
    ))
