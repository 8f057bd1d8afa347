"""
Shared fixtures: a tiny conv classifier over a small generated bench, plus
factories for hand-built vector datasets and checkpoints.
"""

import numpy as np
import pytest

from checkpoint import Checkpoint
from models import Architecture, CheckpointMeta, LayerSpec, ShiftSpec
from network import Network, evaluate, train_base
from shiftbench import SynthDataset, edit_splits, gen_bench
from tensor import Tensor

TINY_LAYERS = ("conv2d:4:k3:s2:p1:gelu", "pool:4", "flatten")


def tiny_architecture(class_count: int = 3, head: str = "softmax") -> Architecture:
    """conv(4ch, stride 2) -> pool 4 -> flatten -> dense; weighted layers 1 and 4."""
    layers = tuple(LayerSpec.parse(t) for t in TINY_LAYERS) + (LayerSpec.parse(f"dense:{class_count}:identity"),)
    return Architecture(input_shape=(1, 32, 32), class_count=class_count, layers=layers, head=head)


def dense_architecture(n_in: int, class_count: int, hidden=None, head: str = "identity") -> Architecture:
    tokens = [f"dense:{h}:gelu" for h in (hidden or [])] + [f"dense:{class_count}:identity"]
    return Architecture(
        input_shape=(n_in,),
        class_count=class_count,
        layers=tuple(LayerSpec.parse(t) for t in tokens),
        head=head,
    )


def vector_dataset(x, labels, class_count: int, split: str = "train", name: str = "vec") -> SynthDataset:
    return SynthDataset(Tensor(np.asarray(x, dtype=np.float64)), np.asarray(labels), 0, class_count, split, name)


def checkpoint_for(net: Network, original_val: SynthDataset, seed: int = 0) -> Checkpoint:
    """Wrap a network with metadata pointing at ``original_val``."""
    meta = CheckpointMeta(
        seed=seed,
        dataset_id=original_val.dataset_id,
        base_val_accuracy=evaluate(net, original_val),
        origin="init",
    )
    return net.to_checkpoint(meta)


@pytest.fixture(scope="session")
def tiny_bench():
    return gen_bench(
        class_count=3,
        base_size=60,
        aging_sizes={0: 12, 14: 12, 60: 12},
        aging_classes=[1, 2],
        detector_size=12,
        detector_spec=ShiftSpec.default_detector(0),
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_base(tiny_bench):
    return train_base(
        tiny_architecture(), tiny_bench.base_train, tiny_bench.base_val,
        lr=0.05, steps=20, seed=0, batch_size=16, momentum=0.9,
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_bench):
    return edit_splits(tiny_bench, 0)


@pytest.fixture
def linear_problem():
    """One-layer identity-head regression net with a separable 2-class vector set."""
    arch = dense_architecture(2, 2)
    net = Network.initialize(arch, 3)
    x = np.array([[1.0, 0.2], [0.1, 1.0], [-1.0, 0.3], [0.2, -1.0], [0.7, 0.7], [-0.6, -0.8]])
    labels = np.array([0, 1, 1, 0, 0, 1])
    edit_train = vector_dataset(x, labels, 2, "train", "linear/edit_train")
    original_val = vector_dataset(x[::-1].copy(), labels[::-1].copy(), 2, "val", "linear/val")
    return checkpoint_for(net, original_val), edit_train, original_val


@pytest.fixture
def wide_problem():
    """Three-layer dense net (8 -> 10 -> 10 -> 6) whose weights all allow rank 4 deltas."""
    arch = dense_architecture(8, 6, hidden=[10, 10])
    net = Network.initialize(arch, 11)
    rng = np.random.default_rng(11)
    labels = np.arange(24) % 6
    edit_train = vector_dataset(rng.normal(size=(24, 8)), labels, 6, "train", "wide/edit_train")
    original_val = vector_dataset(rng.normal(size=(24, 8)), labels, 6, "val", "wide/val")
    return checkpoint_for(net, original_val), edit_train, original_val
