"""
Model update methods.

- low_rank_edit:     W_l ← W_l + U Vᵀ, only U and V train, every base weight frozen
- surgical_finetune: only layer l (weight and bias) trains
- full_finetune:     every layer trains

All three minimize the same MSE(f(x), one_hot(y)) on the same edit_train
tensors with plain SGD.  Conv kernels are edited through their flattened
(c_out) x (c_in·k·k) matrix, i.e. a rank-r bottleneck of two 1x1 projections.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from checkpoint import Checkpoint
from errors import DimensionError, EditError, NumericalError, UsageError
from models import CheckpointMeta, EditMethod, EditOutcomeSummary, EditPlan
from network import Network, batch_stream, evaluate, forward, one_hot
from shiftbench import SynthDataset, derive_seed
from tensor import Tape, Tensor, add, backward, lowrank_delta, mse_loss

logger = logging.getLogger(__name__)

ADAPTER_INIT_STD = 0.02
DROP_DECIMALS = 9

LossFn = Callable[[np.ndarray, np.ndarray], Tensor]


# ──────────────────────────────────────────────
# Types
# ──────────────────────────────────────────────

@dataclass
class LowRankAdapter:
    """U (n x r) and V (m x r) for layer ``layer``; delta = U Vᵀ in the weight's shape."""
    layer: int
    U: Tensor
    V: Tensor
    weight_shape: Tuple[int, ...]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @classmethod
    def initialize(cls, layer: int, weight_shape: Tuple[int, ...], rank: int, seed: int) -> "LowRankAdapter":
        """U = 0 (exact identity edit), V ~ Normal(0, 0.02) from the plan seed."""
        if rank < 1:
            raise UsageError(f"adapter rank must be >= 1, got {rank}")
        n, m = weight_shape[0], int(np.prod(weight_shape[1:]))
        rng = np.random.default_rng(derive_seed(seed, "adapter"))
        return cls(
            layer=layer,
            U=Tensor(np.zeros((n, rank)), requires_grad=True),
            V=Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=(m, rank)), requires_grad=True),
            weight_shape=tuple(weight_shape),
        )

    def delta(self) -> np.ndarray:
        return (self.U.data @ self.V.data.T).reshape(self.weight_shape)

    def delta_tensor(self) -> Tensor:
        return lowrank_delta(self.U, self.V, self.weight_shape)


@dataclass
class EditOutcome:
    plan: EditPlan
    checkpoint: Checkpoint
    original_val_accuracy: float
    base_original_val_accuracy: float
    loss_trajectory: List[float]
    selection_accuracy: Optional[float] = None
    edit_test_accuracy: Optional[float] = None
    adapter: Optional[LowRankAdapter] = field(default=None, repr=False)

    @property
    def baseline_drop(self) -> float:
        """Percentage points lost on the original validation set (negative = gained).

        Rounded to DROP_DECIMALS places: an exact k/n loss of τ points equals τ.
        """
        return round(100.0 * (self.base_original_val_accuracy - self.original_val_accuracy), DROP_DECIMALS)

    @property
    def final_loss(self) -> float:
        return self.loss_trajectory[-1]

    def summary(self) -> EditOutcomeSummary:
        return EditOutcomeSummary(
            plan=self.plan,
            selection_accuracy=self.selection_accuracy,
            edit_test_accuracy=self.edit_test_accuracy,
            original_val_accuracy=self.original_val_accuracy,
            base_original_val_accuracy=self.base_original_val_accuracy,
            baseline_drop=self.baseline_drop,
            final_loss=self.final_loss,
            loss_trajectory=list(self.loss_trajectory),
        )


# ──────────────────────────────────────────────
# Shared plumbing
# ──────────────────────────────────────────────

def _check_inputs(
    base: Checkpoint,
    plan: EditPlan,
    method: EditMethod,
    edit_train: SynthDataset,
    original_val: SynthDataset,
    edit_test: Optional[SynthDataset],
) -> None:
    if plan.method != method:
        raise UsageError(f"{method.value} edit called with a {plan.method.value} plan")
    if len(edit_train) == 0:
        raise UsageError("edit_train is empty")
    if original_val.dataset_id != base.meta.dataset_id:
        raise UsageError(
            f"original validation set {original_val.dataset_id!r} is not the one stored with the "
            f"base checkpoint ({base.meta.dataset_id!r})"
        )
    if edit_test is not None and edit_test.split != "val":
        raise UsageError(f"edit_test must be a held-out half, got split {edit_test.split!r}")
    if method != EditMethod.FULL:
        depth = base.architecture.depth
        if not 1 <= plan.layer <= depth:
            raise UsageError(f"target layer {plan.layer} out of range 1..{depth}")
        if plan.layer not in base.architecture.weighted_layers():
            spec = base.architecture.layers[plan.layer - 1]
            raise UsageError(f"target layer {plan.layer} ({spec.token()}) holds no weights")


def _sgd(plan: EditPlan, edit_train: SynthDataset, params: List[Tensor], loss_at: LossFn) -> List[float]:
    """Plain SGD; returns per-step losses plus the final full-set loss."""
    x_all = edit_train.images.data
    y_all = one_hot(edit_train.labels, edit_train.class_count)
    order_rng = np.random.default_rng(derive_seed(plan.seed, "edit-batches"))
    batches = batch_stream(len(edit_train), plan.batch_size, order_rng)
    trajectory = []
    for step in range(plan.steps):
        idx = next(batches)
        try:
            with Tape():
                loss = loss_at(x_all[idx], y_all[idx])
            trajectory.append(loss.item())
            backward(loss)
        except NumericalError as e:
            raise EditError(f"{plan.label()} diverged at step {step}: {e.detail}", step=step) from e
        for p in params:
            if p.grad is not None:
                p.data -= plan.lr * p.grad
                p.grad = None
        if not all(np.all(np.isfinite(p.data)) for p in params):
            raise EditError(f"{plan.label()} diverged at step {step}: non-finite parameters", step=step)
    try:
        trajectory.append(loss_at(x_all, y_all).item())
    except NumericalError as e:
        raise EditError(f"{plan.label()} diverged after step {plan.steps}: {e.detail}", step=plan.steps) from e
    return trajectory


def _edited_meta(base: Checkpoint, plan: EditPlan) -> CheckpointMeta:
    return base.meta.model_copy(update={"origin": "edit", "steps": plan.steps, "lr": plan.lr, "edit_plan": plan})


def _finish(
    base: Checkpoint,
    plan: EditPlan,
    edited: Checkpoint,
    trajectory: List[float],
    original_val: SynthDataset,
    edit_test: Optional[SynthDataset],
    edit_select: Optional[SynthDataset],
    adapter: Optional[LowRankAdapter] = None,
) -> EditOutcome:
    net = edited.to_network()
    outcome = EditOutcome(
        plan=plan,
        checkpoint=edited,
        original_val_accuracy=evaluate(net, original_val),
        base_original_val_accuracy=base.meta.base_val_accuracy,
        loss_trajectory=trajectory,
        selection_accuracy=evaluate(net, edit_select) if edit_select is not None else None,
        edit_test_accuracy=evaluate(net, edit_test) if edit_test is not None else None,
        adapter=adapter,
    )
    logger.debug(
        f"{plan.label()}: loss {trajectory[0]:.6f} -> {outcome.final_loss:.6f}, drop {outcome.baseline_drop:.3f}pp"
    )
    return outcome


def _plain_loss(net: Network, overrides: Optional[Dict[int, Callable[[], Tensor]]] = None) -> LossFn:
    def loss_at(x: np.ndarray, y: np.ndarray) -> Tensor:
        weights = {l: make() for l, make in (overrides or {}).items()}
        return mse_loss(forward(net, Tensor(x, copy=False), weights), Tensor(y, copy=False))
    return loss_at


# ──────────────────────────────────────────────
# Operations
# ──────────────────────────────────────────────

def low_rank_edit(
    base: Checkpoint,
    plan: EditPlan,
    edit_train: SynthDataset,
    original_val: SynthDataset,
    edit_test: Optional[SynthDataset] = None,
    edit_select: Optional[SynthDataset] = None,
) -> EditOutcome:
    """Learn U, V for layer l with every base weight frozen; emit the materialized checkpoint."""
    _check_inputs(base, plan, EditMethod.LOW_RANK, edit_train, original_val, edit_test)
    net = base.to_network()
    net.set_trainable([False] * net.depth)
    target = net.layer(plan.layer)
    adapter = LowRankAdapter.initialize(plan.layer, target.weight.shape, plan.rank, plan.seed)

    loss_at = _plain_loss(net, {plan.layer: lambda: add(target.weight, adapter.delta_tensor())})
    trajectory = _sgd(plan, edit_train, [adapter.U, adapter.V], loss_at)
    edited = materialize(base, adapter)
    edited.meta = _edited_meta(base, plan)
    return _finish(base, plan, edited, trajectory, original_val, edit_test, edit_select, adapter)


def surgical_finetune(
    base: Checkpoint,
    plan: EditPlan,
    edit_train: SynthDataset,
    original_val: SynthDataset,
    edit_test: Optional[SynthDataset] = None,
    edit_select: Optional[SynthDataset] = None,
) -> EditOutcome:
    """Train only layer l's weight and bias."""
    _check_inputs(base, plan, EditMethod.SURGICAL, edit_train, original_val, edit_test)
    net = base.to_network()
    net.set_trainable([i == plan.layer for i in range(1, net.depth + 1)])
    trajectory = _sgd(plan, edit_train, net.parameters(trainable_only=True), _plain_loss(net))
    edited = net.to_checkpoint(_edited_meta(base, plan))
    return _finish(base, plan, edited, trajectory, original_val, edit_test, edit_select)


def full_finetune(
    base: Checkpoint,
    plan: EditPlan,
    edit_train: SynthDataset,
    original_val: SynthDataset,
    edit_test: Optional[SynthDataset] = None,
    edit_select: Optional[SynthDataset] = None,
) -> EditOutcome:
    """Train every layer."""
    _check_inputs(base, plan, EditMethod.FULL, edit_train, original_val, edit_test)
    net = base.to_network()
    net.set_trainable([True] * net.depth)
    trajectory = _sgd(plan, edit_train, net.parameters(trainable_only=True), _plain_loss(net))
    edited = net.to_checkpoint(_edited_meta(base, plan))
    return _finish(base, plan, edited, trajectory, original_val, edit_test, edit_select)


EDIT_METHODS = {
    EditMethod.LOW_RANK: low_rank_edit,
    EditMethod.SURGICAL: surgical_finetune,
    EditMethod.FULL: full_finetune,
}


def run_edit(
    base: Checkpoint,
    plan: EditPlan,
    edit_train: SynthDataset,
    original_val: SynthDataset,
    edit_test: Optional[SynthDataset] = None,
    edit_select: Optional[SynthDataset] = None,
) -> EditOutcome:
    return EDIT_METHODS[plan.method](base, plan, edit_train, original_val, edit_test, edit_select)


def materialize(base: Checkpoint, adapter: LowRankAdapter) -> Checkpoint:
    """Base checkpoint with layer l replaced by W_l + U Vᵀ; every other tensor copied as-is."""
    arch = base.architecture
    if adapter.layer not in arch.weighted_layers():
        raise UsageError(f"adapter targets layer {adapter.layer}, which holds no weights")
    shape = arch.weight_shape(adapter.layer)
    n, m = shape[0], int(np.prod(shape[1:]))
    if (
        tuple(adapter.weight_shape) != tuple(shape)
        or adapter.U.shape != (n, adapter.rank)
        or adapter.V.shape != (m, adapter.rank)
    ):
        raise DimensionError(
            f"adapter U{adapter.U.shape} V{adapter.V.shape} does not fit layer {adapter.layer} weight {shape}"
        )
    edited = base.copy()
    idx = base.param_index(adapter.layer)
    delta = adapter.delta()
    if np.any(delta):
        edited.params[idx] = base.params[idx] + delta
    return edited
