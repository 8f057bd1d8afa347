"""
Gated coarse-to-fine hyperparameter search.

Production-hardened:
- Every run is gated on its original-validation drop; rejected and diverged
  runs are kept as records, never dropped silently
- Runs execute through asyncio.to_thread, bounded by a semaphore sized
  from settings.MAX_PARALLEL_RUNS; results come back in plan order
- Selection never sees edit_test (it is not a parameter here)
"""

import asyncio
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

from checkpoint import Checkpoint
from config import settings
from editing import EditOutcome, run_edit
from errors import EditError, UsageError
from models import EditMethod, EditPlan, SearchConfig
from shiftbench import SynthDataset, split_5050

logger = logging.getLogger(__name__)

RejectionReason = Literal["threshold", "divergence", "none"]
Phase = Literal["coarse", "fine", "single"]

_PHASE_ORDER = {"coarse": 0, "fine": 1, "single": 2}


def mean_of(values: Sequence[float]) -> float:
    """Correctly rounded mean; exact when every sample is equal."""
    if not values:
        raise UsageError("mean of an empty sample")
    if all(v == values[0] for v in values):
        return float(values[0])
    return math.fsum(values) / len(values)


# ──────────────────────────────────────────────
# Run records
# ──────────────────────────────────────────────

@dataclass
class RunRecord:
    plan: EditPlan
    outcome: Optional[EditOutcome]
    accepted: bool
    rejection_reason: RejectionReason
    tau: float
    phase: Phase = "single"
    context: str = ""
    wall_time_s: float = 0.0
    error: Optional[str] = None

    @property
    def selection_accuracy(self) -> Optional[float]:
        return self.outcome.selection_accuracy if self.outcome else None

    @property
    def baseline_drop(self) -> Optional[float]:
        return self.outcome.baseline_drop if self.outcome else None

    def regated(self, tau: float) -> "RunRecord":
        """Same run judged against another threshold."""
        if self.outcome is None:
            return replace(self, tau=tau)
        accepted = gate(self.outcome, tau)
        return replace(self, tau=tau, accepted=accepted, rejection_reason="none" if accepted else "threshold")

    def sort_key(self) -> Tuple:
        p = self.plan
        return (self.context, _PHASE_ORDER[self.phase], p.method.value, p.layer or 0, p.lr, p.seed, self.tau)

    def ledger_entry(self, include_wall_time: bool = False) -> Dict:
        o = self.outcome
        entry = {
            "context": self.context,
            "phase": self.phase,
            "method": self.plan.method.value,
            "layer": self.plan.layer,
            "rank": self.plan.rank if self.plan.method == EditMethod.LOW_RANK else None,
            "lr": self.plan.lr,
            "steps": self.plan.steps,
            "seed": self.plan.seed,
            "batch_size": self.plan.batch_size,
            "tau": self.tau,
            "accepted": self.accepted,
            "rejection_reason": self.rejection_reason,
            "selection_accuracy": o.selection_accuracy if o else None,
            "edit_test_accuracy": o.edit_test_accuracy if o else None,
            "original_val_accuracy": o.original_val_accuracy if o else None,
            "base_original_val_accuracy": o.base_original_val_accuracy if o else None,
            "baseline_drop": o.baseline_drop if o else None,
            "final_loss": o.final_loss if o else None,
            "error": self.error,
        }
        if include_wall_time:
            entry["wall_time_s"] = self.wall_time_s
        return entry


def gate(outcome: EditOutcome, tau: float) -> bool:
    """Accept iff base − edited original-val accuracy ≤ τ percentage points."""
    if outcome.original_val_accuracy is None or outcome.base_original_val_accuracy is None:
        raise UsageError("outcome lacks original-validation accuracies")
    return outcome.baseline_drop <= tau


class RunCache:
    """Edit results keyed by (base, data, plan) so re-gating at another τ never re-trains."""

    def __init__(self):
        self._results: Dict[Tuple, Union[EditOutcome, EditError]] = {}

    def __len__(self) -> int:
        return len(self._results)

    @staticmethod
    def key(base: Checkpoint, plan: EditPlan, edit_train: SynthDataset, edit_select: SynthDataset) -> Tuple:
        return (id(base), edit_train.dataset_id, edit_select.dataset_id, plan)

    def get(self, key: Tuple) -> Optional[Union[EditOutcome, EditError]]:
        return self._results.get(key)

    def put(self, key: Tuple, result: Union[EditOutcome, EditError]) -> None:
        self._results[key] = result


def execute_plan(
    base: Checkpoint,
    plan: EditPlan,
    edit_train: SynthDataset,
    edit_select: SynthDataset,
    original_val: SynthDataset,
    tau: float,
    phase: Phase = "single",
    context: str = "",
    cache: Optional[RunCache] = None,
) -> RunRecord:
    """Run one plan and gate it; divergence becomes a rejected record."""
    start = time.perf_counter()
    key = RunCache.key(base, plan, edit_train, edit_select) if cache is not None else None
    result = cache.get(key) if cache is not None else None
    if result is None:
        try:
            result = run_edit(base, plan, edit_train, original_val, edit_select=edit_select)
        except EditError as e:
            result = e
        if cache is not None:
            cache.put(key, result)
    if isinstance(result, EditError):
        logger.debug(f"⚠️ {context} {plan.label()} diverged: {result.detail}")
        return RunRecord(
            plan, None, False, "divergence", tau, phase, context, time.perf_counter() - start, result.detail
        )
    outcome = result
    accepted = gate(outcome, tau)
    logger.debug(
        f"{'✅' if accepted else '⚠️'} {context} {plan.label()}: "
        f"sel={outcome.selection_accuracy:.4f} drop={outcome.baseline_drop:.3f}pp"
    )
    return RunRecord(
        plan, outcome, accepted, "none" if accepted else "threshold", tau, phase, context,
        time.perf_counter() - start,
    )


async def run_plans(
    base: Checkpoint,
    plans: Sequence[EditPlan],
    edit_train: SynthDataset,
    edit_select: SynthDataset,
    original_val: SynthDataset,
    tau: float,
    phase: Phase = "single",
    context: str = "",
    cache: Optional[RunCache] = None,
) -> List[RunRecord]:
    """Execute independent plans concurrently; records are returned in plan order."""
    semaphore = asyncio.Semaphore(settings.MAX_PARALLEL_RUNS)

    async def _one(plan: EditPlan) -> RunRecord:
        async with semaphore:
            return await asyncio.to_thread(
                execute_plan, base, plan, edit_train, edit_select, original_val, tau, phase, context, cache
            )

    return list(await asyncio.gather(*(_one(p) for p in plans)))


# ──────────────────────────────────────────────
# Configuration aggregates
# ──────────────────────────────────────────────

@dataclass
class ConfigResult:
    """All seeds of one (method, layer, lr) configuration."""
    method: EditMethod
    layer: Optional[int]
    lr: float
    records: List[RunRecord]

    @property
    def accepted(self) -> List[RunRecord]:
        return [r for r in self.records if r.accepted]

    @property
    def viable(self) -> bool:
        return bool(self.accepted)

    @property
    def mean_selection(self) -> float:
        return mean_of([r.selection_accuracy for r in self.accepted])

    @property
    def mean_drop(self) -> float:
        return mean_of([r.baseline_drop for r in self.accepted])

    def rank_key(self) -> Tuple:
        """Higher selection first, then smaller drop, lower lr, lower layer."""
        return (-self.mean_selection, self.mean_drop, self.lr, self.layer or 0)

    @property
    def best_record(self) -> RunRecord:
        return self.accepted[0]


def group_configs(records: Iterable[RunRecord]) -> List[ConfigResult]:
    groups: Dict[Tuple[Optional[int], float], ConfigResult] = {}
    for r in records:
        key = (r.plan.layer, r.plan.lr)
        if key not in groups:
            groups[key] = ConfigResult(r.plan.method, r.plan.layer, r.plan.lr, [])
        groups[key].records.append(r)
    return list(groups.values())


def _best(configs: Iterable[ConfigResult]) -> Optional[ConfigResult]:
    viable = [c for c in configs if c.viable]
    return min(viable, key=lambda c: c.rank_key()) if viable else None


@dataclass
class CoarseResult:
    """Per-layer coarse winners (None = every run gated out) plus the run context."""
    method: EditMethod
    per_layer: Dict[Optional[int], Optional[ConfigResult]]
    records: List[RunRecord]
    base: Checkpoint = field(repr=False)
    edit_train: SynthDataset = field(repr=False)
    edit_select: SynthDataset = field(repr=False)
    original_val: SynthDataset = field(repr=False)
    tau: float = 1.5
    context: str = ""
    cache: Optional[RunCache] = field(default=None, repr=False)

    @property
    def empty(self) -> bool:
        return all(c is None for c in self.per_layer.values())

    def top_layers(self, k: int) -> List[ConfigResult]:
        winners = [c for c in self.per_layer.values() if c is not None]
        return sorted(winners, key=lambda c: c.rank_key())[:k]


@dataclass
class FineResult:
    method: EditMethod
    best: Optional[ConfigResult]
    records: List[RunRecord]
    reason: Optional[str] = None

    @property
    def viable(self) -> bool:
        return self.best is not None

    @property
    def best_record(self) -> Optional[RunRecord]:
        return self.best.best_record if self.best else None


# ──────────────────────────────────────────────
# Search operations
# ──────────────────────────────────────────────

def candidate_layers(base: Checkpoint, method: EditMethod, cfg: SearchConfig) -> List[Optional[int]]:
    if method == EditMethod.FULL:
        return [None]
    weighted = base.architecture.weighted_layers()
    layers = cfg.layers if cfg.layers is not None else weighted
    bad = [l for l in layers if l not in weighted]
    if bad:
        raise UsageError(f"candidate layers {bad} hold no weights (weighted layers: {weighted})")
    return sorted(set(layers))


async def coarse_search(
    base: Checkpoint,
    method: EditMethod,
    edit_train: SynthDataset,
    edit_select: SynthDataset,
    cfg: SearchConfig,
    original_val: SynthDataset,
    context: str = "",
    cache: Optional[RunCache] = None,
) -> CoarseResult:
    """Every candidate layer × coarse lr × seed; best accepted configuration per layer."""
    layers = candidate_layers(base, method, cfg)
    plans = [
        cfg.plan(method, layer, lr, seed)
        for layer in layers
        for lr in cfg.coarse_lrs
        for seed in cfg.seed_list()
    ]
    records = await run_plans(
        base, plans, edit_train, edit_select, original_val, cfg.tau, "coarse", context, cache
    )
    configs = group_configs(records)
    per_layer = {layer: _best(c for c in configs if c.layer == layer) for layer in layers}
    for layer, winner in per_layer.items():
        where = "all layers" if layer is None else f"layer {layer}"
        if winner is None:
            logger.info(f"⚠️ {context} {method.value} {where}: every coarse run gated out")
        else:
            logger.info(
                f"📊 {context} {method.value} {where}: lr={winner.lr:g} "
                f"sel={winner.mean_selection:.4f} ({len(winner.accepted)}/{len(winner.records)} accepted)"
            )
    return CoarseResult(
        method, per_layer, records, base, edit_train, edit_select, original_val, cfg.tau, context, cache
    )


async def fine_search(coarse: CoarseResult, cfg: SearchConfig) -> FineResult:
    """Fine lr sweep around the top coarse layers; returns the best accepted configuration."""
    if coarse.empty:
        logger.info(f"❌ {coarse.context} {coarse.method.value}: no viable configuration")
        return FineResult(coarse.method, None, [], reason="no viable configuration")

    grid = [
        cfg.plan(coarse.method, winner.layer, winner.lr * factor, seed)
        for winner in coarse.top_layers(cfg.top_layers)
        for factor in cfg.fine_factors
        for seed in cfg.seed_list()
    ]
    # plans the coarse pass already ran are ranked from its records, not logged twice
    executed = {r.plan: r for r in coarse.records}
    plans = [p for p in grid if p not in executed]
    records = await run_plans(
        coarse.base, plans, coarse.edit_train, coarse.edit_select, coarse.original_val,
        cfg.tau, "fine", coarse.context, coarse.cache,
    )
    reused = [executed[p] for p in grid if p in executed]
    best = _best(group_configs(reused + records))
    if best is None:
        return FineResult(coarse.method, None, records, reason="no viable configuration")
    where = "all layers" if best.layer is None else f"layer {best.layer}"
    logger.info(
        f"✅ {coarse.context} {coarse.method.value} winner: {where}, lr={best.lr:g}, "
        f"sel={best.mean_selection:.4f}, drop={best.mean_drop:.3f}pp"
    )
    return FineResult(coarse.method, best, records)


def selection_halves(edit_train: SynthDataset, cfg: SearchConfig) -> Tuple[SynthDataset, SynthDataset]:
    """(fit, select): the same half when shared, a further 50/50 split when holdout."""
    if cfg.selection == "shared":
        return edit_train, edit_train
    return split_5050(edit_train, cfg.seed)


async def search(
    base: Checkpoint,
    method: EditMethod,
    edit_train: SynthDataset,
    cfg: SearchConfig,
    original_val: SynthDataset,
    context: str = "",
    cache: Optional[RunCache] = None,
) -> Tuple[CoarseResult, FineResult]:
    fit, select = selection_halves(edit_train, cfg)
    coarse = await coarse_search(base, method, fit, select, cfg, original_val, context, cache)
    fine = await fine_search(coarse, cfg)
    return coarse, fine


# ──────────────────────────────────────────────
# Ledger
# ──────────────────────────────────────────────

class Ledger:
    """Every executed run exactly once, accepted or rejected."""

    def __init__(self, records: Iterable[RunRecord] = ()):
        self.records: List[RunRecord] = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def extend(self, records: Iterable[RunRecord]) -> None:
        self.records.extend(records)

    def sorted_records(self) -> List[RunRecord]:
        return sorted(self.records, key=lambda r: r.sort_key())

    def entries(self, include_wall_time: bool = False) -> List[Dict]:
        return [r.ledger_entry(include_wall_time) for r in self.sorted_records()]

    def to_jsonl(self, include_wall_time: bool = False) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries(include_wall_time))

    def violations(self) -> List[RunRecord]:
        """Accepted records whose drop exceeds their τ (always empty)."""
        return [r for r in self.records if r.accepted and not r.baseline_drop <= r.tau]


def read_ledger(path: Union[str, Path]) -> List[Dict]:
    path = Path(path)
    if not path.is_file():
        return []
    with path.open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
