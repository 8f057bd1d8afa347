"""
Cross-generalization matrices, seed box statistics and report files.

Every reported accuracy is measured on a held-out half (split tag "val");
evaluating anything else raises ``UsageError``.  Report files are written
atomically: contents are rendered first, then every file goes to a temp
name and is renamed into place.
"""

import asyncio
import csv
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from checkpoint import Checkpoint, load_checkpoint
from config import settings
from errors import ReportError, UsageError
from models import EditMethod, SearchConfig
from network import Network, evaluate
from search import Ledger, RunCache, coarse_search, group_configs, mean_of, search, selection_halves
from shiftbench import EditSplits, ShiftBench, SynthDataset, edit_splits, load_bench

logger = logging.getLogger(__name__)

GEN_MATRIX_FILE = "gen_matrix.csv"
BOX_STATS_FILE = "box_stats.csv"
SUMMARY_FILE = "summary.json"
LEDGER_FILE = "ledger.jsonl"

GEN_MATRIX_COLUMNS = ["tau", "method", "edit_duration", "eval_duration", "mean", "min", "max", "seeds", "status"]
BOX_STATS_COLUMNS = [
    "tau", "method", "layer", "lr", "count", "gated_out",
    "min", "whisker_low", "q1", "median", "q3", "whisker_high", "max",
]

BASELINE = "baseline"


# ============================================
# REPORT MODELS
# ============================================

class MatrixCell(BaseModel):
    method: str
    edit_duration: Optional[int] = Field(None, description="None on the baseline row")
    eval_duration: int
    mean: Optional[float] = None
    min: Optional[float] = None
    max: Optional[float] = None
    seeds: int = 0
    status: Literal["ok", "absent", "baseline"] = "ok"


class AbsentRow(BaseModel):
    method: str
    edit_duration: int
    reason: str


class DropEntry(BaseModel):
    method: str
    edit_duration: int
    seed: int
    original_val_accuracy: float
    baseline_drop: float


class Winner(BaseModel):
    method: str
    edit_duration: int
    layer: Optional[int]
    lr: float
    accepted_seeds: List[int]
    mean_selection: float


class GenMatrix(BaseModel):
    """methods × edit duration × eval duration accuracies plus the unedited baseline row"""
    tau: float
    durations: List[int]
    methods: List[str]
    baseline: List[MatrixCell]
    cells: List[MatrixCell]
    absent: List[AbsentRow] = Field(default_factory=list)
    drops: List[DropEntry] = Field(default_factory=list)
    winners: List[Winner] = Field(default_factory=list)

    def cell(self, method: str, edit_duration: int, eval_duration: int) -> MatrixCell:
        for c in self.cells:
            if (c.method, c.edit_duration, c.eval_duration) == (method, edit_duration, eval_duration):
                return c
        raise KeyError((method, edit_duration, eval_duration))

    def baseline_accuracy(self, eval_duration: int) -> float:
        return next(c.mean for c in self.baseline if c.eval_duration == eval_duration)

    def backward_generalization(self) -> List[Dict]:
        """Per (method, D): mean over eval durations D′ ≤ D minus the baseline mean there."""
        rows = []
        for method in self.methods:
            for D in self.durations:
                earlier = [d for d in self.durations if d <= D]
                cells = [self.cell(method, D, d) for d in earlier]
                if any(c.status != "ok" for c in cells):
                    continue
                edited = mean_of([c.mean for c in cells])
                baseline = mean_of([self.baseline_accuracy(d) for d in earlier])
                rows.append({
                    "method": method,
                    "edit_duration": D,
                    "edited_mean": edited,
                    "baseline_mean": baseline,
                    "advantage_pp": 100.0 * (edited - baseline),
                })
        return rows


class SeedStats(BaseModel):
    """Held-out accuracy distribution over seeds for one (method, layer, lr) at one τ"""
    tau: float
    method: str
    layer: Optional[int]
    lr: float
    samples: List[float]
    gated_out: int = Field(..., ge=0)
    min: Optional[float] = None
    whisker_low: Optional[float] = None
    q1: Optional[float] = None
    median: Optional[float] = None
    q3: Optional[float] = None
    whisker_high: Optional[float] = None
    max: Optional[float] = None

    @property
    def count(self) -> int:
        return len(self.samples)

    @classmethod
    def from_samples(
        cls, tau: float, method: str, layer: Optional[int], lr: float, samples: Sequence[float], gated_out: int
    ) -> "SeedStats":
        samples = [float(s) for s in samples]
        if not samples:
            return cls(tau=tau, method=method, layer=layer, lr=lr, samples=[], gated_out=gated_out)
        arr = np.asarray(samples)
        q1, median, q3 = (float(v) for v in np.percentile(arr, [25, 50, 75]))
        reach = 1.5 * (q3 - q1)
        return cls(
            tau=tau, method=method, layer=layer, lr=lr, samples=samples, gated_out=gated_out,
            min=float(arr.min()),
            whisker_low=float(arr[arr >= q1 - reach].min()),
            q1=q1, median=median, q3=q3,
            whisker_high=float(arr[arr <= q3 + reach].max()),
            max=float(arr.max()),
        )


# ──────────────────────────────────────────────
# Held-out evaluation
# ──────────────────────────────────────────────

def heldout_accuracy(net: Network, data: SynthDataset) -> float:
    if data.split != "val":
        raise UsageError(f"evaluation leakage: {data.name!r} is a {data.split!r} split, not a held-out half")
    return evaluate(net, data)


async def _accuracies(checkpoints: Sequence[Checkpoint], data: SynthDataset) -> List[float]:
    semaphore = asyncio.Semaphore(settings.MAX_PARALLEL_RUNS)

    async def _one(ckpt: Checkpoint) -> float:
        async with semaphore:
            return await asyncio.to_thread(lambda: heldout_accuracy(ckpt.to_network(), data))

    return list(await asyncio.gather(*(_one(c) for c in checkpoints)))


def _cell(method: str, D: int, D_eval: int, values: Sequence[float]) -> MatrixCell:
    return MatrixCell(
        method=method, edit_duration=D, eval_duration=D_eval,
        mean=mean_of(values), min=min(values), max=max(values), seeds=len(values),
    )


# ──────────────────────────────────────────────
# Cross-generalization matrix
# ──────────────────────────────────────────────

async def build_gen_matrix(
    base: Checkpoint,
    splits: Dict[int, EditSplits],
    durations: Iterable[int],
    methods: Iterable[EditMethod],
    cfg: SearchConfig,
    original_val: SynthDataset,
    ledger: Optional[Ledger] = None,
    cache: Optional[RunCache] = None,
) -> GenMatrix:
    """Search per (method, D) on D's edit half; evaluate the winner's seeds on every held-out half."""
    durations = sorted(set(durations))
    missing = [D for D in durations if D not in splits]
    if missing:
        raise UsageError(f"no aging dataset for durations {missing}")
    methods = list(methods)

    base_net = base.to_network()
    baseline = []
    for D in durations:
        acc = heldout_accuracy(base_net, splits[D].edit_test)
        baseline.append(MatrixCell(
            method=BASELINE, eval_duration=D, mean=acc, min=acc, max=acc, seeds=1, status="baseline",
        ))

    cells, absent, drops, winners = [], [], [], []
    for method in methods:
        for D in durations:
            context = f"aging:{D}"
            coarse, fine = await search(base, method, splits[D].edit_train, cfg, original_val, context, cache)
            if ledger is not None:
                ledger.extend(coarse.records + fine.records)
            if not fine.viable:
                absent.append(AbsentRow(method=method.value, edit_duration=D, reason=fine.reason))
                cells.extend(
                    MatrixCell(method=method.value, edit_duration=D, eval_duration=d, status="absent")
                    for d in durations
                )
                continue

            best = fine.best
            accepted = best.accepted
            winners.append(Winner(
                method=method.value, edit_duration=D, layer=best.layer, lr=best.lr,
                accepted_seeds=[r.plan.seed for r in accepted], mean_selection=best.mean_selection,
            ))
            drops.extend(
                DropEntry(
                    method=method.value, edit_duration=D, seed=r.plan.seed,
                    original_val_accuracy=r.outcome.original_val_accuracy, baseline_drop=r.baseline_drop,
                )
                for r in accepted
            )
            checkpoints = [r.outcome.checkpoint for r in accepted]
            for d in durations:
                cells.append(_cell(method.value, D, d, await _accuracies(checkpoints, splits[d].edit_test)))

    logger.info(
        f"📊 Generalization matrix (τ={cfg.tau}): {len(methods)} methods × {len(durations)}² cells, "
        f"{len(absent)} absent rows"
    )
    return GenMatrix(
        tau=cfg.tau, durations=durations, methods=[m.value for m in methods],
        baseline=baseline, cells=cells, absent=absent, drops=drops, winners=winners,
    )


# ──────────────────────────────────────────────
# Detector box statistics
# ──────────────────────────────────────────────

async def detector_boxstats(
    base: Checkpoint,
    detector: EditSplits,
    methods: Iterable[EditMethod],
    cfg: SearchConfig,
    original_val: SynthDataset,
    taus: Sequence[float] = (1.5, 7.0),
    ledger: Optional[Ledger] = None,
    cache: Optional[RunCache] = None,
) -> List[SeedStats]:
    """Coarse grid per method; held-out accuracy over seeds per configuration, gated at every τ."""
    fit, select = selection_halves(detector.edit_train, cfg)
    stats: List[SeedStats] = []
    for method in methods:
        coarse = await coarse_search(base, method, fit, select, cfg, original_val, "detector", cache)
        finished = [r for r in coarse.records if r.outcome is not None]
        heldout = dict(zip(
            (r.plan for r in finished),
            await _accuracies([r.outcome.checkpoint for r in finished], detector.edit_test),
        ))
        for tau in sorted(taus):
            regated = [r.regated(tau) for r in coarse.records]
            if ledger is not None:
                ledger.extend(regated)
            for config in group_configs(regated):
                samples = [heldout[r.plan] for r in config.records if r.accepted]
                stats.append(SeedStats.from_samples(
                    tau, method.value, config.layer, config.lr, samples, len(config.records) - len(samples),
                ))
            kept = sum(1 for r in regated if r.accepted)
            logger.info(f"📊 detector {method.value} τ={tau}: {kept}/{len(regated)} runs pass the gate")
    return stats


# ──────────────────────────────────────────────
# Report emission
# ──────────────────────────────────────────────

def fmt_float(value: Optional[float]) -> str:
    """17 significant digits: parsing the text gives back the same double."""
    return "" if value is None else format(float(value), ".17g")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return fmt_float(value)
    return str(value)


def _csv(columns: List[str], rows: Iterable[List]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def render_gen_matrix_csv(matrices: Sequence[GenMatrix]) -> str:
    rows = []
    for m in matrices:
        for c in m.baseline:
            rows.append([m.tau, BASELINE, None, c.eval_duration, c.mean, c.min, c.max, c.seeds, c.status])
        for c in sorted(m.cells, key=lambda c: (c.method, c.edit_duration, c.eval_duration)):
            rows.append([m.tau, c.method, c.edit_duration, c.eval_duration, c.mean, c.min, c.max, c.seeds, c.status])
    return _csv(GEN_MATRIX_COLUMNS, rows)


def render_box_stats_csv(stats: Sequence[SeedStats]) -> str:
    ordered = sorted(stats, key=lambda s: (s.tau, s.method, s.layer or 0, s.lr))
    return _csv(BOX_STATS_COLUMNS, (
        [s.tau, s.method, s.layer, s.lr, s.count, s.gated_out,
         s.min, s.whisker_low, s.q1, s.median, s.q3, s.whisker_high, s.max]
        for s in ordered
    ))


def ledger_sort_key(entry: Dict) -> Tuple:
    phase = {"coarse": 0, "fine": 1, "single": 2}.get(entry.get("phase"), 3)
    return (entry.get("context") or "", phase, entry.get("method") or "", entry.get("layer") or 0,
            entry.get("lr") or 0.0, entry.get("seed") or 0, entry.get("tau") or 0.0)


def gating_counts(entries: Sequence[Dict]) -> List[Dict]:
    counts: Dict[Tuple, Dict] = {}
    for e in entries:
        key = (e["context"], e["method"], e["tau"])
        row = counts.setdefault(key, {
            "context": e["context"], "method": e["method"], "tau": e["tau"],
            "runs": 0, "accepted": 0, "threshold": 0, "divergence": 0,
        })
        row["runs"] += 1
        if e["accepted"]:
            row["accepted"] += 1
        elif e["rejection_reason"] in ("threshold", "divergence"):
            row[e["rejection_reason"]] += 1
    return [counts[k] for k in sorted(counts, key=lambda k: (k[0], k[1], k[2]))]


def render_summary(matrices: Sequence[GenMatrix], stats: Sequence[SeedStats], entries: Sequence[Dict]) -> str:
    summary = {
        "matrices": [
            {
                "tau": m.tau,
                "durations": m.durations,
                "methods": m.methods,
                "baseline": {str(c.eval_duration): c.mean for c in m.baseline},
                "absent": [a.model_dump() for a in m.absent],
                "winners": [w.model_dump() for w in m.winners],
                "drops": [d.model_dump() for d in m.drops],
                "backward_generalization": m.backward_generalization(),
            }
            for m in matrices
        ],
        "box_stats": [
            {"tau": s.tau, "method": s.method, "layer": s.layer, "lr": s.lr,
             "count": s.count, "gated_out": s.gated_out}
            for s in sorted(stats, key=lambda s: (s.tau, s.method, s.layer or 0, s.lr))
        ],
        "gating": gating_counts(entries),
        "ledger_runs": len(entries),
    }
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def _ensure_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create output directory {out_dir}: {e}") from None
    if not out_dir.is_dir() or not os.access(out_dir, os.W_OK):
        raise ReportError(f"output directory {out_dir} is not writable")


def write_files_atomically(out_dir: Union[str, Path], contents: Dict[str, str]) -> List[Path]:
    """All-or-nothing: temp files first, then rename every one into place."""
    out_dir = Path(out_dir)
    _ensure_writable(out_dir)
    staged: List[Tuple[Path, Path]] = []
    try:
        for name, text in contents.items():
            tmp = out_dir / f".{name}.tmp"
            staged.append((tmp, out_dir / name))
            with open(tmp, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        for tmp, final in staged:
            os.replace(tmp, final)
    except OSError as e:
        raise ReportError(f"writing reports to {out_dir} failed: {e}") from None
    finally:
        for tmp, _ in staged:
            if tmp.exists():
                tmp.unlink()
    return [final for _, final in staged]


def emit_reports(
    matrices: Sequence[GenMatrix],
    stats: Sequence[SeedStats],
    ledger: Union[Ledger, Sequence[Dict]],
    out_dir: Union[str, Path],
    include_wall_time: bool = False,
) -> List[Path]:
    """gen_matrix.csv, box_stats.csv, summary.json and ledger.jsonl."""
    if isinstance(ledger, Ledger):
        entries = ledger.entries(include_wall_time)
    else:
        entries = sorted(ledger, key=ledger_sort_key)
    contents = {
        GEN_MATRIX_FILE: render_gen_matrix_csv(matrices),
        BOX_STATS_FILE: render_box_stats_csv(stats),
        SUMMARY_FILE: render_summary(matrices, stats, entries),
        LEDGER_FILE: "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries),
    }
    written = write_files_atomically(out_dir, contents)
    logger.info(f"✅ Wrote {len(written)} report files to {out_dir}")
    return written


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# ──────────────────────────────────────────────
# Workspace (generated bench + base checkpoint)
# ──────────────────────────────────────────────

@dataclass
class Workspace:
    base: Checkpoint
    bench: ShiftBench
    splits: Dict[str, EditSplits]
    split_seed: int

    @property
    def original_val(self) -> SynthDataset:
        return self.bench.base_val

    def target(self, name: str) -> EditSplits:
        if name not in self.splits:
            raise KeyError(f"unknown edit target {name!r}; available: {sorted(self.splits)}")
        return self.splits[name]

    def aging_splits(self) -> Dict[int, EditSplits]:
        return {D: self.splits[f"aging:{D}"] for D in self.bench.aging}


def load_workspace(data_dir: Union[str, Path], checkpoint_path: Union[str, Path], split_seed: int) -> Workspace:
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.is_file():
        raise UsageError(f"base checkpoint not found: {checkpoint_path} (run train-base first)")
    bench = load_bench(data_dir)
    base = load_checkpoint(checkpoint_path)
    if base.meta.dataset_id != bench.base_val.dataset_id:
        raise UsageError(
            f"checkpoint {checkpoint_path} was validated on {base.meta.dataset_id!r}, "
            f"but {data_dir} holds {bench.base_val.dataset_id!r}"
        )
    return Workspace(base, bench, edit_splits(bench, split_seed), split_seed)
