"""Desk-scale calibration runs; minutes each. Run with ``pytest -m slow``."""

import asyncio
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from cli import BOX_STATS_JSON, MATRICES_FILE, cli
from evalreport import GenMatrix, SeedStats, build_gen_matrix
from manifest import load_manifest
from models import AGING_DURATIONS, EditMethod, SearchConfig
from network import evaluate, train_base
from search import Ledger, RunCache, read_ledger
from shiftbench import gen_bench

pytestmark = pytest.mark.slow

MANIFESTS = Path(__file__).resolve().parent.parent / "manifests"
DESK = MANIFESTS / "desk.ini"
CRITERIA = MANIFESTS / "criteria.ini"


def _run_key(entry):
    return (entry["context"], entry["phase"], entry["method"], entry["layer"], entry["lr"], entry["seed"])


def test_gating_is_sound_over_a_large_ledger(tiny_base, tiny_splits, tiny_bench):
    durations = sorted(tiny_bench.aging)
    splits = {D: tiny_splits[f"aging:{D}"] for D in durations}
    ledger, cache = Ledger(), RunCache()

    async def _both():
        for tau in (1.5, 7.0):
            cfg = SearchConfig(seeds=5, steps=5, tau=tau)
            await build_gen_matrix(tiny_base, splits, durations, list(EditMethod), cfg, tiny_bench.base_val, ledger, cache)

    asyncio.run(_both())
    entries = ledger.entries()
    assert len(entries) >= 500
    assert ledger.violations() == []

    by_tau = {tau: {_run_key(e): e["accepted"] for e in entries if e["tau"] == tau} for tau in (1.5, 7.0)}
    for key, accepted in by_tau[1.5].items():
        if accepted and key in by_tau[7.0]:
            assert by_tau[7.0][key]


def test_benchmark_calibration():
    m = load_manifest(DESK)
    aged_accuracy = []
    for seed in range(3):
        bench = gen_bench(
            class_count=m.architecture.class_count,
            base_size=m.data.base_size,
            aging_sizes=m.data.aging_sizes,
            aging_classes=m.data.aging_classes,
            detector_size=m.data.detector_size,
            detector_spec=m.with_seed(seed).detector_spec(),
            seed=seed,
        )
        base = train_base(
            m.build_architecture(), bench.base_train, bench.base_val,
            lr=m.train.lr, steps=m.train.steps, seed=seed,
            batch_size=m.train.batch_size, momentum=m.train.momentum,
        )
        net = base.to_network()
        assert base.meta.base_val_accuracy >= 0.95
        assert base.meta.base_val_accuracy - evaluate(net, bench.detector) >= 0.10
        aged_accuracy.append([evaluate(net, bench.aging[D]) for D in sorted(bench.aging)])

    mean = np.mean(aged_accuracy, axis=0)
    assert all(a >= b for a, b in zip(mean, mean[1:]))


# ──────────────────────────────────────────────
# Gating asymmetry and backward generalization on the budgeted grid
# ──────────────────────────────────────────────

@pytest.fixture(scope="module")
def criteria_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("criteria")
    for stage in ("gen-data", "train-base", "aging-matrix", "detector-box"):
        assert cli([stage, "--config", str(CRITERIA), "--out", str(out)]) == 0, stage
    matrices = json.loads((out / MATRICES_FILE).read_text(encoding="utf-8"))["matrices"]
    stats = json.loads((out / BOX_STATS_JSON).read_text(encoding="utf-8"))["stats"]
    return (
        {m["tau"]: GenMatrix.model_validate(m) for m in matrices},
        [SeedStats.model_validate(s) for s in stats],
        read_ledger(out / "ledger_aging.jsonl"),
    )


def _accepted_runs(entries, method, tau):
    counts = Counter()
    for e in entries:
        if e["method"] == method and e["tau"] == tau and e["accepted"]:
            counts[e["context"]] += 1
    return counts


def test_full_finetuning_is_gated_out_where_single_layer_edits_pass(criteria_run):
    _, _, entries = criteria_run
    contexts = [f"aging:{D}" for D in AGING_DURATIONS]
    full = _accepted_runs(entries, "full", 1.5)
    assert sum(1 for c in contexts if full[c] == 0) >= 5, dict(full)
    for method in ("low_rank", "surgical"):
        accepted = _accepted_runs(entries, method, 1.5)
        assert all(accepted[c] >= 1 for c in contexts), (method, dict(accepted))


def test_edits_generalize_to_earlier_durations(criteria_run):
    matrices, _, _ = criteria_run
    rows = matrices[1.5].backward_generalization()
    assert rows
    for row in rows:
        if row["edit_duration"] > 0:
            assert row["advantage_pp"] >= 5.0, row


def test_low_rank_survives_the_strict_gate_on_the_detector_shift(criteria_run):
    _, stats, _ = criteria_run
    strict = [s for s in stats if s.tau == 1.5]
    assert not any(s.samples for s in strict if s.method == "full")
    assert any(s.samples for s in strict if s.method == "low_rank")
