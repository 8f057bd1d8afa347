"""
Command-line entry point.

    python cli.py <subcommand> [--config MANIFEST] [--out DIR] [--seed N]

Subcommands: gen-data, train-base, edit, search, aging-matrix, detector-box,
report, serve.  Exit codes: 0 success, 1 usage error, 2 runtime error.

Output layout under the resolved out dir (``--out`` > SHIFTEDIT_OUT_DIR >
manifest ``run.out_dir``):

    data/*.ds                datasets (gen-data)
    base.ckpt                base checkpoint (train-base)
    edit_outcome.json        single edit summary (edit) + edited.ckpt
    search_result.json       search winner (search)
    matrices.json            GenMatrix per τ (aging-matrix)
    box_stats.json           SeedStats (detector-box)
    ledger_<stage>.jsonl     run ledger parts
    gen_matrix.csv, box_stats.csv, summary.json, ledger.jsonl   (report)
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from checkpoint import load_checkpoint, save_checkpoint
from config import settings
from editing import run_edit
from errors import ShiftEditError, UsageError
from evalreport import (
    GenMatrix,
    SeedStats,
    build_gen_matrix,
    detector_boxstats,
    emit_reports,
    load_workspace,
    write_files_atomically,
)
from manifest import RunManifest, load_manifest
from network import train_base
from search import Ledger, RunCache, gate, read_ledger, search
from shiftbench import gen_bench, load_bench, save_bench

logger = logging.getLogger(__name__)

MATRICES_FILE = "matrices.json"
BOX_STATS_JSON = "box_stats.json"


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that reports bad usage as UsageError (exit 1) instead of exiting 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Context:
    def __init__(self, args: argparse.Namespace):
        manifest = load_manifest(args.config) if args.config else RunManifest()
        self.manifest = manifest.with_seed(args.seed)
        self.out = Path(settings.resolve_out_dir(args.out, self.manifest.run.out_dir))

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "base.ckpt"

    def workspace(self):
        return load_workspace(self.data_dir, self.checkpoint_path, self.manifest.split_seed)

    def write_json(self, name: str, payload) -> Path:
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
        return write_files_atomically(self.out, {name: text})[0]

    def write_ledger(self, stage: str, ledger: Ledger) -> Path:
        text = ledger.to_jsonl(self.manifest.report.record_wall_time)
        return write_files_atomically(self.out, {f"ledger_{stage}.jsonl": text})[0]


# ──────────────────────────────────────────────
# Subcommands
# ──────────────────────────────────────────────

def cmd_gen_data(ctx: _Context, args) -> int:
    m = ctx.manifest
    bench = gen_bench(
        class_count=m.architecture.class_count,
        base_size=m.data.base_size,
        aging_sizes=m.data.aging_sizes,
        aging_classes=m.data.aging_classes,
        detector_size=m.data.detector_size,
        detector_spec=m.detector_spec(),
        seed=m.seed,
        confounded=m.data.confounded,
    )
    save_bench(bench, ctx.data_dir)
    return 0


def cmd_train_base(ctx: _Context, args) -> int:
    m = ctx.manifest
    bench = load_bench(ctx.data_dir)
    checkpoint = train_base(
        m.build_architecture(), bench.base_train, bench.base_val,
        lr=m.train.lr, steps=m.train.steps, seed=m.seed,
        batch_size=m.train.batch_size, momentum=m.train.momentum,
    )
    save_checkpoint(checkpoint, ctx.checkpoint_path)
    ctx.write_json("train_base.json", checkpoint.meta.model_dump(mode="json"))
    logger.info(f"✅ Base checkpoint written to {ctx.checkpoint_path}")
    return 0


def _target(ws, name: str):
    try:
        return ws.target(name)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None


def cmd_edit(ctx: _Context, args) -> int:
    m = ctx.manifest
    ws = ctx.workspace()
    splits = _target(ws, m.edit.target)
    plan = m.edit_plan()
    outcome = run_edit(ws.base, plan, splits.edit_train, ws.original_val, edit_test=splits.edit_test)
    save_checkpoint(outcome.checkpoint, ctx.out / "edited.ckpt")
    ctx.write_json("edit_outcome.json", {
        "target": m.edit.target,
        "outcome": outcome.summary().model_dump(mode="json"),
        "accepted": {repr(t): gate(outcome, t) for t in m.report.taus},
    })
    logger.info(
        f"✅ {plan.label()} on {m.edit.target}: held-out acc {outcome.edit_test_accuracy:.4f}, "
        f"drop {outcome.baseline_drop:.3f}pp"
    )
    return 0


def cmd_search(ctx: _Context, args) -> int:
    m = ctx.manifest
    ws = ctx.workspace()
    splits = _target(ws, m.search.target)
    cfg = m.search_config()
    ledger = Ledger()
    coarse, fine = asyncio.run(
        search(ws.base, m.search.method, splits.edit_train, cfg, ws.original_val, m.search.target)
    )
    ledger.extend(coarse.records + fine.records)
    result = {"target": m.search.target, "method": m.search.method.value, "tau": cfg.tau, "viable": fine.viable}
    if fine.viable:
        best = fine.best
        result.update({
            "layer": best.layer,
            "lr": best.lr,
            "mean_selection": best.mean_selection,
            "mean_drop": best.mean_drop,
            "accepted_seeds": [r.plan.seed for r in best.accepted],
        })
    else:
        result["reason"] = fine.reason
    ctx.write_json("search_result.json", result)
    ctx.write_ledger("search", ledger)
    return 0


def cmd_aging_matrix(ctx: _Context, args) -> int:
    m = ctx.manifest
    ws = ctx.workspace()
    durations = m.report_durations()
    ledger, cache = Ledger(), RunCache()

    async def _all() -> List[GenMatrix]:
        return [
            await build_gen_matrix(
                ws.base, ws.aging_splits(), durations, m.report.methods, m.search_config(tau),
                ws.original_val, ledger, cache,
            )
            for tau in m.report.taus
        ]

    matrices = asyncio.run(_all())
    ctx.write_json(MATRICES_FILE, {"matrices": [mat.model_dump(mode="json") for mat in matrices]})
    ctx.write_ledger("aging", ledger)
    return 0


def cmd_detector_box(ctx: _Context, args) -> int:
    m = ctx.manifest
    ws = ctx.workspace()
    ledger = Ledger()
    stats = asyncio.run(detector_boxstats(
        ws.base, _target(ws, "detector"), m.report.methods, m.search_config(),
        ws.original_val, m.report.taus, ledger, RunCache(),
    ))
    ctx.write_json(BOX_STATS_JSON, {"stats": [s.model_dump(mode="json") for s in stats]})
    ctx.write_ledger("detector", ledger)
    return 0


def _read_json(path: Path) -> Optional[Dict]:
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path} is not valid JSON: {e}") from None


def cmd_report(ctx: _Context, args) -> int:
    matrices_doc = _read_json(ctx.out / MATRICES_FILE) or {"matrices": []}
    stats_doc = _read_json(ctx.out / BOX_STATS_JSON) or {"stats": []}
    matrices = [GenMatrix.model_validate(d) for d in matrices_doc["matrices"]]
    stats = [SeedStats.model_validate(d) for d in stats_doc["stats"]]
    entries = []
    for part in sorted(ctx.out.glob("ledger_*.jsonl")):
        entries.extend(read_ledger(part))
    if not matrices and not stats and not entries:
        raise UsageError(f"nothing to report in {ctx.out} (run aging-matrix, detector-box or search first)")
    emit_reports(matrices, stats, entries, ctx.out)
    return 0


def cmd_serve(ctx: _Context, args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "build base/aging/detector datasets from the manifest"),
    "train-base": (cmd_train_base, "train the base classifier"),
    "edit": (cmd_edit, "run the manifest's single edit plan"),
    "search": (cmd_search, "gated coarse-to-fine search on one target"),
    "aging-matrix": (cmd_aging_matrix, "cross-generalization matrices over aging durations"),
    "detector-box": (cmd_detector_box, "seed box statistics on the detector shift"),
    "report": (cmd_report, "emit CSV/JSON reports and the merged ledger"),
    "serve": (cmd_serve, "run the HTTP service"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Run manifest (INI)")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--seed", type=int, default=None, help="Override run.seed")

    parser = _ArgumentParser(prog="shiftedit", description="Model editing under distribution shift")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_ArgumentParser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "serve":
            p.add_argument("--host", type=str, default="0.0.0.0")
            p.add_argument("--port", type=int, default=8000)
    return parser


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        ctx = _Context(args)
        return COMMANDS[args.command][0](ctx, args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"❌ usage error: {e.detail}", file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"❌ usage error: {e}", file=sys.stderr)
        return 1
    except (ShiftEditError, OSError) as e:
        detail = e.detail if isinstance(e, ShiftEditError) else str(e)
        print(f"❌ {e.__class__.__name__}: {detail}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(cli())
