"""Command-line entry point: ``vlcp <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .evaluation import evaluate, format_table
from .harness import RunLedger, emit_report, load_run_config, run_momentum_sweep, run_sequential
from .model import load_checkpoint
from .strategies import METHODS
from .taskstream import StreamConfig, generate_task_stream, load_manifest, stream_summary, write_manifest


def _parse_order(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(x) for x in text.replace(" ", "").split(",") if x]


MANIFEST_NAME = "manifest.jsonl"


def _manifest_path(path: str | Path) -> Path:
    """A ``.jsonl`` path is the manifest itself; anything else is a directory holding one."""
    path = Path(path)
    return path if path.suffix == ".jsonl" else path / MANIFEST_NAME


def _stream(args):
    if args.data:
        return load_manifest(_manifest_path(args.data))
    return generate_task_stream(StreamConfig(seed=args.data_seed))


def _stream_config(args) -> StreamConfig:
    data = {}
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{args.config}: expected a mapping of stream config keys")
        known = {f.name for f in dataclasses.fields(StreamConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown stream config keys: {', '.join(sorted(unknown))}")
    if args.tasks is not None:
        data["num_tasks"] = args.tasks
    if args.samples is not None:
        data["samples_total"] = args.samples
    tasks = data.get("num_tasks", StreamConfig.num_tasks)
    if args.classes_per_task is not None:
        data["classes_per_task"] = [args.classes_per_task] * tasks
    elif "classes_per_task" not in data and tasks != StreamConfig.num_tasks:
        data["classes_per_task"] = [StreamConfig().classes_per_task[0]] * tasks
    data["seed"] = args.seed
    return StreamConfig(**data)


def cmd_generate(args) -> int:
    stream = generate_task_stream(_stream_config(args))
    out = _manifest_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(stream, out)
    print(json.dumps({"manifest": str(out), **stream_summary(stream)}, indent=1))
    return 0


def cmd_train(args) -> int:
    stream = _stream(args)
    cfg = load_run_config(
        args.config,
        desk=not args.full_scale,
        method=args.method,
        seed=args.seed,
        task_order=_parse_order(args.order),
        epochs_per_task=args.epochs,
    )
    ledger = run_sequential(stream, cfg, out_dir=args.out, resume=not args.no_resume)
    emit_report(ledger, args.out, plot=not args.no_plot)
    print(format_table({cfg.method: ledger.final}))
    return 0


def cmd_evaluate(args) -> int:
    stream = _stream(args)
    model = load_checkpoint(args.ckpt)
    order = _parse_order(args.order)
    report = evaluate(stream, args.upto_task, model, order)
    print(json.dumps(report.to_record(), indent=1))
    return 0


def cmd_report(args) -> int:
    dirs = [Path(p) for p in args.ledger]
    ledgers = {}
    for d in dirs:
        lg = RunLedger.load(d)
        ledgers[f"{lg.method}:{d.name}" if len(dirs) > 1 else lg.method] = lg
    paths = emit_report(ledgers, args.out or dirs[0], plot=not args.no_plot)
    print(paths["table"].read_text())
    return 0


def cmd_sweep(args) -> int:
    stream = _stream(args)
    cfg = load_run_config(args.config, desk=not args.full_scale, method="ctp", seed=args.seed)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = run_momentum_sweep(stream, cfg, args.values, seeds=seeds)
    print("| m | final Rm |")
    print("|---|---|")
    for row in result["rows"]:
        print(f"| {row['m']} | {row['Rm']:.2f} |")
    print(f"spread: {result['spread']:.2f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rows = [{k: v for k, v in r.items()} for r in result["rows"]]
        (Path(args.out) / "momentum_sweep.json").write_text(json.dumps({"rows": rows, "spread": result["spread"]}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlcp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", help="manifest (or its directory) written by generate-data; default: generate the desk stream")
        sp.add_argument("--data-seed", type=int, default=0)

    g = sub.add_parser("generate-data", help="write a synthetic task-stream manifest")
    g.add_argument("--out", required=True, help="manifest .jsonl path, or a directory to hold manifest.jsonl")
    g.add_argument("--config", help="YAML file of stream config keys")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tasks", type=int)
    g.add_argument("--classes-per-task", type=int)
    g.add_argument("--samples", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method over the task stream")
    t.add_argument("--method", choices=METHODS, default="ctp")
    t.add_argument("--config", help="YAML file of run config keys")
    t.add_argument("--order", help="comma-separated task order, e.g. 4,3,2,1,0")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--full-scale", action="store_true", help="start from full-scale instead of desk defaults")
    t.add_argument("--no-resume", action="store_true")
    t.add_argument("--no-plot", action="store_true")
    data_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the merged splits of learned tasks")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--upto-task", type=int, required=True)
    e.add_argument("--order")
    data_args(e)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tables and curves from one or more run directories")
    r.add_argument("--ledger", nargs="+", required=True)
    r.add_argument("--out")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep-momentum", help="CTP final Rm for several momentum values")
    s.add_argument("--values", type=float, nargs="+", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds", help="comma-separated seeds to average")
    s.add_argument("--out")
    s.add_argument("--full-scale", action="store_true")
    data_args(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
