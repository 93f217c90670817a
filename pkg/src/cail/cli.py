"""Command-line interface: generate, train, eval, export-dag, sweep.

Every command exits 0 on success.  On failure it prints one JSON object
``{"error": <kind>, "message": <text>}`` to stderr, exits nonzero and removes
any files it had already written.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import dumps_report, evaluate, export_templates
from .kuramoto import make_dataset, read_dataset, write_dataset

log = logging.getLogger("cail")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SWEEP_GRIDS = {
    "sparsity": [10.0 ** k for k in range(-6, 1)],   # lambda_1
    "c0": [10.0 ** k for k in range(-6, -1)],        # initial penalty c
}
SWEEP_ALIASES = {"lambda1": "sparsity", "c": "c0"}
SWEEP_COLUMNS = ["param", "value", "auroc_mean", "auroc_std", "action_mse"]


class CliError(Exception):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


class Outputs:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self):
        self.files: list[Path] = []
        self.dirs: list[Path] = []

    def directory(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            path.mkdir(parents=True)
            self.dirs.append(path)
        elif not path.is_dir():
            raise CliError(f"{path} exists and is not a directory")
        return path

    def parent_of(self, path) -> Path:
        path = Path(path)
        self.directory(path.parent if str(path.parent) else Path("."))
        return path

    def claim(self, path) -> Path:
        path = Path(path)
        self.files.append(path)
        return path

    def write_text(self, path, text: str) -> Path:
        path = self.claim(self.parent_of(path))
        tmp = path.with_name(path.name + ".part")
        self.files.append(tmp)
        tmp.write_text(text)
        os.replace(tmp, path)
        return path

    def rollback(self) -> None:
        for p in reversed(self.files):
            p.unlink(missing_ok=True)
        for d in reversed(self.dirs):
            try:
                d.rmdir()
            except OSError:
                pass


# --- configuration ----------------------------------------------------------

def load_config(args) -> RunConfig:
    """JSON config file (if any) overridden by explicit flags."""
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError(f"config {args.config}: expected a JSON object")
    for flag in ("seed", "scale", "mode", "dataset", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            data[flag] = value
    if getattr(args, "vanilla", False):
        data["vanilla"] = True
    return RunConfig.from_dict(data)


def load_data(run: RunConfig):
    if run.dataset:
        return read_dataset(run.dataset)
    log.info("no dataset given; generating %s/%s with seed %d", run.scale, run.mode, run.seed)
    return make_dataset(run.dataset_config())


# --- commands -------------------------------------------------------------

def cmd_generate(args, out: Outputs) -> dict:
    run = load_config(args)
    ds = make_dataset(run.dataset_config())
    path = out.claim(out.parent_of(args.out))
    write_dataset(ds, path)
    return {"dataset": str(path), "sequences": len(ds.states)}


def cmd_train(args, out: Outputs) -> dict:
    from .training import fit, save_model

    run = load_config(args)
    dataset = load_data(run)
    result = fit(run, dataset)
    folder = out.directory(args.out)
    ckpt = out.claim(folder / "model.ckpt")
    save_model(ckpt, result.model, run, result.report)
    out.write_text(folder / "train_report.json", dumps_report(result.report))
    return {"checkpoint": str(ckpt), "final_h": result.report["final"]["h"]}


def cmd_eval(args, out: Outputs) -> dict:
    from .training import load_model

    model, run, _ = load_model(args.checkpoint)
    dataset = read_dataset(args.dataset) if args.dataset else load_data(run)
    report = evaluate(model, dataset, run.to_dict(), closed_loop=args.closed_loop or run.closed_loop)
    out.write_text(args.out, dumps_report(report))
    return {"report": str(args.out)}


def cmd_export(args, out: Outputs) -> dict:
    from .training import load_model

    model, run, _ = load_model(args.checkpoint)
    if model.bank is None:
        raise CliError("checkpoint has no template bank (vanilla model)")
    threshold = run.threshold if args.threshold is None else args.threshold
    if threshold < 0:
        raise CliError("threshold must be >= 0")
    cfg = model.config
    names = [f"s{i + 1}" for i in range(cfg.n_state)] + [f"a{i + 1}" for i in range(cfg.n_action)]
    folder = out.directory(args.out)
    for name in [f"template_{k}.dot" for k in range(cfg.n_templates)] + ["templates.json"]:
        out.claim(folder / name)
    written = export_templates(model, names, folder, threshold)
    return {"files": [str(p) for p in written]}


def sweep_trial(run_dict: dict) -> tuple[float | None, float]:
    """One isolated sweep trial: train, then score on the test split."""
    from .training import fit

    run = RunConfig.from_dict(run_dict)
    dataset = load_data(run)
    result = fit(run, dataset)
    report = evaluate(result.model, dataset)
    score = report["static_auroc"] if dataset.mode == "static" else report["dynamic_auroc"]
    return score, report["action_mse"]


def sweep_rows(param: str, values: list[float], runs: list[list[dict]], results) -> list[dict]:
    rows, it = [], iter(results)
    for value, group in zip(values, runs):
        got = [next(it) for _ in group]
        scores = np.array([s for s, _ in got if s is not None], dtype=float)
        rows.append({
            "param": param,
            "value": repr(float(value)),
            "auroc_mean": repr(float(scores.mean())) if scores.size else "",
            "auroc_std": repr(float(scores.std())) if scores.size else "",
            "action_mse": repr(float(np.mean([m for _, m in got]))),
        })
    return rows


def cmd_sweep(args, out: Outputs) -> dict:
    run = load_config(args)
    param = SWEEP_ALIASES.get(args.param, args.param)
    if param not in SWEEP_GRIDS:
        raise CliError(f"cannot sweep {args.param!r}; choose from {sorted(SWEEP_GRIDS)} or aliases {sorted(SWEEP_ALIASES)}")
    values = args.values if args.values else SWEEP_GRIDS[param]
    if args.seeds < 1 or args.workers < 1:
        raise CliError("--seeds and --workers must be >= 1")
    runs = [[run.replace(**{param: v, "seed": run.seed + k}).to_dict() for k in range(args.seeds)]
            for v in values]
    flat = [r for group in runs for r in group]
    if args.workers == 1:
        results = [sweep_trial(r) for r in flat]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.workers, mp_context=ctx) as pool:
            results = list(pool.map(sweep_trial, flat))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(sweep_rows(param, values, runs, results))
    out.write_text(args.out, buf.getvalue())
    return {"csv": str(args.out), "trials": len(flat)}


# --- entry point ------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration; explicit flags override it")
    p.add_argument("--seed", type=int)
    if data_flags:
        p.add_argument("--scale", choices=["kura5", "kura10", "kura50"])
        p.add_argument("--mode", choices=["static", "vary"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cail", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="simulate a Kuramoto dataset (JSON lines)")
    _common(p)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model; writes model.ckpt and train_report.json")
    _common(p)
    p.add_argument("--dataset", help="dataset file (generated from the config when omitted)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--vanilla", action="store_true", help="train the ablation without causal modules")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes an EvalReport JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset file (regenerated from the checkpoint config when omitted)")
    p.add_argument("--closed-loop", action="store_true", help="also report closed-loop action error")
    p.add_argument("--out", required=True, help="report file to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dag", help="write DOT and JSON files for every template")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, help="minimum |weight| kept (default from the run config)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="sensitivity sweep over lambda_1 (sparsity) or c0; writes CSV")
    _common(p)
    p.add_argument("--param", required=True, help="sparsity|c0 (aliases: lambda1, c)")
    p.add_argument("--values", type=float, nargs="+", help="override the default decade grid")
    p.add_argument("--seeds", type=int, default=3, help="trials per value, seeds seed..seed+n-1")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--dataset", help="shared dataset file (per-seed generation when omitted)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--vanilla", action="store_true")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_sweep)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("CAIL_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise CliError(f"CAIL_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, not {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return 2 if kind == "usage" else 1


def run_cli(argv: list[str] | None = None) -> int:
    out = Outputs()
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        summary = args.func(args, out)
    except CliError as exc:
        out.rollback()
        return _fail(exc.kind, str(exc))
    except KeyboardInterrupt:
        out.rollback()
        return _fail("interrupted", "interrupted")
    except Exception as exc:  # every failure becomes a JSON error object
        out.rollback()
        extra = {"dump": exc.dump} if getattr(exc, "dump", None) else {}
        return _fail(type(exc).__name__, str(exc), **extra)
    print(json.dumps(summary, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
