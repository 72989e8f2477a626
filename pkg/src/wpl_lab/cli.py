"""``wpl-lab`` command line: run experiment suites and write CSV/JSON results.

    wpl-lab two-model --config run.json --out results/
    wpl-lab sweep --seed 3 --out results/
    wpl-lab nas --config search.json --no-wpl
    wpl-lab verify-laplace --out results/

The config file is JSON with optional keys ``seeds``, ``plan`` (two-model and
sweep), ``sweep_counts``, ``search`` (nas) and ``laplace`` (verify-laplace).
Command-line flags override it.  Seeds fan out to worker processes, capped by
the ``WPL_LAB_THREADS`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .laplace import report_passes, verification_report
from .nas import NAS_CSV_COLUMNS, SearchConfig, search
from .trainer import (
    CSV_COLUMNS,
    ExperimentPlan,
    ForgettingRun,
    load_dataset,
    reduction_rate,
    shared_proportion_sweep,
    train_model_a,
    train_model_b,
)

log = logging.getLogger("wpl_lab")

COMMANDS = ("two-model", "sweep", "nas", "verify-laplace")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    plan: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    sweep_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    laplace: dict = field(default_factory=dict)
    with_wpl: bool = True
    out: str = "results"

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        # building the typed configs surfaces bad keys early
        try:
            ExperimentPlan(**self.plan)
            SearchConfig(**self.search)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            for section in (self.plan, self.search):
                path = section.get("dataset", {}).get(key)
                if path is not None and not Path(path).exists():
                    raise ConfigError(f"dataset file not found: {path}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _median(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


# --- jobs (module-level so they pickle for worker processes) --------------


def _two_model_job(args):
    plan_dict, seed, with_wpl = args
    plan = ExperimentPlan(**{**plan_dict, "seed": seed})
    data = load_dataset(plan)
    a = train_model_a(plan, data)
    runs = [train_model_b(plan, a, use_wpl=False, data=data)]
    if with_wpl:
        runs.append(train_model_b(plan, a, use_wpl=True, data=data))
    return seed, a.epochs, a.steps, a.target_accuracy, runs


def _sweep_job(args):
    plan_dict, seed, counts = args
    plan = ExperimentPlan(**{**plan_dict, "seed": seed})
    return seed, shared_proportion_sweep(plan, counts)


def _nas_job(args):
    search_dict, seed, use_wpl = args
    cfg = SearchConfig(**{**search_dict, "seed": seed, "use_wpl": use_wpl})
    return seed, use_wpl, cfg.wpl.warmup_epochs, search(cfg)


def _laplace_job(args):
    opts, seed = args
    report = verification_report(seed=seed, **opts)
    return seed, report


def _fan_out(fn: Callable, jobs: list) -> list:
    workers = max(1, min(len(jobs), int(os.environ.get("WPL_LAB_THREADS", "1") or 1)))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))  # results come back in job order


# --- commands -------------------------------------------------------------


def _run_row(run: ForgettingRun) -> dict:
    return {
        "d": run.d,
        "baseline_acc_A": run.baseline_acc_A,
        "final_acc_A": run.trajectory[-1][1],
        "final_acc_B": run.final_acc_B,
        "steps_per_epoch": run.steps_per_epoch,
        "changed_a_params": run.changed_a_params,
    }


def cmd_two_model(cfg: RunConfig, out: Path) -> tuple[dict, list[str]]:
    files, per_seed = [], []
    results = _fan_out(_two_model_job, [(cfg.plan, s, cfg.with_wpl) for s in cfg.seeds])
    for seed, epochs_a, steps_a, target, runs in results:
        entry = {"seed": seed, "epochs_A": epochs_a, "steps_A": steps_a, "loose_target": target}
        for run in runs:
            name = f"two_model_seed{seed}_{run.variant}.csv"
            write_csv(out / name, CSV_COLUMNS, run.trajectory)
            files.append(name)
            entry[run.variant] = _run_row(run)
        if len(runs) == 2:
            entry["reduction_rate"] = reduction_rate(runs[0], runs[1])
        per_seed.append(entry)
    summary = {
        "seeds": per_seed,
        "median_d_without_wpl": _median(e["without_wpl"]["d"] for e in per_seed),
        "median_d_with_wpl": _median(e["with_wpl"]["d"] for e in per_seed) if cfg.with_wpl else None,
        "median_reduction_rate": _median(e.get("reduction_rate") for e in per_seed) if cfg.with_wpl else None,
        "plan": ExperimentPlan(**cfg.plan).to_dict(),
    }
    return summary, files


def cmd_sweep(cfg: RunConfig, out: Path) -> tuple[dict, list[str]]:
    files, table = [], []
    counts = list(cfg.sweep_counts)
    for seed, runs in _fan_out(_sweep_job, [(cfg.plan, s, counts) for s in cfg.seeds]):
        for k in counts:
            name = f"sweep_seed{seed}_shared{k}.csv"
            write_csv(out / name, CSV_COLUMNS, runs[k].trajectory)
            files.append(name)
            table.append({"seed": seed, "shared_layers": k, **_run_row(runs[k])})
    write_csv(out / "sweep_table.csv", ("seed", "shared_layers", "d", "final_acc_A", "final_acc_B"),
              [(r["seed"], r["shared_layers"], r["d"], r["final_acc_A"], r["final_acc_B"]) for r in table])
    files.append("sweep_table.csv")
    medians = {str(k): _median(r["d"] for r in table if r["shared_layers"] == k) for k in counts}
    summary = {"runs": table, "median_d": medians, "plan": ExperimentPlan(**cfg.plan).to_dict()}
    return summary, files


def cmd_nas(cfg: RunConfig, out: Path) -> tuple[dict, list[str]]:
    variants = (False, True) if cfg.with_wpl else (False,)
    jobs = [(cfg.search, s, v) for s in cfg.seeds for v in variants]
    files, per_seed = [], {}
    for seed, use_wpl, warmup, res in _fan_out(_nas_job, jobs):
        tag = "with_wpl" if use_wpl else "without_wpl"
        name = f"nas_seed{seed}_{tag}.csv"
        write_csv(out / name, NAS_CSV_COLUMNS, res.rows())
        best = {"decisions": res.best.decisions(), "nodes": [list(n) for n in res.best.nodes],
                "final_validation_accuracy": res.best_accuracy, "seed": seed, "variant": tag}
        write_json(out / f"nas_seed{seed}_{tag}_best.json", best)
        files += [name, f"nas_seed{seed}_{tag}_best.json"]
        per_seed.setdefault(seed, {})[tag] = {
            "post_warmup_mean_diff": res.post_warmup_mean_diff(warmup),
            "post_warmup_max_diff": res.post_warmup_max_diff(warmup),
            "mean_reward": float(np.mean(res.rewards)),
            "best_accuracy": res.best_accuracy,
        }
    summary = {"seeds": per_seed, "search": SearchConfig(**cfg.search).to_dict()}
    if cfg.with_wpl:
        pairs = list(per_seed.values())
        summary["mean_diff_lower_with_wpl"] = sum(
            p["with_wpl"]["post_warmup_mean_diff"] < p["without_wpl"]["post_warmup_mean_diff"] for p in pairs)
        summary["max_diff_lower_with_wpl"] = sum(
            p["with_wpl"]["post_warmup_max_diff"] < p["without_wpl"]["post_warmup_max_diff"] for p in pairs)
    return summary, files


def cmd_verify_laplace(cfg: RunConfig, out: Path) -> tuple[dict, list[str]]:
    reports = {}
    ok = True
    for seed, report in _fan_out(_laplace_job, [(cfg.laplace, s) for s in cfg.seeds]):
        passes = report_passes(report)
        ok = ok and all(passes.values())
        reports[str(seed)] = {"report": report, "passes": passes}
    write_json(out / "laplace.json", reports)
    return {"all_pass": ok, "seeds": {k: v["passes"] for k, v in reports.items()}}, ["laplace.json"]


HANDLERS = {
    "two-model": cmd_two_model,
    "sweep": cmd_sweep,
    "nas": cmd_nas,
    "verify-laplace": cmd_verify_laplace,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wpl-lab", description="Multi-model forgetting experiments.")
    p.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="seed (repeatable); overrides the config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-wpl", action="store_true", help="run only the plain variant")
    p.add_argument("--alpha", type=float, help="override alpha0")
    p.add_argument("--lr", type=float, help="override the SGD learning rate")
    p.add_argument("--epochs", type=int, help="override epochs_b (two-model, sweep) or search epochs (nas)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    raw.pop("command", None)
    cfg = RunConfig.from_dict({**raw, "command": args.command})
    if args.seeds:
        cfg.seeds = list(args.seeds)
    if args.out:
        cfg.out = args.out
    if args.no_wpl:
        cfg.with_wpl = False
    plan, srch = dict(cfg.plan), dict(cfg.search)
    if args.alpha is not None:
        for section in (plan, srch):
            section["wpl"] = {**section.get("wpl", {}), "alpha0": args.alpha}
    if args.lr is not None:
        plan["lr"] = srch["lr"] = args.lr
    if args.epochs is not None:
        plan["epochs_b"] = args.epochs
        srch["epochs"] = args.epochs
    cfg.plan, cfg.search = plan, srch
    cfg.validate()
    return cfg


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    manifest = {
        "command": cfg.command,
        "config": cfg.to_dict(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "status": "partial",
        "files": [],
    }
    status = 0
    try:
        summary, files = HANDLERS[cfg.command](cfg, out)
        write_json(out / "summary.json", summary)
        manifest["files"] = files + ["summary.json"]
        manifest["status"] = "complete"
        if cfg.command == "verify-laplace" and not summary["all_pass"]:
            manifest["status"] = "failed-checks"
            status = 1
    except Exception as exc:  # recorded in the manifest, then reported
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"wpl-lab: {manifest['error']}", file=sys.stderr)
        status = 1
    finally:
        manifest["wall_clock_seconds"] = time.time() - started
        write_json(out / "manifest.json", manifest)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command not in COMMANDS:
        parser.print_usage(sys.stderr)
        print(f"wpl-lab: unknown command {args.command!r} (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"wpl-lab: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
