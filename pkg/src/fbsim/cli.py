"""Command-line front end: ``fbsim {config,gen-data,run,sweep,report}``.

Exit codes: 0 success, 1 configuration / I/O error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as config_mod
from .container import atomic_write
from .data import ScenarioKind, heterogeneity_report, make_federated_dataset, save_dataset
from .errors import ConfigError, FbsimError, NumericError
from .orchestrator import read_records, rounds_to_threshold, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'dotted.key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable); wins over the file")


def _load(args, **extra) -> config_mod.ExperimentConfig:
    overrides = config_mod.parse_overrides(args.overrides)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return config_mod.load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("config", help="print the effective configuration")
    _add_config_args(p)
    p.add_argument("--dump", action="store_true", help="print every key with its value (default action)")

    p = sub.add_parser("gen-data", help="generate a synthetic federated dataset and its heterogeneity report")
    _add_config_args(p)
    p.add_argument("--scenario", choices=[s.value for s in ScenarioKind], help="decentralization scenario")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("run", help="run one experiment")
    _add_config_args(p)
    p.add_argument("--out", type=Path, help="run directory (default: out_dir from config)")
    p.add_argument("--dataset", type=str, help="FBSIM1 dataset file (default: generate from data.*)")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run; no-op if complete")

    p = sub.add_parser("sweep", help="run the cartesian product of --grid values")
    _add_config_args(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="config key and the values to sweep (repeatable)")
    p.add_argument("--out", type=Path, required=True, help="parent directory for run directories")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes (capped by FBSIM_THREADS)")
    p.add_argument("--resume", action="store_true", help="resume/skip existing runs")

    p = sub.add_parser("report", help="tabulate finished runs and emit per-round CSV")
    p.add_argument("runs", nargs="+", type=Path, help="run directories")
    p.add_argument("--out", type=Path, required=True, help="directory for table.csv, table.md, rounds.csv")
    p.add_argument("--theta", type=float, action="append", help="micro-F1 threshold for rounds-to-threshold "
                   "(repeatable; default 70)")
    return parser


# -- run-directory lock -----------------------------------------------------

@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(lock.read_text().strip() or 0)
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError, PermissionError):
            lock.unlink(missing_ok=True)  # stale
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        else:
            raise ConfigError(f"{run_dir} is locked by process {pid}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- subcommands ------------------------------------------------------------

def cmd_config(args) -> int:
    sys.stdout.write(config_mod.dumps(_load(args)))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load(args, scenario=args.scenario, seed=args.seed)
    dataset = make_federated_dataset(cfg.synthetic_config(), cfg.scenario_kind)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        save_dataset(dataset, args.out / "dataset.fbsim")
        report = heterogeneity_report(dataset.clients).to_dict()
        report["scenario"] = dataset.scenario.value
        atomic_write(args.out / "report.json", (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    except OSError as exc:
        raise ConfigError(f"cannot write to {args.out}: {exc}") from None
    print(f"wrote {args.out / 'dataset.fbsim'} ({len(dataset.clients)} clients, sizes {dataset.sizes.tolist()}); "
          f"mean JS divergence {report['mean_js_divergence']:.4f}")
    return EXIT_OK


def _execute(cfg: config_mod.ExperimentConfig, run_dir: Path, resume: bool) -> int:
    if cfg.dataset and not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset not found: {cfg.dataset}")
    with run_lock(run_dir):
        result = run_experiment(cfg, resume=resume, run_dir=run_dir)
    last = result.final
    print(f"{run_dir}: {cfg.strategy}/{cfg.scenario} round {last.round} "
          f"f1_micro={last.f1_micro:.2f} f1_macro={last.f1_macro:.2f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args, dataset=args.dataset)
    run_dir = args.out or Path(cfg.out_dir)
    if args.out:
        cfg.out_dir = str(args.out)
    return _execute(cfg, run_dir, args.resume)


def _sweep_job(job) -> tuple[str, int, str]:
    flat, run_dir, resume = job
    try:
        cfg = config_mod.from_flat(flat)
        cfg.out_dir = str(run_dir)
        return str(run_dir), _execute(cfg, Path(run_dir), resume), ""
    except NumericError as exc:
        return str(run_dir), EXIT_DIVERGED, str(exc)
    except (FbsimError, OSError) as exc:
        return str(run_dir), EXIT_CONFIG, str(exc)


def cmd_sweep(args) -> int:
    base = config_mod.to_flat(_load(args))
    axes = []
    for item in args.grid:
        key, _, values = item.partition("=")
        parsed = config_mod.parse_value(values)
        axes.append((key.strip(), parsed if isinstance(parsed, list) else [parsed]))
    jobs = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        flat = dict(base)
        parts = []
        for (key, _), value in zip(axes, combo):
            flat[key] = value
            parts.append(f"{key}-{value}")
        config_mod.from_flat(flat)  # validate before launching anything
        jobs.append((flat, args.out / ("_".join(parts) or "run"), args.resume))
    workers = max(1, min(args.jobs, int(os.environ.get("FBSIM_THREADS", args.jobs))))
    if workers == 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    worst = EXIT_OK
    for run_dir, code, message in results:
        if code:
            print(f"{run_dir}: failed ({message})", file=sys.stderr)
        worst = max(worst, code)
    return worst


def _run_summary(run_dir: Path, thetas: list[float]) -> tuple[dict, list]:
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise ConfigError(f"{run_dir}: no config.txt (not a run directory)")
    cfg = config_mod.from_flat(config_mod.loads(cfg_path.read_text(), str(cfg_path)))
    records = read_records(run_dir / "records.jsonl")
    if len(records) != cfg.rounds:
        raise ConfigError(f"{run_dir}: {len(records)} of {cfg.rounds} rounds recorded (incomplete run)")
    last = records[-1]
    walls = [r.wall_ms_total for r in records if r.wall_ms_per_client is not None]
    row = {
        "run": run_dir.name,
        "strategy": cfg.strategy,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "clients": len(last.loss_per_client),
        "rounds": cfg.rounds,
        "f1_micro": round(last.f1_micro, 4),
        "f1_macro": round(last.f1_macro, 4),
        "floats_up_total": sum(r.floats_up for r in records),
        "mean_local_s_per_round": round(float(np.mean(walls)) / 1000.0, 6) if walls else "",
    }
    for theta in thetas:
        hit = rounds_to_threshold(records, theta)
        row[f"rounds_to_{theta:g}"] = "" if hit is None else hit
    rounds = []
    for r in records:
        rounds.append({
            "run": run_dir.name, "strategy": cfg.strategy, "scenario": cfg.scenario, "seed": cfg.seed,
            "round": r.round, "f1_micro": r.f1_micro, "f1_macro": r.f1_macro,
            "mean_loss": float(np.mean(r.loss_per_client)), "floats_up": r.floats_up, "floats_down": r.floats_down,
            "wall_ms_total": "" if r.wall_ms_total is None else r.wall_ms_total,
        })
    return row, rounds


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _markdown(rows: list[dict]) -> str:
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    lines += ["| " + " | ".join(str(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    thetas = args.theta or [70.0]
    table, per_round = [], []
    for run_dir in args.runs:
        row, rounds = _run_summary(run_dir, thetas)
        table.append(row)
        per_round.extend(rounds)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write(args.out / "table.csv", _csv(table).encode())
    atomic_write(args.out / "rounds.csv", _csv(per_round).encode())
    md = _markdown(table)
    atomic_write(args.out / "table.md", md.encode())
    sys.stdout.write(md)
    return EXIT_OK


COMMANDS = {"config": cmd_config, "gen-data": cmd_gen_data, "run": cmd_run, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"fbsim: run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"fbsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FbsimError, OSError) as exc:
        print(f"fbsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
