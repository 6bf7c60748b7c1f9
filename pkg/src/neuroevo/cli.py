"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 dataset error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as data_lib
from . import experiment as exp
from .flops import format_flops
from .report import build_report, emit_report, ensemble_predict, select_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_DATASET = 0, 2, 3


def _schedule(text: str) -> list[tuple[int, int]]:
    """'0:1,100:5,200:1' -> [(0, 1), (100, 5), (200, 1)]."""
    out = []
    for part in filter(None, text.split(",")):
        try:
            start, count = part.split(":")
            out.append((int(start), int(count)))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad schedule entry {part!r}") from exc
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in filter(None, text.split(","))]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") \
            from exc


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of ExperimentConfig fields; flags override it")
    p.add_argument("--population", type=int, help="population size set-point")
    p.add_argument("--workers", type=int, help="worker count (default population/4)")
    p.add_argument("--steps", type=int, help="training steps per individual")
    p.add_argument("--budget-individuals", type=int, help="stop after this many trained")
    p.add_argument("--budget-walltime", type=float, help="stop after this many seconds")
    p.add_argument("--dataset", help="cifar10, cifar100 or synthetic:<kind>")
    p.add_argument("--data-dir", help="directory holding the CIFAR binary files")
    p.add_argument("--train-subset", type=int, help="training examples to keep")
    p.add_argument("--val-size", type=int, help="validation examples held out")
    p.add_argument("--seed", type=int)
    p.add_argument("--mutation-schedule", type=_schedule,
                   help="first-individual:count pairs, e.g. 0:1,100:5,200:1")
    p.add_argument("--reset-at", type=_int_list, help="trained-individual counts for weight resets")
    p.add_argument("--worker-mode", choices=("processes", "threads", "inline"))
    p.add_argument("--out-dir")


_FLAG_FIELDS = {
    "population": "population", "workers": "workers", "steps": "steps",
    "budget_individuals": "budget_individuals", "budget_walltime": "budget_walltime",
    "dataset": "dataset", "data_dir": "data_dir", "train_subset": "train_subset",
    "val_size": "val_size", "seed": "seed", "mutation_schedule": "mutation_schedule",
    "reset_at": "reset_at", "worker_mode": "worker_mode", "out_dir": "out_dir",
}


def build_config(args: argparse.Namespace, mode: str) -> exp.ExperimentConfig:
    doc = {}
    if getattr(args, "config", None):
        doc = exp.ExperimentConfig.load(args.config).to_dict()
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[name] = value
    if "population" in doc and getattr(args, "workers", None) is None and not args.config:
        doc.pop("workers", None)
    doc["mode"] = mode
    return exp.ExperimentConfig.from_dict(doc)


def _print_report(report) -> None:
    print(f"trained individuals: {report.trained_individuals}")
    print(f"best by validation: {report.best_id} validation={report.best_validation} "
          f"test={report.best_test}")
    print(f"total FLOPs: {format_flops(report.total_flops)}")


def cmd_run(args, mode: str) -> int:
    config = build_config(args, mode)
    if args.command == "escape":
        report = exp.run_escape_procedures(config)
    else:
        report = exp.run_experiment(config)
    _print_report(report)
    print(f"report written to {Path(config.out_dir) / 'report'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = build_config(args, "evolution")
    rows = exp.run_sweep(config, args.populations, args.steps_grid, args.repeats)
    for r in rows:
        print(f"population={r['population']} steps={r['steps']} repeat={r['repeat']} "
              f"validation={r['best_validation']} test={r['best_test']}")
    return EXIT_OK


def _run_dir_config(run_dir: Path, args) -> exp.ExperimentConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise exp.ConfigError(f"{run_dir} has no config.json")
    config = exp.ExperimentConfig.load(path)
    if args.data_dir:
        config = dataclasses.replace(config, data_dir=args.data_dir)
    return config


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    config = _run_dir_config(run_dir, args)
    dataset = exp.load_dataset(config)
    report = build_report(run_dir / "population", dataset, config.to_dict())
    paths = emit_report(report, Path(args.out_dir) if args.out_dir else run_dir / "report")
    _print_report(report)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return EXIT_OK


def cmd_ensemble(args) -> int:
    run_dir = Path(args.run_dir)
    config = _run_dir_config(run_dir, args)
    dataset = exp.load_dataset(config)
    members = select_ensemble(run_dir / "population", dataset, args.size)
    if not members:
        print("no individuals with weights available", file=sys.stderr)
        return EXIT_CONFIG
    acc = ensemble_predict(members, dataset.test)
    print(f"ensemble of {len(members)} (selected by validation): test accuracy {acc:.4f}")
    return EXIT_OK


def cmd_fetch(args) -> int:
    try:
        path = data_lib.fetch_cifar(args.data_dir, args.dataset)
    except OSError as exc:
        raise data_lib.DatasetError(f"download failed: {exc}") from exc
    print(f"extracted to {path}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroevo",
                                     description="Evolve image classifiers on a shared directory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("evolve", "run tournament-selection evolution"),
                            ("control-random", "random-search control: selection disabled"),
                            ("control-no-inherit", "control with weight inheritance disabled"),
                            ("escape", "evolution with mutation-rate schedule or weight resets")):
        _run_flags(sub.add_parser(name, help=help_text))
    sweep = sub.add_parser("sweep", help="population size x training steps grid")
    _run_flags(sweep)
    sweep.add_argument("--populations", type=_int_list, default=[2, 8, 32])
    sweep.add_argument("--steps-grid", type=_int_list, default=[32, 128, 512])
    sweep.add_argument("--repeats", type=int, default=5)
    for name, help_text in (("report", "rebuild the report of a finished run"),
                            ("ensemble", "majority-vote ensemble of the best individuals")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("run_dir", help="an experiment --out-dir")
        p.add_argument("--data-dir")
        p.add_argument("--out-dir")
        if name == "ensemble":
            p.add_argument("--size", type=int, default=10)
    fetch = sub.add_parser("fetch-data", help="download CIFAR and verify its checksum")
    fetch.add_argument("--dataset", choices=data_lib.CIFAR_VARIANTS, default="cifar10")
    fetch.add_argument("--data-dir", default=str(exp.DEFAULT_CIFAR_DIR.expanduser()))
    return parser


_MODES = {"evolve": "evolution", "control-random": "random_search",
          "control-no-inherit": "no_inheritance", "escape": "evolution"}


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in _MODES:
            return cmd_run(args, _MODES[args.command])
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "ensemble":
            return cmd_ensemble(args)
        return cmd_fetch(args)
    except exp.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data_lib.DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
