"""Experiment configurations and the runs built from them: evolution, the two
controls, escape procedures and meta-parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import data as data_lib
from . import population as pop_lib
from .report import RunReport, build_report, emit_report
from .trainer import TrainingConfig

MODES = ("evolution", "random_search", "no_inheritance")
DEFAULT_CIFAR_DIR = Path(os.environ.get("NEUROEVO_CIFAR_DIR", "~/.cache/neuroevo/cifar"))


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    population: int = 32
    workers: int | None = None
    steps: int = 256
    batch_size: int = 50
    dataset: str = "cifar10"  # cifar10, cifar100, or synthetic:<kind>
    data_dir: str | None = None
    train_subset: int | None = data_lib.DESK_TRAIN_SUBSET
    val_size: int = data_lib.DESK_VAL_SIZE
    synthetic_size: int = 600
    augment: bool | None = None  # None: on for CIFAR, off for synthetic data
    budget_individuals: int | None = 300
    budget_walltime: float | None = None
    mode: str = "evolution"
    mutation_count: int = 1
    mutation_schedule: list[tuple[int, int]] = field(default_factory=list)
    reset_at: list[int] = field(default_factory=list)
    seed: int = 0
    out_dir: str = "runs/experiment"
    worker_mode: str = "processes"
    gc_retention: int | None = 10
    scatter_test: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers is None:
            self.workers = max(1, self.population // 4)
        for name in ("population", "workers", "batch_size", "mutation_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.budget_individuals is not None and self.budget_individuals < 0:
            raise ConfigError("budget_individuals must be non-negative")
        if self.budget_individuals is None and self.budget_walltime is None:
            raise ConfigError("set budget_individuals or budget_walltime")
        self.mutation_schedule = [(int(a), int(b)) for a, b in self.mutation_schedule]
        self.reset_at = sorted(int(r) for r in self.reset_at)
        if self.reset_at and self.budget_individuals is None:
            raise ConfigError("weight resets are placed by trained-individual count")
        if not (self.dataset in data_lib.CIFAR_VARIANTS or self.dataset.startswith("synthetic:")):
            raise ConfigError(f"unknown dataset {self.dataset!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def population_config(self) -> pop_lib.PopulationConfig:
        return pop_lib.PopulationConfig(
            setpoint=self.population, workers=self.workers, mutation_count=self.mutation_count,
            mutation_schedule=list(self.mutation_schedule),
            selection="random" if self.mode == "random_search" else "tournament",
            inheritance=self.mode != "no_inheritance")

    def training_config(self) -> TrainingConfig:
        augment = self.augment
        if augment is None:
            augment = not self.dataset.startswith("synthetic:")
        return TrainingConfig(steps=self.steps, batch_size=self.batch_size, augment=augment)


def load_dataset(config: ExperimentConfig) -> data_lib.Dataset:
    if config.dataset.startswith("synthetic:"):
        kind = config.dataset.split(":", 1)[1]
        if kind not in data_lib.SYNTHETIC_KINDS:
            raise ConfigError(f"unknown synthetic kind {kind!r}")
        return data_lib.synthetic_dataset(kind, config.synthetic_size, config.seed)
    root = Path(config.data_dir).expanduser() if config.data_dir else DEFAULT_CIFAR_DIR.expanduser()
    return data_lib.load_cifar(root, config.dataset, train_subset=config.train_subset,
                               val_size=config.val_size)


def run_experiment(config: ExperimentConfig, dataset: data_lib.Dataset | None = None,
                   emit: bool = True) -> RunReport:
    """Run the configured experiment in ``config.out_dir`` and report on it.

    Weight resets split the run into phases: workers stop once the budget reaches
    a reset point, every ALIVE individual is retrained from fresh weights, then the
    workers resume.
    """
    dataset = dataset if dataset is not None else load_dataset(config)
    out = Path(config.out_dir)
    root = out / "population"
    root.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    pop = config.population_config()
    training = config.training_config()
    deadline = None if config.budget_walltime is None else time.time() + config.budget_walltime
    boundaries = [r for r in config.reset_at
                  if config.budget_individuals is None or r < config.budget_individuals]
    for i, boundary in enumerate(boundaries):
        pop_lib.run_workers(root, pop, training, dataset, config.seed + 7919 * i,
                            pop_lib.RunLimits(boundary, deadline), mode=config.worker_mode)
        pop_lib.reset_weights(root, training, dataset, config.seed + 104729 * (i + 1))
    pop_lib.run_workers(root, pop, training, dataset, config.seed + 7919 * len(boundaries),
                        pop_lib.RunLimits(config.budget_individuals, deadline),
                        mode=config.worker_mode)
    report = build_report(root, dataset, config.to_dict(), scatter_test=config.scatter_test)
    if config.gc_retention is not None:
        pop_lib.garbage_collect(root, config.gc_retention)
    if emit:
        emit_report(report, out / "report")
    return report


def run_evolution(config: ExperimentConfig, **kw) -> RunReport:
    return run_experiment(dataclasses.replace(config, mode="evolution"), **kw)


def run_random_search_control(config: ExperimentConfig, **kw) -> RunReport:
    return run_experiment(dataclasses.replace(config, mode="random_search"), **kw)


def run_no_inheritance_control(config: ExperimentConfig, **kw) -> RunReport:
    return run_experiment(dataclasses.replace(config, mode="no_inheritance"), **kw)


def run_escape_procedures(config: ExperimentConfig, **kw) -> RunReport:
    """Evolution with a mutation-count schedule and/or weight resets."""
    if not config.mutation_schedule and not config.reset_at:
        raise ConfigError("escape runs need --mutation-schedule or --reset-at")
    return run_experiment(dataclasses.replace(config, mode="evolution"), **kw)


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> dict[str, tuple]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def alive_fitness_series(root: str | os.PathLike) -> list[tuple[str, float]]:
    """Mean fitness of the ALIVE individuals after each logged event, replayed from the log.

    Returns (action, mean) pairs, one per event that changes the ALIVE set.
    """
    alive: dict[str, float] = {}
    out = []
    for ev in pop_lib.read_events(root):
        if ev.action in ("alive", "reset") and ev.fitness is not None:
            alive[ev.individual_id] = ev.fitness
        elif ev.action == "kill":
            alive.pop(ev.individual_id, None)
        else:
            continue
        if alive:
            out.append((ev.action, statistics.fmean(alive.values())))
    return out


SWEEP_FIELDS = ("population", "steps", "repeat", "seed", "best_validation", "best_test",
                "total_flops")


def run_sweep(config: ExperimentConfig, populations: list[int], steps: list[int],
              repeats: int = 5, dataset: data_lib.Dataset | None = None) -> list[dict]:
    """Grid over population size and training steps, ``repeats`` seeds per point."""
    dataset = dataset if dataset is not None else load_dataset(config)
    rows = []
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in populations:
        for s in steps:
            for r in range(repeats):
                sub = dataclasses.replace(
                    config, population=p, workers=max(1, p // 4), steps=s,
                    seed=config.seed + r, out_dir=str(out / f"pop{p}_steps{s}_r{r}"))
                rep = run_experiment(sub, dataset=dataset)
                rows.append({"population": p, "steps": s, "repeat": r, "seed": sub.seed,
                             "best_validation": rep.best_validation, "best_test": rep.best_test,
                             "total_flops": rep.total_flops})
    with (out / "sweep.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows
