"""Shared-directory population store and the asynchronous worker loop.

Every individual lives in a sub-directory named ``<STATE>_<fitness-millis>_<id>``
holding ``dna.json``, ``weights.evow`` and ``meta.json``. Workers coordinate only
through this directory: state changes are single ``rename`` calls, which succeed
for exactly one caller, and every file is written to a temporary name first and
renamed into place. Budgets are enforced with exclusively-created ticket files.
Each worker appends to its own ``events_<worker>.csv``.
"""

from __future__ import annotations

import contextlib
import csv
import enum
import json
import math
import multiprocessing
import os
import random
import re
import shutil
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dna as dna_lib
from . import flops as flops_lib
from . import mutations as mut
from .backend import weights as weights_io
from .compiler import CompileError, compile_dna
from .data import Dataset
from .trainer import TrainingConfig, inherit_weights, train_individual

DNA_FILE = "dna.json"
WEIGHTS_FILE = "weights.evow"
META_FILE = "meta.json"
TICKET_DIR = "tickets"
STOP_FILE = "STOP"
ABANDON_PAUSE = 0.005


class State(str, enum.Enum):
    TRAINING = "TRAINING"
    ALIVE = "ALIVE"
    DEAD = "DEAD"


LEGAL_TRANSITIONS = {
    (State.TRAINING, State.ALIVE),
    (State.TRAINING, State.DEAD),
    (State.ALIVE, State.DEAD),
}


class ConflictError(Exception):
    """Another worker changed the individual first."""


class IllegalTransition(ValueError):
    pass


class PopulationTooSmall(Exception):
    pass


_NAME = re.compile(r"^(TRAINING|ALIVE|DEAD)_(\d{4}|na)_([0-9a-f]+)$")


def fitness_millis(fitness: float | None) -> int | None:
    return None if fitness is None else int(round(fitness * 1000))


@dataclass(frozen=True)
class IndividualRecord:
    individual_id: str
    state: State
    millis: int | None

    @property
    def dirname(self) -> str:
        f = "na" if self.millis is None else f"{self.millis:04d}"
        return f"{self.state.value}_{f}_{self.individual_id}"

    @classmethod
    def parse(cls, name: str) -> "IndividualRecord | None":
        m = _NAME.match(name)
        if not m:
            return None
        millis = None if m.group(2) == "na" else int(m.group(2))
        return cls(m.group(3), State(m.group(1)), millis)


@dataclass
class PopulationConfig:
    setpoint: int = 8
    workers: int | None = None
    mutation_count: int = 1
    # (first budget ticket, mutation count) pairs; overrides mutation_count from that ticket on
    mutation_schedule: list[tuple[int, int]] = field(default_factory=list)
    selection: str = "tournament"  # or "random" for the random-search control
    inheritance: bool = True
    orphan_timeout: float | None = None
    # Lower bound on the derived timeout; millisecond trainings make 10x the median
    # shorter than ordinary scheduling delays.
    orphan_timeout_floor: float = 30.0
    max_elements: int | None = None

    def __post_init__(self):
        if self.setpoint < 1:
            raise ValueError("setpoint must be positive")
        if self.workers is None:
            self.workers = max(1, self.setpoint // 4)
        if self.workers < 1:
            raise ValueError("worker count must be at least 1")
        if self.mutation_count < 1:
            raise ValueError("mutation_count must be at least 1")
        if self.selection not in ("tournament", "random"):
            raise ValueError(f"unknown selection {self.selection!r}")
        self.mutation_schedule = sorted((int(a), int(b)) for a, b in self.mutation_schedule)

    def mutations_at(self, ticket: int) -> int:
        count = self.mutation_count
        for start, n in self.mutation_schedule:
            if ticket >= start:
                count = n
        return count


# -- store -------------------------------------------------------------------------

class Store:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / TICKET_DIR).mkdir(exist_ok=True)

    def records(self, states: Iterable[State] | None = None) -> list[IndividualRecord]:
        wanted = set(states) if states is not None else None
        out = []
        with os.scandir(self.root) as it:
            for entry in it:
                rec = IndividualRecord.parse(entry.name)
                if rec is not None and (wanted is None or rec.state in wanted):
                    out.append(rec)
        out.sort(key=lambda r: r.individual_id)
        return out

    def living(self) -> list[IndividualRecord]:
        return self.records((State.TRAINING, State.ALIVE))

    def path(self, rec: IndividualRecord) -> Path:
        return self.root / rec.dirname

    def find(self, individual_id: str) -> IndividualRecord | None:
        for rec in self.records():
            if rec.individual_id == individual_id:
                return rec
        return None

    def transition(self, rec: IndividualRecord, to_state: State,
                   fitness: float | None = None) -> IndividualRecord:
        """Atomically rename ``rec`` into ``to_state``; ConflictError if it moved first."""
        if (rec.state, to_state) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{rec.state.value} -> {to_state.value}")
        millis = fitness_millis(fitness) if fitness is not None else rec.millis
        new = IndividualRecord(rec.individual_id, to_state, millis)
        try:
            os.rename(self.path(rec), self.path(new))
        except FileNotFoundError as exc:
            raise ConflictError(rec.dirname) from exc
        return new

    def refresh_fitness(self, rec: IndividualRecord, fitness: float) -> IndividualRecord:
        """Rename an ALIVE individual to carry a recomputed fitness (weight resets)."""
        if rec.state != State.ALIVE:
            raise IllegalTransition("only ALIVE individuals carry a refreshable fitness")
        new = IndividualRecord(rec.individual_id, State.ALIVE, fitness_millis(fitness))
        if new != rec:
            try:
                os.rename(self.path(rec), self.path(new))
            except FileNotFoundError as exc:
                raise ConflictError(rec.dirname) from exc
        return new

    def create(self, individual_id: str, dna: dna_lib.Dna, meta: dict) -> IndividualRecord:
        """Publish a new TRAINING individual with its DNA and metadata."""
        tmp = Path(tempfile.mkdtemp(prefix=f".new-{individual_id}-", dir=self.root))
        (tmp / DNA_FILE).write_bytes(dna_lib.serialize(dna))
        _write_json(tmp / META_FILE, meta)
        rec = IndividualRecord(individual_id, State.TRAINING, None)
        os.rename(tmp, self.path(rec))
        return rec

    def read_dna(self, rec: IndividualRecord) -> dna_lib.Dna:
        try:
            return dna_lib.deserialize((self.path(rec) / DNA_FILE).read_bytes())
        except FileNotFoundError as exc:
            raise ConflictError(rec.dirname) from exc

    def read_meta(self, rec: IndividualRecord) -> dict:
        try:
            return json.loads((self.path(rec) / META_FILE).read_text())
        except FileNotFoundError as exc:
            raise ConflictError(rec.dirname) from exc

    def read_weights(self, rec: IndividualRecord) -> weights_io.WeightBundle:
        try:
            return weights_io.load(self.path(rec) / WEIGHTS_FILE)
        except FileNotFoundError as exc:
            raise ConflictError(rec.dirname) from exc

    def write_meta(self, rec: IndividualRecord, meta: dict) -> None:
        try:
            _write_json(self.path(rec) / META_FILE, meta)
        except FileNotFoundError as exc:
            raise ConflictError(rec.dirname) from exc

    def update_meta(self, individual_id: str, **updates) -> bool:
        """Merge ``updates`` into the metadata wherever the individual currently lives."""
        for _ in range(5):
            rec = self.find(individual_id)
            if rec is None:
                return False
            try:
                meta = self.read_meta(rec)
                meta.update(updates)
                self.write_meta(rec, meta)
                return True
            except ConflictError:
                continue
        return False

    # tickets ----------------------------------------------------------------------

    def take_ticket(self, kind: str, limit: int | None) -> int | None:
        """Exclusively claim the lowest free ticket number below ``limit``."""
        d = self.root / TICKET_DIR
        k = sum(1 for name in os.listdir(d) if name.startswith(kind + "_"))
        k = max(0, k - 64)  # listings can be stale; probe a little below the count
        while limit is None or k < limit:
            try:
                fd = os.open(d / f"{kind}_{k:08d}", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                k += 1
                continue
            os.close(fd)
            return k
        return None

    def tickets_taken(self, kind: str) -> int:
        return sum(1 for name in os.listdir(self.root / TICKET_DIR) if name.startswith(kind + "_"))

    def stop_requested(self) -> bool:
        return (self.root / STOP_FILE).exists()


def _write_json(path: Path, doc: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".json-")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def transition_state(store: Store, rec: IndividualRecord, from_state: State,
                     to_state: State, fitness: float | None = None) -> IndividualRecord:
    if rec.state != from_state:
        raise IllegalTransition(f"record is {rec.state.value}, caller expected {from_state.value}")
    return store.transition(rec, to_state, fitness)


def select_random_pair(view: Sequence[IndividualRecord], rng: random.Random
                       ) -> tuple[IndividualRecord, IndividualRecord]:
    if len(view) < 2:
        raise PopulationTooSmall(len(view))
    a, b = rng.sample(list(view), 2)
    return a, b


# -- event log ---------------------------------------------------------------------

EVENT_FIELDS = ("timestamp", "worker", "seq", "action", "individual_id", "other_id",
                "fitness", "other_fitness", "details")


class EventLog:
    def __init__(self, root: Path, worker: str):
        self.path = root / f"events_{worker}.csv"
        self.worker = worker
        self.seq = 0
        new = not self.path.exists()
        self._f = self.path.open("a", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(EVENT_FIELDS)
            self._f.flush()

    def write(self, action: str, individual_id: str = "", other_id: str = "",
              fitness: float | None = None, other_fitness: float | None = None,
              timestamp: float | None = None, **details) -> None:
        self._w.writerow([repr(time.time() if timestamp is None else timestamp), self.worker,
                          self.seq, action, individual_id, other_id,
                          "" if fitness is None else repr(fitness),
                          "" if other_fitness is None else repr(other_fitness),
                          json.dumps(details, sort_keys=True) if details else ""])
        self._f.flush()
        self.seq += 1

    def close(self) -> None:
        self._f.close()


@dataclass(frozen=True)
class Event:
    timestamp: float
    worker: str
    seq: int
    action: str
    individual_id: str
    other_id: str
    fitness: float | None
    other_fitness: float | None
    details: dict


def read_events(root: str | os.PathLike) -> list[Event]:
    """Every worker's events merged in timestamp order."""
    out = []
    for path in sorted(Path(root).glob("events_*.csv")):
        with path.open(newline="") as f:
            for row in csv.DictReader(f):
                out.append(Event(
                    float(row["timestamp"]), row["worker"], int(row["seq"]), row["action"],
                    row["individual_id"], row["other_id"],
                    float(row["fitness"]) if row["fitness"] else None,
                    float(row["other_fitness"]) if row["other_fitness"] else None,
                    json.loads(row["details"]) if row["details"] else {}))
    out.sort(key=lambda e: (e.timestamp, e.worker, e.seq))
    return out


# State changes recorded in the log, as (action, from, to).
_LOGGED_TRANSITIONS = {
    "create": (None, State.TRAINING),
    "alive": (State.TRAINING, State.ALIVE),
    "kill": (State.ALIVE, State.DEAD),
    "reap": (State.TRAINING, State.DEAD),
    "reset": (State.ALIVE, State.ALIVE),
}


@dataclass
class AuditReport:
    events: int = 0
    illegal_transitions: list[str] = field(default_factory=list)
    double_kills: list[str] = field(default_factory=list)
    lineage_violations: list[str] = field(default_factory=list)
    directory_mismatches: list[str] = field(default_factory=list)
    min_population_after_warmup: int | None = None
    max_population: int = 0
    kills: int = 0
    trained: int = 0

    def ok(self, upper_bound: int) -> bool:
        return (not self.illegal_transitions and not self.double_kills
                and not self.lineage_violations and not self.directory_mismatches
                and self.max_population <= upper_bound
                and (self.min_population_after_warmup is None
                     or self.min_population_after_warmup >= 1))


def audit(root: str | os.PathLike, setpoint: int) -> AuditReport:
    """Replay the merged event log and check it against the protocol."""
    events = read_events(root)
    rep = AuditReport(events=len(events))
    state: dict[str, State] = {}
    deaths: dict[str, int] = {}
    living = alive_count = 0
    warm = False
    # The parent of a new individual must have been ALIVE when its files were read.
    history: dict[str, list[tuple[float, State]]] = {}
    for ev in events:
        if ev.action not in _LOGGED_TRANSITIONS:
            continue
        src, dst = _LOGGED_TRANSITIONS[ev.action]
        iid = ev.individual_id
        cur = state.get(iid)
        if cur != src:
            rep.illegal_transitions.append(
                f"{ev.action} {iid}: {cur and cur.value} -> {dst.value}")
        if ev.action == "create":
            parent = ev.details.get("parent")
            if parent:
                when = ev.details.get("parent_time", ev.timestamp)
                if _state_at(history.get(parent, []), when) != State.ALIVE:
                    rep.lineage_violations.append(f"{iid} parent {parent}")
        if dst == State.DEAD:
            deaths[iid] = deaths.get(iid, 0) + 1
            if deaths[iid] > 1:
                rep.double_kills.append(iid)
        if ev.action == "kill":
            rep.kills += 1
        if ev.action == "alive":
            rep.trained += 1
        was_living = cur in (State.TRAINING, State.ALIVE)
        now_living = dst in (State.TRAINING, State.ALIVE)
        living += int(now_living) - int(was_living)
        state[iid] = dst
        history.setdefault(iid, []).append((ev.timestamp, dst))
        rep.max_population = max(rep.max_population, living)
        alive_count += int(dst == State.ALIVE) - int(cur == State.ALIVE)
        if not warm and alive_count >= min(setpoint, 2):
            warm = True
        if warm:
            rep.min_population_after_warmup = (living if rep.min_population_after_warmup is None
                                               else min(rep.min_population_after_warmup, living))
    on_disk = {r.individual_id: r.state for r in Store(root).records()}
    for iid, s in state.items():
        # A TRAINING entry may have been published after the last logged event.
        if iid in on_disk and on_disk[iid] != s and not (
                s == State.TRAINING and on_disk[iid] in (State.ALIVE, State.DEAD)):
            rep.directory_mismatches.append(f"{iid}: log {s.value}, disk {on_disk[iid].value}")
    return rep


def _state_at(history: list[tuple[float, State]], when: float) -> State | None:
    cur = None
    for t, s in history:
        if t > when:
            break
        cur = s
    return cur


# -- worker ------------------------------------------------------------------------

class StepOutcome(str, enum.Enum):
    CREATED = "created"
    REPRODUCED = "reproduced"
    KILLED = "killed"
    ABANDONED = "abandoned"
    STOP = "stop"


@dataclass
class RunLimits:
    budget_individuals: int | None = None
    deadline: float | None = None  # time.time() value


class Worker:
    """One asynchronous member of the worker pool."""

    def __init__(self, root: str | os.PathLike, name: str, pop: PopulationConfig,
                 training: TrainingConfig, dataset: Dataset, seed: int,
                 limits: RunLimits | None = None):
        if dataset.test is not None:
            raise ValueError("workers take the evolution view of a dataset (no test split)")
        self.store = Store(root)
        self.name = name
        self.pop = pop
        self.training = training
        self.dataset = dataset
        self.limits = limits or RunLimits()
        self.rng = random.Random(seed)
        self.np_rng = np.random.default_rng(seed)
        self.events = EventLog(self.store.root, name)
        self.train_durations: list[float] = []
        self._flops_path = self.store.root / f"flops_{name}.csv"
        self._metrics_path = self.store.root / f"training_{name}.csv"

    # -- helpers --------------------------------------------------------------------

    def _orphan_timeout(self) -> float:
        if self.pop.orphan_timeout is not None:
            return self.pop.orphan_timeout
        if not self.train_durations:
            return math.inf
        return max(self.pop.orphan_timeout_floor, 10.0 * statistics.median(self.train_durations))

    def _fitness(self, rec: IndividualRecord) -> float:
        return float(self.store.read_meta(rec)["fitness"])

    def _rank(self, a: IndividualRecord, b: IndividualRecord
              ) -> tuple[IndividualRecord, IndividualRecord, float, float]:
        """(better, worse, better fitness, worse fitness)."""
        fa, fb = self._fitness(a), self._fitness(b)
        if self.pop.selection == "random":
            if self.rng.random() < 0.5:
                return a, b, fa, fb
            return b, a, fb, fa
        if (fa, a.individual_id) > (fb, b.individual_id):
            return a, b, fa, fb
        return b, a, fb, fa

    def _stopping(self) -> bool:
        if self.store.stop_requested():
            return True
        return self.limits.deadline is not None and time.time() >= self.limits.deadline

    # -- the loop -------------------------------------------------------------------

    def step(self) -> StepOutcome:
        if self._stopping():
            return StepOutcome.STOP
        if self.store.tickets_taken("init") < self.pop.setpoint:
            slot = self.store.take_ticket("init", self.pop.setpoint)
            if slot is not None:
                return self._create_initial()
        view = self.store.living()
        try:
            a, b = select_random_pair(view, self.rng)
        except PopulationTooSmall:
            if not any(r.state == State.TRAINING for r in view):
                return self._create_initial()
            time.sleep(ABANDON_PAUSE)
            return StepOutcome.ABANDONED
        training = [r for r in (a, b) if r.state == State.TRAINING]
        if training:
            self._check_orphans(training)
            time.sleep(ABANDON_PAUSE)
            return StepOutcome.ABANDONED
        try:
            better, worse, fb, fw = self._rank(a, b)
        except ConflictError:
            self.events.write("conflict", a.individual_id, b.individual_id, stage="rank")
            return StepOutcome.ABANDONED
        if len(view) >= self.pop.setpoint:
            try:
                self.store.transition(worse, State.DEAD)
            except ConflictError:
                self.events.write("conflict", worse.individual_id, stage="kill")
                return StepOutcome.ABANDONED
            self.events.write("tournament", better.individual_id, worse.individual_id, fb, fw,
                              outcome="kill")
            self.events.write("kill", worse.individual_id, better.individual_id, fw, fb)
            return StepOutcome.KILLED
        self.events.write("tournament", better.individual_id, worse.individual_id, fb, fw,
                          outcome="reproduce")
        return self._reproduce(better, fb)

    def run(self) -> None:
        try:
            while self.step() != StepOutcome.STOP:
                pass
        finally:
            self.events.close()

    def _check_orphans(self, records: list[IndividualRecord]) -> None:
        timeout = self._orphan_timeout()
        if not math.isfinite(timeout):
            return
        for rec in records:
            try:
                created = float(self.store.read_meta(rec)["created"])
            except (ConflictError, KeyError, ValueError):
                continue
            if time.time() - created > timeout:
                try:
                    self.store.transition(rec, State.DEAD)
                except ConflictError:
                    continue
                self.events.write("reap", rec.individual_id, age=time.time() - created)

    def _create_initial(self) -> StepOutcome:
        ticket = self.store.take_ticket("budget", self.limits.budget_individuals)
        if ticket is None:
            return StepOutcome.STOP
        child = dna_lib.new_initial_dna(self.dataset.spec.num_classes, self.rng)
        self._train_and_publish(child, ticket, parent=None, parent_time=None, inherited=None,
                                kinds=[], weight_action=mut.WeightAction.INHERIT_NONE)
        return StepOutcome.CREATED

    def _reproduce(self, parent: IndividualRecord, parent_fitness: float) -> StepOutcome:
        read_time = time.time()
        try:
            parent_dna = self.store.read_dna(parent)
            parent_weights = self.store.read_weights(parent) if self.pop.inheritance else None
        except ConflictError:
            self.events.write("conflict", parent.individual_id, stage="reproduce")
            return StepOutcome.ABANDONED
        # Taken only once the parent is in hand, so every ticket yields a child.
        ticket = self.store.take_ticket("budget", self.limits.budget_individuals)
        if ticket is None:
            return StepOutcome.STOP
        outcome = mut.reproduce(parent_dna, self.pop.mutations_at(ticket), self.rng)
        inherited = None
        if self.pop.inheritance and outcome.weight_action != mut.WeightAction.INHERIT_NONE:
            inherited = parent_weights
        self._train_and_publish(outcome.child_dna, ticket, parent=parent.individual_id,
                                parent_time=read_time, inherited=inherited,
                                kinds=[k.value for k in outcome.kinds],
                                weight_action=outcome.weight_action)
        return StepOutcome.REPRODUCED

    def _train_and_publish(self, child: dna_lib.Dna, ticket: int, parent: str | None,
                           parent_time: float | None, inherited, kinds: list[str],
                           weight_action: mut.WeightAction) -> None:
        iid = dna_lib.random_id(self.rng)
        created = time.time()
        meta = {"id": iid, "parent": parent, "mutations": kinds,
                "weight_action": weight_action.value, "created": created,
                "worker": self.name, "ticket": ticket, "fitness": None, "keep": False,
                "resets": 0}
        # Log times are taken before each rename, so no later event can precede them.
        t_create = time.time()
        rec = self.store.create(iid, child, meta)
        details = {"ticket": ticket, "mutations": kinds}
        if parent is not None:
            details.update(parent=parent, parent_time=parent_time)
        self.events.write("create", iid, parent or "", timestamp=t_create, **details)

        result = train_dna(child, inherited, self.dataset, self.training, self.np_rng,
                           self.pop.max_elements, iid)
        self.train_durations.append(result.seconds)
        meta.update(fitness=result.fitness, final_loss=result.final_loss,
                    train_seconds=result.seconds, steps=result.steps,
                    inherited_slots=len(result.inherited), failure=result.failure)
        try:
            weights_io.save(result.weights, self.store.path(rec) / WEIGHTS_FILE)
            self.store.write_meta(rec, meta)
            alive_time = time.time()
            alive_rec = self.store.transition(rec, State.ALIVE, result.fitness)
        except (ConflictError, FileNotFoundError):
            self.events.write("conflict", iid, stage="publish")
            return
        self.events.write("alive", iid, parent or "", result.fitness, timestamp=alive_time,
                          seconds=result.seconds, steps=result.steps, ticket=ticket)
        flops_lib.append_ledger(self._flops_path, result.flops)
        _append_metrics(self._metrics_path, iid, result)
        # Record holders keep their weights through garbage collection.
        others = [r.millis for r in self.store.records((State.ALIVE, State.DEAD))
                  if r.individual_id != iid and r.millis is not None]
        updates = {"alive_time": alive_time}
        if not others or alive_rec.millis >= max(others):
            updates["keep"] = True
        self.store.update_meta(iid, **updates)


@dataclass
class TrainedDna:
    weights: weights_io.WeightBundle
    fitness: float
    final_loss: float
    seconds: float
    steps: int
    inherited: list[str]
    failure: str | None
    flops: flops_lib.FlopsEstimate


def train_dna(child: dna_lib.Dna, inherited, dataset: Dataset, config: TrainingConfig,
              rng: np.random.Generator, max_elements: int | None = None,
              individual_id: str = "") -> TrainedDna:
    """Compile and train; models that cannot be built get fitness 0."""
    start = time.perf_counter()
    kwargs = {} if max_elements is None else {"max_elements": max_elements}
    n_val = len(dataset.validation)
    try:
        model = compile_dna(child, dataset.spec.input_shape, dataset.spec.num_classes, **kwargs)
    except CompileError as exc:
        return TrainedDna({}, 0.0, float("nan"), time.perf_counter() - start, 0, [],
                          f"compile: {exc}",
                          flops_lib.estimate(individual_id, None, config.batch_size,
                                             config.steps, n_val))
    carried = inherit_weights(inherited, model) if inherited else None
    with np.errstate(all="ignore"):
        result = train_individual(model, carried, dataset, config, rng)
    return TrainedDna(result.weights, result.fitness.validation_accuracy, result.final_loss,
                      result.seconds, result.steps, result.inherited, result.failure,
                      flops_lib.estimate(individual_id, model, config.batch_size,
                                         config.steps, n_val))


METRIC_FIELDS = ("individual_id", "wall_time", "steps", "final_loss", "fitness")


def _append_metrics(path: Path, iid: str, result: TrainedDna) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(METRIC_FIELDS)
        w.writerow([iid, repr(result.seconds), result.steps, repr(result.final_loss),
                    repr(result.fitness)])


# -- supervisor --------------------------------------------------------------------

def _worker_main(root, name, pop, training, dataset, seed, limits) -> None:
    Worker(root, name, pop, training, dataset, seed, limits).run()


def worker_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_workers(root: str | os.PathLike, pop: PopulationConfig, training: TrainingConfig,
                dataset: Dataset, seed: int, limits: RunLimits,
                mode: str = "processes") -> None:
    """Run ``pop.workers`` workers against ``root`` until the limits stop them."""
    dataset = dataset.for_evolution()
    store = Store(root)
    with contextlib.suppress(FileNotFoundError):
        (store.root / STOP_FILE).unlink()
    if limits.budget_individuals is not None and limits.budget_individuals <= 0:
        return
    names = [f"w{i:02d}" for i in range(pop.workers)]
    args = [(str(store.root), n, pop, training, dataset, worker_seed(seed, i), limits)
            for i, n in enumerate(names)]
    if mode == "inline" or (mode == "threads" and pop.workers == 1):
        for a in args:
            _worker_main(*a)
        return
    if mode == "threads":
        errors: list[BaseException] = []

        def target(*a):
            try:
                _worker_main(*a)
            except BaseException as exc:  # surfaced below
                errors.append(exc)
                (store.root / STOP_FILE).touch()

        threads = [threading.Thread(target=target, args=a, daemon=True) for a in args]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return
    if mode != "processes":
        raise ValueError(f"unknown worker mode {mode!r}")
    ctx = multiprocessing.get_context("fork")
    procs = [ctx.Process(target=_worker_main, args=a, daemon=True) for a in args]
    for p in procs:
        p.start()
    failed = []
    for p in procs:
        p.join()
        if p.exitcode != 0:
            failed.append(p.exitcode)
            (store.root / STOP_FILE).touch()
    if failed:
        raise RuntimeError(f"{len(failed)} worker(s) exited abnormally: {failed}")


def reset_weights(root: str | os.PathLike, training: TrainingConfig, dataset: Dataset,
                  seed: int, max_elements: int | None = None) -> int:
    """Retrain every ALIVE individual from fresh weights, keeping its architecture.

    Run between worker phases so no individual is in flight. Returns the number of
    individuals reset.
    """
    dataset = dataset.for_evolution()
    store = Store(root)
    rng = np.random.default_rng(seed)
    events = EventLog(store.root, "reset")
    count = 0
    try:
        for rec in store.records((State.ALIVE,)):
            dna = store.read_dna(rec)
            meta = store.read_meta(rec)
            result = train_dna(dna, None, dataset, training, rng, max_elements, rec.individual_id)
            # The pre-reset weights stay available to reports as generation ``resets``.
            with contextlib.suppress(FileNotFoundError):
                os.replace(store.path(rec) / WEIGHTS_FILE,
                           store.path(rec) / f"weights.gen{int(meta.get('resets', 0))}.evow")
            weights_io.save(result.weights, store.path(rec) / WEIGHTS_FILE)
            meta.update(fitness=result.fitness, final_loss=result.final_loss,
                        resets=int(meta.get("resets", 0)) + 1,
                        fitness_before_reset=meta.get("fitness"))
            store.write_meta(rec, meta)
            store.refresh_fitness(rec, result.fitness)
            events.write("reset", rec.individual_id, fitness=result.fitness,
                         other_fitness=meta["fitness_before_reset"])
            flops_lib.append_ledger(store.root / "flops_reset.csv", result.flops)
            count += 1
    finally:
        events.close()
    return count


def garbage_collect(root: str | os.PathLike, retention: int = 10) -> int:
    """Delete weight files of DEAD individuals beyond the ``retention`` fittest.

    Individuals flagged ``keep`` (validation record holders) are never reclaimed.
    Metadata and DNA files always remain. Idempotent; ALIVE and TRAINING are untouched.
    """
    store = Store(root)
    dead = [r for r in store.records((State.DEAD,))
            if (store.path(r) / WEIGHTS_FILE).exists()]
    dead.sort(key=lambda r: (-(r.millis if r.millis is not None else -1), r.individual_id))
    reclaimed = 0
    for rec in dead[retention:]:
        try:
            if store.read_meta(rec).get("keep"):
                continue
        except (ConflictError, ValueError):
            continue
        for path in store.path(rec).glob("weights*.evow"):
            with contextlib.suppress(FileNotFoundError):
                path.unlink()
        reclaimed += 1
    return reclaimed


def all_meta(root: str | os.PathLike) -> dict[str, dict]:
    """Metadata of every individual, keyed by id, with its current state added."""
    store = Store(root)
    out = {}
    for rec in store.records():
        with contextlib.suppress(ConflictError, ValueError):
            meta = store.read_meta(rec)
            meta["state"] = rec.state.value
            meta["dirname"] = rec.dirname
            out[rec.individual_id] = meta
    return out


def clear(root: str | os.PathLike) -> None:
    """Remove a population directory entirely."""
    shutil.rmtree(root, ignore_errors=True)
