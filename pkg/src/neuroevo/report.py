"""Run reports: the best-so-far curve, lineage, ensembles and rendered output.

Individuals are always ranked by validation accuracy; test accuracy is only
computed for display, after the ranking is fixed.
"""

from __future__ import annotations

import ast
import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import dna as dna_lib
from . import flops as flops_lib
from . import population as pop_lib
from .backend import weights as weights_io
from .compiler import CompileError, compile_dna, describe
from .data import Dataset, Split
from .trainer import evaluate, predict


@dataclass
class SeriesPoint:
    event: int
    wall_time: float
    individual_id: str
    generation: int  # number of weight resets the individual had undergone
    validation_accuracy: float
    test_accuracy: float | None


@dataclass
class IndividualSummary:
    individual_id: str
    parent: str | None
    state: str
    alive_time: float | None
    validation_accuracy: float | None
    test_accuracy: float | None
    mutations: list[str]


@dataclass
class LineageEntry:
    individual_id: str
    mutations: list[str]
    validation_accuracy: float | None
    architecture: str


@dataclass
class RunReport:
    config: dict
    series: list[SeriesPoint] = field(default_factory=list)
    individuals: list[IndividualSummary] = field(default_factory=list)
    best_id: str | None = None
    best_validation: float | None = None
    best_test: float | None = None
    total_flops: int = 0
    lineage: list[LineageEntry] = field(default_factory=list)
    trained_individuals: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def best_by_validation(candidates: Sequence[tuple[str, float]]) -> tuple[str, float] | None:
    """Highest validation accuracy; the earliest entry wins ties."""
    best = None
    for iid, val in candidates:
        if best is None or val > best[1]:
            best = (iid, val)
    return best


def _weights_path(store: pop_lib.Store, iid: str, generation: int, current_generation: int
                  ) -> Path | None:
    rec = store.find(iid)
    if rec is None:
        return None
    base = store.path(rec)
    p = base / (pop_lib.WEIGHTS_FILE if generation == current_generation
                else reset_archive_name(generation))
    return p if p.exists() else None


def reset_archive_name(generation: int) -> str:
    return f"weights.gen{generation}.evow"


def _test_accuracy(store, dataset: Dataset, iid: str, generation: int, current_generation: int,
                   cache: dict) -> float | None:
    key = (iid, generation)
    if key in cache:
        return cache[key]
    acc = None
    path = _weights_path(store, iid, generation, current_generation)
    rec = store.find(iid)
    if path is not None and rec is not None and dataset.test is not None:
        try:
            dna = store.read_dna(rec)
            model = compile_dna(dna, dataset.spec.input_shape, dataset.spec.num_classes)
            weights = weights_io.load(path)
            if all(k in weights for k in model.slots):
                with np.errstate(all="ignore"):
                    acc = evaluate(model, weights, dataset.test)
        except (CompileError, pop_lib.ConflictError, weights_io.WeightFormatError):
            acc = None
    cache[key] = acc
    return acc


def build_report(root: str | os.PathLike, dataset: Dataset, config: dict | None = None,
                 scatter_test: bool = True) -> RunReport:
    """Reconstruct the run from the population directory and its logs.

    The curve follows the individual with the highest validation accuracy that
    became alive at or before each event, and shows that individual's test accuracy.
    """
    root = Path(root)
    report = RunReport(config=dict(config or {}))
    if not root.exists():
        return report
    store = pop_lib.Store(root)
    events = pop_lib.read_events(root)
    metas = pop_lib.all_meta(root)
    start = min((e.timestamp for e in events), default=0.0)
    cache: dict = {}
    generation: dict[str, int] = {}
    best: tuple[str, float, int] | None = None
    points = 0
    for ev in events:
        if ev.action not in ("alive", "reset") or ev.fitness is None:
            continue
        iid = ev.individual_id
        gen = generation.get(iid, -1) + 1 if ev.action == "reset" else 0
        generation[iid] = gen
        if ev.action == "alive":
            report.trained_individuals += 1
        if best is None or ev.fitness > best[1]:
            best = (iid, ev.fitness, gen)
        current = int(metas.get(best[0], {}).get("resets", 0))
        test = _test_accuracy(store, dataset, best[0], best[2], current, cache)
        report.series.append(SeriesPoint(points, ev.timestamp - start, best[0], best[2],
                                         best[1], test))
        points += 1

    living = [(iid, float(m["fitness"])) for iid, m in sorted(metas.items())
              if m.get("fitness") is not None]
    final = best_by_validation(living)
    if final is not None:
        iid, val = final
        assert val == max(v for _, v in living), "best must be chosen by validation"
        report.best_id, report.best_validation = iid, val
        current = int(metas[iid].get("resets", 0))
        report.best_test = _test_accuracy(store, dataset, iid, current, current, cache)
        report.lineage = lineage(root, iid, dataset, metas)

    for iid, m in sorted(metas.items(), key=lambda kv: kv[1].get("created", 0.0)):
        test = None
        if scatter_test and m.get("fitness") is not None:
            cur = int(m.get("resets", 0))
            test = _test_accuracy(store, dataset, iid, cur, cur, cache)
        alive = m.get("alive_time")
        report.individuals.append(IndividualSummary(
            iid, m.get("parent"), m["state"], None if alive is None else alive - start,
            m.get("fitness"), test, list(m.get("mutations", []))))
    report.total_flops = flops_lib.experiment_cost(
        flops_lib.read_ledgers(sorted(root.glob("flops_*.csv"))))
    return report


def lineage(root: str | os.PathLike, individual_id: str, dataset: Dataset | None = None,
            metas: dict | None = None) -> list[LineageEntry]:
    """Ancestors of ``individual_id``, oldest first."""
    store = pop_lib.Store(root)
    metas = metas if metas is not None else pop_lib.all_meta(root)
    chain = []
    cur: str | None = individual_id
    seen = set()
    while cur and cur in metas and cur not in seen:
        seen.add(cur)
        m = metas[cur]
        arch = ""
        rec = store.find(cur)
        if rec is not None:
            try:
                dna = store.read_dna(rec)
                if dataset is not None:
                    arch = describe(compile_dna(dna, dataset.spec.input_shape,
                                                dataset.spec.num_classes))
                else:
                    arch = dna_lib.serialize(dna).decode()
            except (CompileError, pop_lib.ConflictError, dna_lib.DnaError):
                arch = "(not compilable)"
        chain.append(LineageEntry(cur, list(m.get("mutations", [])), m.get("fitness"), arch))
        cur = m.get("parent")
    chain.reverse()
    return chain


# -- ensembles --------------------------------------------------------------------

def majority_vote(predictions: np.ndarray, validation_accuracies: Sequence[float]) -> np.ndarray:
    """Per-example plurality over members' top-1 predictions.

    ``predictions`` is (members, examples). A tie between classes goes to the one
    predicted by the member with the highest validation accuracy among the tied voters.
    """
    predictions = np.asarray(predictions)
    m, n = predictions.shape
    if m == 0:
        raise ValueError("an ensemble needs at least one member")
    order = np.argsort(-np.asarray(validation_accuracies, dtype=float), kind="stable")
    out = np.empty(n, dtype=predictions.dtype)
    for j in range(n):
        classes, counts = np.unique(predictions[:, j], return_counts=True)
        tied = set(classes[counts == counts.max()].tolist())
        for i in order:
            if predictions[i, j] in tied:
                out[j] = predictions[i, j]
                break
    return out


def ensemble_predict(members: Sequence[tuple], split: Split) -> float:
    """Accuracy of the majority vote of ``(model, weights, validation_accuracy)`` members."""
    if not members:
        raise ValueError("an ensemble needs at least one member")
    preds = np.stack([predict(model, w, split.images) for model, w, _ in members])
    vote = majority_vote(preds, [v for _, _, v in members])
    return float(np.mean(vote == split.labels)) if len(split) else 0.0


def select_ensemble(root: str | os.PathLike, dataset: Dataset, size: int) -> list[tuple]:
    """The ``size`` individuals with the highest validation accuracy that still have weights."""
    store = pop_lib.Store(root)
    ranked = []
    for rec in store.records((pop_lib.State.ALIVE, pop_lib.State.DEAD)):
        if not (store.path(rec) / pop_lib.WEIGHTS_FILE).exists():
            continue
        try:
            meta = store.read_meta(rec)
        except pop_lib.ConflictError:
            continue
        if meta.get("fitness") is not None:
            ranked.append((float(meta["fitness"]), rec.individual_id, rec))
    ranked.sort(key=lambda t: (-t[0], t[1]))
    members = []
    for val, _, rec in ranked:
        if len(members) == size:
            break
        try:
            model = compile_dna(store.read_dna(rec), dataset.spec.input_shape,
                                dataset.spec.num_classes)
            weights = store.read_weights(rec)
        except (CompileError, pop_lib.ConflictError):
            continue
        if all(k in weights for k in model.slots):
            members.append((model, weights, val))
    return members


# -- static audit ---------------------------------------------------------------------

_RANKING_CALLS = {"max", "min", "sorted", "sort", "argmax", "argmin", "nlargest", "nsmallest",
                  "best_by_validation"}


def audit_test_selection(package_dir: str | os.PathLike) -> list[str]:
    """Places where a ranking call's key or argument mentions test accuracy."""
    problems = []
    for path in sorted(Path(package_dir).rglob("*.py")):
        tree = ast.parse(path.read_text(), filename=str(path))
        for node in ast.walk(tree):
            if not isinstance(node, ast.Call):
                continue
            fn = node.func
            name = fn.id if isinstance(fn, ast.Name) else fn.attr if isinstance(
                fn, ast.Attribute) else None
            if name not in _RANKING_CALLS:
                continue
            parts = list(node.args) + [kw.value for kw in node.keywords]
            for part in parts:
                if _mentions_test(part):
                    problems.append(f"{path.name}:{node.lineno}: {name}(...) ranks by test data")
                    break
    return problems


def _mentions_test(node: ast.AST) -> bool:
    for sub in ast.walk(node):
        ident = sub.id if isinstance(sub, ast.Name) else sub.attr if isinstance(
            sub, ast.Attribute) else sub.value if isinstance(sub, ast.Constant) else None
        if isinstance(ident, str) and "test" in ident.lower():
            return True
    return False


# -- rendering -------------------------------------------------------------------------

SERIES_FIELDS = ("event", "wall_time", "individual_id", "generation", "validation_accuracy",
                 "test_accuracy")
INDIVIDUAL_FIELDS = ("individual_id", "parent", "state", "alive_time", "validation_accuracy",
                     "test_accuracy", "mutations")


def emit_report(report: RunReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "series": out / "series.csv",
        "individuals": out / "individuals.csv",
        "curve": out / "best_curve.svg",
        "scatter": out / "individuals.svg",
        "lineage": out / "lineage.txt",
        "flops": out / "flops.txt",
        "summary": out / "report.json",
    }
    with paths["series"].open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SERIES_FIELDS)
        for p in report.series:
            w.writerow([p.event, f"{p.wall_time:.3f}", p.individual_id, p.generation,
                        p.validation_accuracy, "" if p.test_accuracy is None else p.test_accuracy])
    with paths["individuals"].open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(INDIVIDUAL_FIELDS)
        for s in report.individuals:
            w.writerow([s.individual_id, s.parent or "", s.state,
                        "" if s.alive_time is None else f"{s.alive_time:.3f}",
                        "" if s.validation_accuracy is None else s.validation_accuracy,
                        "" if s.test_accuracy is None else s.test_accuracy,
                        "|".join(s.mutations)])
    curve = [(p.wall_time, p.test_accuracy) for p in report.series if p.test_accuracy is not None]
    paths["curve"].write_text(svg_plot(curve, "wall time (s)", "test accuracy",
                                       "best individual by validation", line=True))
    alive = [(s.alive_time, s.test_accuracy) for s in report.individuals
             if s.state == "ALIVE" and s.alive_time is not None and s.test_accuracy is not None]
    dead = [(s.alive_time, s.test_accuracy) for s in report.individuals
            if s.state != "ALIVE" and s.alive_time is not None and s.test_accuracy is not None]
    paths["scatter"].write_text(svg_plot(dead, "wall time (s)", "test accuracy", "individuals",
                                         highlight=alive))
    with paths["lineage"].open("w") as f:
        for i, entry in enumerate(report.lineage):
            f.write(f"# {i} {entry.individual_id} mutations={','.join(entry.mutations) or '-'} "
                    f"validation={entry.validation_accuracy}\n{entry.architecture}\n\n")
    paths["flops"].write_text(flops_lib.format_flops(report.total_flops) + "\n")
    summary = {k: v for k, v in report.to_dict().items() if k not in ("individuals", "lineage")}
    summary["total_flops_formatted"] = flops_lib.format_flops(report.total_flops)
    paths["summary"].write_text(json.dumps(summary, indent=1))
    return paths


def svg_plot(points: Sequence[tuple[float, float]], xlabel: str, ylabel: str, title: str,
             line: bool = False, highlight: Sequence[tuple[float, float]] = (),
             width: int = 640, height: int = 400) -> str:
    """A minimal scatter or step plot. Each point is one ``<circle class="marker">``."""
    margin = 50
    everything = list(points) + list(highlight)
    xs = [p[0] for p in everything] or [0.0, 1.0]
    ys = [p[1] for p in everything] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(max(ys), 1.0)
    if x1 == x0:
        x1 = x0 + 1.0

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
             f'stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" '
             f'text-anchor="middle">{escape(ylabel)}</text>']
    if line and len(points) > 1:
        coords = []
        for (xa, ya), (xb, _) in zip(points, points[1:]):
            coords += [f"{sx(xa):.1f},{sy(ya):.1f}", f"{sx(xb):.1f},{sy(ya):.1f}"]
        coords.append(f"{sx(points[-1][0]):.1f},{sy(points[-1][1]):.1f}")
        parts.append(f'<polyline fill="none" stroke="steelblue" points="{" ".join(coords)}"/>')
    for x, y in points:
        parts.append(f'<circle class="marker" cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" '
                     f'fill="gray"/>')
    for x, y in highlight:
        parts.append(f'<circle class="marker alive" cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" '
                     f'fill="crimson"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

