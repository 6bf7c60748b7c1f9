"""Analytic floating-point operation counts.

Per-op conventions:

* elementwise binary and unary ops: one FLOP per output element
* reductions, argmax: one FLOP per input element
* convolution: ``2 * kh * kw * C_in`` per output element
* matrix multiplication: ``2 * M * N * K``
* pooling: window size per output element
* batch norm: 10 per element (statistics, normalization, affine)
* gradients: twice the forward cost for convolution and matmul, equal to it otherwise
* SGD with momentum: 3 per trainable weight element

An individual costs ``F_t * N_t + F_v * N_v``; an experiment is the sum over all of
its individuals. Python integers are unbounded, so totals never overflow.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .compiler import CompiledModel
from .dna import BN_RELU, CONV


class OpKind(str, enum.Enum):
    CONV = "conv"
    MATMUL = "matmul"
    ELEMENTWISE = "elementwise"
    UNARY = "unary"
    REDUCTION = "reduction"
    POOLING = "pooling"
    BATCH_NORM = "batch_norm"
    COMPARISON = "comparison"


class UnknownOpError(ValueError):
    pass


@dataclass(frozen=True)
class OpSpec:
    kind: OpKind
    input_shape: tuple[int, ...] = ()
    output_shape: tuple[int, ...] = ()
    # conv: (kh, kw); pooling: (ph, pw)
    window: tuple[int, int] = (1, 1)
    in_channels: int = 1
    # matmul: (M, N, K)
    mnk: tuple[int, int, int] = (0, 0, 0)


BN_PER_ELEMENT = 10
UPDATE_PER_ELEMENT = 3


def op_flops(spec: OpSpec, include_gradient: bool = False) -> int:
    kind = OpKind(spec.kind) if not isinstance(spec.kind, OpKind) else spec.kind
    out_n = math.prod(spec.output_shape) if spec.output_shape else 0
    in_n = math.prod(spec.input_shape) if spec.input_shape else 0
    if kind == OpKind.CONV:
        fwd = 2 * spec.window[0] * spec.window[1] * spec.in_channels * out_n
        grad = 2 * fwd
    elif kind == OpKind.MATMUL:
        m, n, k = spec.mnk
        fwd = 2 * m * n * k
        grad = 2 * fwd
    elif kind in (OpKind.ELEMENTWISE, OpKind.UNARY, OpKind.COMPARISON):
        fwd = grad = out_n
    elif kind == OpKind.REDUCTION:
        fwd = grad = in_n
    elif kind == OpKind.POOLING:
        fwd = grad = spec.window[0] * spec.window[1] * out_n
    elif kind == OpKind.BATCH_NORM:
        fwd = grad = BN_PER_ELEMENT * out_n
    else:  # pragma: no cover - enum is closed
        raise UnknownOpError(kind)
    return fwd + (grad if include_gradient else 0)


def model_ops(model: CompiledModel, batch_size: int, train: bool) -> list[tuple[OpSpec, bool]]:
    """The ops one batch executes, each paired with whether its gradient is computed."""
    b = batch_size
    ops: list[tuple[OpSpec, bool]] = []
    out_degree = {v.vertex_id: 0 for v in model.vertices}
    for e in model.edges.values():
        out_degree[e.from_vertex] += 1
    for v in model.vertices:
        if v.vertex_id == model.input_vertex:
            continue
        vshape = (b, v.shape.size, v.shape.size, v.shape.depth)
        for eid in v.in_edges:
            e = model.edges[eid]
            if e.edge_type == CONV:
                out = (b, e.out_shape.size, e.out_shape.size, e.out_shape.depth)
                ops.append((OpSpec(OpKind.CONV, output_shape=out, window=e.kernel,
                                   in_channels=e.in_shape.depth), train))
        for _ in range(len(v.in_edges) - 1):
            ops.append((OpSpec(OpKind.ELEMENTWISE, output_shape=vshape), train))
        if v.vertex_type == BN_RELU:
            ops.append((OpSpec(OpKind.BATCH_NORM, output_shape=vshape), train))
            ops.append((OpSpec(OpKind.UNARY, output_shape=vshape), train))
    k = model.num_classes
    ops.append((OpSpec(OpKind.MATMUL, mnk=(b, k, model.feature_count)), train))
    ops.append((OpSpec(OpKind.ELEMENTWISE, output_shape=(b, k)), train))
    if train:
        # Gradients arriving from several consumers are summed.
        for v in model.vertices:
            s = v.shape
            for _ in range(out_degree[v.vertex_id] - 1):
                ops.append((OpSpec(OpKind.ELEMENTWISE, output_shape=(b, s.size, s.size, s.depth)),
                            False))
        ops.append((OpSpec(OpKind.UNARY, output_shape=(b, k)), False))  # softmax
        ops.append((OpSpec(OpKind.UNARY, output_shape=(b,)), False))  # -log p[label]
        ops.append((OpSpec(OpKind.REDUCTION, input_shape=(b,)), False))  # mean
        ops.append((OpSpec(OpKind.ELEMENTWISE, output_shape=(b, k)), False))  # dloss/dlogits
    else:
        ops.append((OpSpec(OpKind.UNARY, output_shape=(b, k)), False))  # softmax
        ops.append((OpSpec(OpKind.REDUCTION, input_shape=(b, k)), False))  # argmax
        ops.append((OpSpec(OpKind.COMPARISON, output_shape=(b,)), False))
        ops.append((OpSpec(OpKind.REDUCTION, input_shape=(b,)), False))  # count correct
    return ops


def model_flops(model: CompiledModel, batch_size: int, mode: str) -> int:
    """FLOPs for one batch in ``mode`` 'train' (forward, backward, update) or 'validate'."""
    if mode not in ("train", "validate"):
        raise ValueError(f"mode must be 'train' or 'validate', got {mode!r}")
    train = mode == "train"
    total = sum(op_flops(spec, grad) for spec, grad in model_ops(model, batch_size, train))
    if train:
        total += UPDATE_PER_ELEMENT * model.num_trainable_elements()
    return total


@dataclass(frozen=True)
class FlopsEstimate:
    individual_id: str
    train_step_flops: int  # F_t
    train_steps: int  # N_t
    validation_batch_flops: int  # F_v
    validation_batches: int  # N_v

    @property
    def individual_cost(self) -> int:
        return (self.train_step_flops * self.train_steps
                + self.validation_batch_flops * self.validation_batches)


def estimate(individual_id: str, model: CompiledModel | None, batch_size: int,
             train_steps: int, validation_examples: int) -> FlopsEstimate:
    """Estimate for one individual; untrainable models (``None``) cost nothing."""
    n_v = math.ceil(validation_examples / batch_size)
    if model is None:
        return FlopsEstimate(individual_id, 0, train_steps, 0, n_v)
    return FlopsEstimate(individual_id, model_flops(model, batch_size, "train"), train_steps,
                         model_flops(model, batch_size, "validate"), n_v)


def experiment_cost(ledger: Iterable[FlopsEstimate]) -> int:
    return sum((e.individual_cost for e in ledger), 0)


LEDGER_FIELDS = ("individual_id", "F_t", "N_t", "F_v", "N_v", "individual_cost")


def append_ledger(path: str | os.PathLike, entry: FlopsEstimate) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(LEDGER_FIELDS)
        w.writerow([entry.individual_id, entry.train_step_flops, entry.train_steps,
                    entry.validation_batch_flops, entry.validation_batches,
                    entry.individual_cost])


def read_ledgers(paths: Iterable[str | os.PathLike]) -> list[FlopsEstimate]:
    out = []
    for path in paths:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                out.append(FlopsEstimate(row["individual_id"], int(row["F_t"]), int(row["N_t"]),
                                         int(row["F_v"]), int(row["N_v"])))
    return out


def format_flops(total: int) -> str:
    """Scientific notation with two significant digits, e.g. ``9.3e19``."""
    if total == 0:
        return "0"
    exponent = len(str(abs(total))) - 1
    mantissa = round(total / 10 ** exponent, 1)
    if mantissa >= 10:
        mantissa /= 10
        exponent += 1
    return f"{mantissa:.1f}e{exponent}"
