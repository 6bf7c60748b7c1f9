"""Turn a Dna into an executable layer plan with resolved shapes and weight slots."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dna as dna_lib
from .dna import BN_RELU, CONV, Dna, ResolvedShape

DEFAULT_MAX_ELEMENTS = 2 ** 24


class CompileError(Exception):
    pass


class UnresolvableShapeError(CompileError):
    pass


class ModelTooLargeError(CompileError):
    pass


class ReshapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ReshapeDirective:
    """Maps ``source`` onto ``target``.

    ``spatial_log2`` > 0 upsamples by nearest-neighbour replication, < 0 downsamples by
    keeping the top-left element of each block. ``channel_delta`` > 0 appends zero
    channels, < 0 drops trailing channels.
    """

    source: ResolvedShape
    target: ResolvedShape

    @property
    def spatial_log2(self) -> int:
        return self.target.scale - self.source.scale

    @property
    def channel_delta(self) -> int:
        return self.target.depth - self.source.depth

    @property
    def is_identity(self) -> bool:
        return self.source == self.target


def apply_reshape(activations: np.ndarray, directive: ReshapeDirective) -> np.ndarray:
    """Apply a directive to a ``(..., H, W, C)`` array."""
    src = directive.source
    if activations.shape[-3:] != (src.size, src.size, src.depth):
        raise ReshapeMismatchError(
            f"expected trailing shape {(src.size, src.size, src.depth)}, got {activations.shape}")
    out = activations
    k = directive.spatial_log2
    if k > 0:
        f = 2 ** k
        out = np.repeat(np.repeat(out, f, axis=-3), f, axis=-2)
    elif k < 0:
        f = 2 ** (-k)
        out = out[..., ::f, ::f, :]
    d = directive.channel_delta
    if d > 0:
        pad = [(0, 0)] * (out.ndim - 1) + [(0, d)]
        out = np.pad(out, pad)
    elif d < 0:
        out = out[..., : directive.target.depth]
    return np.ascontiguousarray(out)


def reshape_backward(grad: np.ndarray, directive: ReshapeDirective) -> np.ndarray:
    """Gradient of ``apply_reshape`` with respect to its input."""
    src, tgt = directive.source, directive.target
    g = grad
    d = directive.channel_delta
    if d > 0:
        g = g[..., : src.depth]
    elif d < 0:
        pad = [(0, 0)] * (g.ndim - 1) + [(0, -d)]
        g = np.pad(g, pad)
    k = directive.spatial_log2
    if k > 0:
        f = 2 ** k
        lead = g.shape[:-3]
        g = g.reshape(*lead, src.size, f, src.size, f, src.depth).sum(axis=(-4, -2))
    elif k < 0:
        f = 2 ** (-k)
        full = np.zeros(g.shape[:-3] + (src.size, src.size, src.depth), dtype=g.dtype)
        full[..., ::f, ::f, :] = g
        g = full
    assert g.shape[-3:] == (src.size, src.size, src.depth), (g.shape, tgt)
    return np.ascontiguousarray(g)


@dataclass(frozen=True)
class EdgePlan:
    edge_id: str
    from_vertex: str
    to_vertex: str
    edge_type: str
    in_shape: ResolvedShape
    out_shape: ResolvedShape  # after the edge op, before reshaping
    directive: ReshapeDirective
    primary: bool
    init_scale: float
    kernel: tuple[int, int] | None = None  # (height, width)
    stride: int = 1

    @property
    def weight_name(self) -> str:
        return f"{self.edge_id}/conv/weights"


@dataclass(frozen=True)
class VertexPlan:
    vertex_id: str
    shape: ResolvedShape
    vertex_type: str
    leakiness: float
    in_edges: tuple[str, ...]  # primary first, then by id

    def bn_name(self, part: str) -> str:
        return f"{self.vertex_id}/batch_norm/{part}"


@dataclass(frozen=True)
class SlotSpec:
    shape: tuple[int, ...]
    init: str  # "he", "zeros", "ones"
    trainable: bool = True
    decay: bool = False
    init_scale: float = 1.0
    fan_in: int = 1


@dataclass(frozen=True)
class CompiledModel:
    input_vertex: str
    output_vertex: str
    vertices: tuple[VertexPlan, ...]  # topological order
    edges: dict[str, EdgePlan]
    slots: dict[str, SlotSpec]
    input_shape: tuple[int, int, int]
    num_classes: int
    learning_rate: float
    weight_decay_rate: float
    feature_count: int
    vertex_index: dict[str, int] = field(default_factory=dict)

    @property
    def classifier_weights(self) -> str:
        return f"{self.output_vertex}/logits/weights"

    @property
    def classifier_biases(self) -> str:
        return f"{self.output_vertex}/logits/biases"

    def vertex(self, vertex_id: str) -> VertexPlan:
        return self.vertices[self.vertex_index[vertex_id]]

    def trainable_slots(self) -> list[str]:
        return [k for k, s in self.slots.items() if s.trainable]

    def num_trainable_elements(self) -> int:
        return sum(math.prod(s.shape) for s in self.slots.values() if s.trainable)


def input_resolved_shape(input_shape: tuple[int, int, int]) -> ResolvedShape:
    h, w, c = input_shape
    if h != w or h < 1 or h & (h - 1):
        raise CompileError(f"input must be square with a power-of-2 side, got {input_shape}")
    return ResolvedShape(scale=h.bit_length() - 1, depth=c)


def _edge_output(edge: dna_lib.Edge, shape: ResolvedShape, edge_id: str) -> ResolvedShape:
    if edge.edge_type != CONV:
        return shape
    scale = shape.scale - edge.stride_log2()
    if scale < 0:
        raise UnresolvableShapeError(
            f"edge {edge_id}: stride {edge.stride()} shrinks a {shape.size}x{shape.size} map below 1x1")
    return ResolvedShape(scale=scale, depth=edge.depth_out(shape.depth))


def resolve_shapes(dna: Dna, input_shape: ResolvedShape) -> dict[str, ResolvedShape]:
    """Vertex shapes, taken at each vertex from its highest-precedence incoming edge."""
    shapes = {dna.input_vertex_id: input_shape}
    for vid in dna_lib.topological_order(dna):
        if vid == dna.input_vertex_id:
            continue
        primary = dna_lib.primary_in_edge(dna, vid)
        if primary is None:
            raise UnresolvableShapeError(f"vertex {vid} has no inputs")
        edge = dna.edges[primary]
        shapes[vid] = _edge_output(edge, shapes[edge.from_vertex], primary)
    return shapes


def compile_dna(dna: Dna, input_shape: tuple[int, int, int], num_classes: int,
                max_elements: int = DEFAULT_MAX_ELEMENTS) -> CompiledModel:
    problems = dna_lib.validate(dna)
    if problems:
        raise CompileError("invalid Dna: " + "; ".join(problems))
    shapes = resolve_shapes(dna, input_resolved_shape(input_shape))
    order = dna_lib.topological_order(dna)

    edges: dict[str, EdgePlan] = {}
    slots: dict[str, SlotSpec] = {}
    vertices: list[VertexPlan] = []
    for vid in order:
        vertex = dna.vertices[vid]
        shape = shapes[vid]
        if shape.num_elements > max_elements:
            raise ModelTooLargeError(f"vertex {vid} holds {shape.num_elements} elements")
        primary = dna_lib.primary_in_edge(dna, vid)
        incoming = sorted(vertex.edges_in, key=lambda e: (e != primary, e))
        init_scale = 1.0 / math.sqrt(len(incoming)) if incoming else 1.0
        for eid in incoming:
            e = dna.edges[eid]
            src = shapes[e.from_vertex]
            out = _edge_output(e, src, eid)
            if out.num_elements > max_elements:
                raise ModelTooLargeError(f"edge {eid} emits {out.num_elements} elements")
            plan = EdgePlan(
                edge_id=eid,
                from_vertex=e.from_vertex,
                to_vertex=vid,
                edge_type=e.edge_type,
                in_shape=src,
                out_shape=out,
                directive=ReshapeDirective(out, shape),
                primary=eid == primary,
                init_scale=init_scale,
                kernel=(e.filter_height(), e.filter_width()) if e.edge_type == CONV else None,
                stride=e.stride() if e.edge_type == CONV else 1,
            )
            edges[eid] = plan
            if e.edge_type == CONV:
                kh, kw = plan.kernel
                wshape = (kh, kw, src.depth, out.depth)
                if math.prod(wshape) > max_elements:
                    raise ModelTooLargeError(f"edge {eid} filters hold {math.prod(wshape)} elements")
                slots[plan.weight_name] = SlotSpec(
                    wshape, "he", decay=True, init_scale=init_scale, fan_in=kh * kw * src.depth)
        vplan = VertexPlan(vid, shape, vertex.vertex_type, vertex.leakiness, tuple(incoming))
        if vertex.vertex_type == BN_RELU and vid != dna.input_vertex_id:
            d = (shape.depth,)
            slots[vplan.bn_name("gamma")] = SlotSpec(d, "ones")
            slots[vplan.bn_name("beta")] = SlotSpec(d, "zeros")
            slots[vplan.bn_name("moving_mean")] = SlotSpec(d, "zeros", trainable=False)
            slots[vplan.bn_name("moving_variance")] = SlotSpec(d, "ones", trainable=False)
        vertices.append(vplan)

    feature_count = shapes[dna.output_vertex_id].num_elements
    out_id = dna.output_vertex_id
    fc_shape = (feature_count, num_classes)
    if math.prod(fc_shape) > max_elements:
        raise ModelTooLargeError(f"classifier holds {math.prod(fc_shape)} elements")
    slots[f"{out_id}/logits/weights"] = SlotSpec(fc_shape, "he", decay=True, fan_in=feature_count)
    slots[f"{out_id}/logits/biases"] = SlotSpec((num_classes,), "zeros")

    return CompiledModel(
        input_vertex=dna.input_vertex_id,
        output_vertex=out_id,
        vertices=tuple(vertices),
        edges=edges,
        slots=slots,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        learning_rate=dna.learning_rate,
        weight_decay_rate=dna.weight_decay_rate,
        feature_count=feature_count,
        vertex_index={v.vertex_id: i for i, v in enumerate(vertices)},
    )


def describe(model: CompiledModel) -> str:
    """One line per vertex and edge, in execution order."""
    lines = [f"input {model.input_shape[0]}x{model.input_shape[1]}x{model.input_shape[2]}"]
    for v in model.vertices:
        for eid in v.in_edges:
            e = model.edges[eid]
            if e.kernel:
                op = f"conv {e.kernel[0]}x{e.kernel[1]} /{e.stride} -> {e.out_shape.depth}"
            else:
                op = "identity"
            role = "" if e.primary else " (skip)"
            reshape = ""
            if not e.directive.is_identity:
                reshape = f" reshape[x2^{e.directive.spatial_log2}, {e.directive.channel_delta:+d}ch]"
            lines.append(f"  edge {eid[:8]} {e.from_vertex[:8]}->{v.vertex_id[:8]}: {op}{reshape}{role}")
        s = v.shape
        kind = "BN+ReLU" if v.vertex_type == BN_RELU and v.vertex_id != model.input_vertex else "linear"
        lines.append(f"vertex {v.vertex_id[:8]} {s.size}x{s.size}x{s.depth} {kind}")
    lines.append(f"classifier flatten {model.feature_count} -> fc {model.num_classes}")
    return "\n".join(lines)
