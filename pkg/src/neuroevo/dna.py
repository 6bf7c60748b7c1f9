"""Genotype: a directed acyclic graph of activations (vertices) and connections (edges).

Vertices hold activations of shape ``2^s x 2^s x d``; edges are identity maps or
convolutions whose integer parameters are stored as reals and realized by rounding.
The learning rate travels with the graph so that it can evolve too.
"""

from __future__ import annotations

import copy
import heapq
import json
import math
import random
from dataclasses import dataclass, field

LINEAR = "LINEAR"
BN_RELU = "BN_RELU"
VERTEX_TYPES = (LINEAR, BN_RELU)

CONV = "CONV"
IDENTITY = "IDENTITY"
EDGE_TYPES = (CONV, IDENTITY)

# Backbone edges win shape resolution over skip connections.
BACKBONE_PRECEDENCE = 1
SKIP_PRECEDENCE = 0

INITIAL_LEARNING_RATE = 0.1
INITIAL_WEIGHT_DECAY = 0.0001


class DnaError(Exception):
    """Base class for graph editing errors."""


class CycleError(DnaError):
    pass


class DuplicateEdgeError(DnaError):
    pass


class NoMutableLocationError(DnaError):
    pass


class MalformedDnaError(DnaError):
    pass


@dataclass
class Vertex:
    edges_in: set[str] = field(default_factory=set)
    edges_out: set[str] = field(default_factory=set)
    vertex_type: str = LINEAR
    leakiness: float = 0.0
    inputs_mutable: bool = True
    outputs_mutable: bool = True
    properties_mutable: bool = True

    @property
    def fully_mutable(self) -> bool:
        return self.inputs_mutable and self.outputs_mutable and self.properties_mutable


@dataclass
class Edge:
    from_vertex: str
    to_vertex: str
    edge_type: str = IDENTITY
    # Convolution parameters; None on identity edges.
    depth_factor: float | None = None
    filter_half_width: float | None = None
    filter_half_height: float | None = None
    stride_scale: float | None = None
    depth_precedence: int = BACKBONE_PRECEDENCE
    scale_precedence: int = BACKBONE_PRECEDENCE

    def filter_width(self) -> int:
        return 2 * round(self.filter_half_width) + 1

    def filter_height(self) -> int:
        return 2 * round(self.filter_half_height) + 1

    def stride(self) -> int:
        return 2 ** round(self.stride_scale)

    def stride_log2(self) -> int:
        return round(self.stride_scale)

    def depth_out(self, depth_in: int) -> int:
        return max(1, round(self.depth_factor * depth_in))

    @property
    def precedence(self) -> tuple[int, int]:
        return (self.scale_precedence, self.depth_precedence)


@dataclass(frozen=True)
class ResolvedShape:
    """Spatial size ``2^scale x 2^scale`` with ``depth`` channels."""

    scale: int
    depth: int

    @property
    def size(self) -> int:
        return 2 ** self.scale

    @property
    def num_elements(self) -> int:
        return self.size * self.size * self.depth


@dataclass
class Dna:
    learning_rate: float
    weight_decay_rate: float
    vertices: dict[str, Vertex]
    edges: dict[str, Edge]
    input_vertex_id: str
    output_vertex_id: str

    def copy(self) -> Dna:
        return copy.deepcopy(self)

    def has_edge(self, from_id: str, to_id: str) -> bool:
        return any(e.from_vertex == from_id and e.to_vertex == to_id for e in self.edges.values())

    def conv_edge_ids(self) -> list[str]:
        return sorted(k for k, e in self.edges.items() if e.edge_type == CONV)


def random_id(rng: random.Random) -> str:
    """128-bit random hex string used for vertex and edge ids."""
    return f"{rng.getrandbits(128):032x}"


def new_initial_dna(num_classes: int = 10, rng: random.Random | None = None) -> Dna:
    """Single-layer starting point: the input feeds the classifier directly.

    ``num_classes`` only affects the compiled classifier width, not the graph; it is
    accepted here for symmetry with the compiler and validated early.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = rng or random.Random()
    input_id, output_id, edge_id = random_id(rng), random_id(rng), random_id(rng)
    vertices = {
        input_id: Vertex(
            edges_out={edge_id},
            inputs_mutable=False,
            outputs_mutable=True,
            properties_mutable=False,
        ),
        output_id: Vertex(
            edges_in={edge_id},
            inputs_mutable=True,
            outputs_mutable=False,
            properties_mutable=False,
        ),
    }
    edges = {edge_id: Edge(from_vertex=input_id, to_vertex=output_id, edge_type=IDENTITY)}
    return Dna(
        learning_rate=INITIAL_LEARNING_RATE,
        weight_decay_rate=INITIAL_WEIGHT_DECAY,
        vertices=vertices,
        edges=edges,
        input_vertex_id=input_id,
        output_vertex_id=output_id,
    )


def _successors(dna: Dna, vertex_id: str) -> list[str]:
    return [dna.edges[e].to_vertex for e in dna.vertices[vertex_id].edges_out if e in dna.edges]


def descendants(dna: Dna, vertex_id: str) -> set[str]:
    """Vertices reachable from ``vertex_id``, including itself."""
    seen = {vertex_id}
    stack = [vertex_id]
    while stack:
        for nxt in _successors(dna, stack.pop()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def ancestors(dna: Dna, vertex_id: str) -> set[str]:
    seen = {vertex_id}
    stack = [vertex_id]
    while stack:
        v = stack.pop()
        for e in dna.vertices[v].edges_in:
            if e in dna.edges:
                prev = dna.edges[e].from_vertex
                if prev not in seen:
                    seen.add(prev)
                    stack.append(prev)
    return seen


def topological_order(dna: Dna) -> list[str]:
    """Kahn's algorithm; ties between ready vertices go to the smaller id."""
    indegree = {v: 0 for v in dna.vertices}
    for e in dna.edges.values():
        indegree[e.to_vertex] += 1
    ready = [v for v, n in indegree.items() if n == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for edge_id in sorted(dna.vertices[v].edges_out):
            w = dna.edges[edge_id].to_vertex
            indegree[w] -= 1
            if indegree[w] == 0:
                heapq.heappush(ready, w)
    if len(order) != len(dna.vertices):
        raise CycleError("graph contains a cycle")
    return order


def validate(dna: Dna) -> list[str]:
    """Return a list of invariant violations; an empty list means the Dna is valid."""
    problems: list[str] = []
    if not (isinstance(dna.learning_rate, float | int) and math.isfinite(dna.learning_rate)
            and dna.learning_rate > 0):
        problems.append(f"learning_rate must be a positive finite number, got {dna.learning_rate!r}")
    if not (math.isfinite(dna.weight_decay_rate) and dna.weight_decay_rate >= 0):
        problems.append(f"weight_decay_rate must be non-negative, got {dna.weight_decay_rate!r}")
    for name, vid in (("input", dna.input_vertex_id), ("output", dna.output_vertex_id)):
        if vid not in dna.vertices:
            problems.append(f"{name} vertex {vid} does not exist")
    if problems:
        return problems

    for vid, v in dna.vertices.items():
        if v.vertex_type not in VERTEX_TYPES:
            problems.append(f"vertex {vid}: unknown type {v.vertex_type!r}")
        if not (0.0 <= v.leakiness <= 1.0):
            problems.append(f"vertex {vid}: leakiness {v.leakiness} outside [0, 1]")
        for eid in v.edges_in:
            if eid not in dna.edges or dna.edges[eid].to_vertex != vid:
                problems.append(f"vertex {vid}: edges_in lists {eid} which does not end here")
        for eid in v.edges_out:
            if eid not in dna.edges or dna.edges[eid].from_vertex != vid:
                problems.append(f"vertex {vid}: edges_out lists {eid} which does not start here")

    pairs: set[tuple[str, str]] = set()
    for eid, e in dna.edges.items():
        if e.from_vertex not in dna.vertices or e.to_vertex not in dna.vertices:
            problems.append(f"edge {eid}: dangling endpoint")
            continue
        if eid not in dna.vertices[e.from_vertex].edges_out:
            problems.append(f"edge {eid}: missing from edges_out of {e.from_vertex}")
        if eid not in dna.vertices[e.to_vertex].edges_in:
            problems.append(f"edge {eid}: missing from edges_in of {e.to_vertex}")
        if (e.from_vertex, e.to_vertex) in pairs:
            problems.append(f"edge {eid}: duplicate edge {e.from_vertex}->{e.to_vertex}")
        pairs.add((e.from_vertex, e.to_vertex))
        problems.extend(_edge_parameter_problems(eid, e))
    if problems:
        return problems

    if dna.vertices[dna.input_vertex_id].edges_in:
        problems.append("input vertex has incoming edges")
    if dna.vertices[dna.output_vertex_id].edges_out:
        problems.append("output vertex has outgoing edges")
    try:
        topological_order(dna)
    except CycleError:
        problems.append("graph contains a cycle")
        return problems
    on_path = descendants(dna, dna.input_vertex_id) & ancestors(dna, dna.output_vertex_id)
    for vid in sorted(set(dna.vertices) - on_path):
        problems.append(f"vertex {vid} is not on any input-to-output path")
    return problems


def _edge_parameter_problems(eid: str, e: Edge) -> list[str]:
    params = (e.depth_factor, e.filter_half_width, e.filter_half_height, e.stride_scale)
    if e.edge_type == IDENTITY:
        if any(p is not None for p in params):
            return [f"edge {eid}: identity edge carries convolution parameters"]
        return []
    if e.edge_type != CONV:
        return [f"edge {eid}: unknown type {e.edge_type!r}"]
    if any(p is None or not math.isfinite(p) for p in params):
        return [f"edge {eid}: convolution parameters must all be finite numbers"]
    out = []
    if e.depth_factor <= 0:
        out.append(f"edge {eid}: depth_factor must be positive")
    for label, realized in (("width", e.filter_width()), ("height", e.filter_height())):
        if realized < 1 or realized % 2 == 0:
            out.append(f"edge {eid}: filter {label} {realized} must be odd and >= 1")
    if e.stride_scale < 0 or e.stride_log2() < 0:
        out.append(f"edge {eid}: stride_scale must be non-negative")
    return out


def add_edge(dna: Dna, from_id: str, to_id: str, edge_type: str, edge_id: str,
             **params) -> Edge:
    """Register a new edge in place, keeping the vertex edge sets consistent.

    Raises:
        DuplicateEdgeError: an edge already joins the pair.
        CycleError: ``from_id`` is reachable from ``to_id``.
    """
    if from_id not in dna.vertices or to_id not in dna.vertices:
        raise DnaError(f"unknown vertex in {from_id}->{to_id}")
    if edge_id in dna.edges:
        raise DnaError(f"edge id {edge_id} already in use")
    if dna.has_edge(from_id, to_id):
        raise DuplicateEdgeError(f"edge {from_id}->{to_id} already exists")
    if from_id in descendants(dna, to_id):
        raise CycleError(f"edge {from_id}->{to_id} would close a cycle")
    edge = Edge(from_vertex=from_id, to_vertex=to_id, edge_type=edge_type, **params)
    dna.edges[edge_id] = edge
    dna.vertices[from_id].edges_out.add(edge_id)
    dna.vertices[to_id].edges_in.add(edge_id)
    return edge


def remove_edge(dna: Dna, edge_id: str) -> Edge:
    edge = dna.edges.pop(edge_id)
    dna.vertices[edge.from_vertex].edges_out.discard(edge_id)
    dna.vertices[edge.to_vertex].edges_in.discard(edge_id)
    return edge


def primary_in_edge(dna: Dna, vertex_id: str) -> str | None:
    """Incoming edge with the highest precedence; ties go to the smaller edge id."""
    candidates = sorted(dna.vertices[vertex_id].edges_in)
    if not candidates:
        return None
    # max() keeps the first maximal element, so sorted order breaks ties.
    return max(candidates, key=lambda eid: dna.edges[eid].precedence)


def backbone(dna: Dna) -> tuple[list[str], list[str]]:
    """Vertices and edges of the main column, from input to output.

    Walks primary incoming edges backwards from the output vertex.
    """
    vertices = [dna.output_vertex_id]
    edges: list[str] = []
    seen = {dna.output_vertex_id}
    while vertices[-1] != dna.input_vertex_id:
        eid = primary_in_edge(dna, vertices[-1])
        if eid is None:
            raise DnaError(f"backbone broken at vertex {vertices[-1]}")
        prev = dna.edges[eid].from_vertex
        if prev in seen:
            raise CycleError("backbone walk revisited a vertex")
        seen.add(prev)
        edges.append(eid)
        vertices.append(prev)
    vertices.reverse()
    edges.reverse()
    return vertices, edges


def skip_edges(dna: Dna) -> list[str]:
    _, main = backbone(dna)
    main_set = set(main)
    return sorted(eid for eid in dna.edges if eid not in main_set)


def insertion_locations(dna: Dna) -> list[str]:
    """Backbone edges that a new vertex can be spliced into."""
    _, main = backbone(dna)
    return [
        eid for eid in main
        if dna.vertices[dna.edges[eid].from_vertex].outputs_mutable
        and dna.vertices[dna.edges[eid].to_vertex].inputs_mutable
    ]


def excisable_vertices(dna: Dna, edge_type: str | None = None) -> list[str]:
    """Backbone vertices that can be removed together with their incoming backbone edge.

    With ``edge_type`` set, only vertices whose incoming backbone edge has that type.
    """
    verts, main = backbone(dna)
    out = []
    # verts[i] is entered by main[i - 1]
    for i in range(1, len(verts) - 1):
        v = dna.vertices[verts[i]]
        if not v.fully_mutable:
            continue
        if not dna.vertices[verts[i - 1]].outputs_mutable:
            continue
        if edge_type is not None and dna.edges[main[i - 1]].edge_type != edge_type:
            continue
        out.append(verts[i])
    return out


def insert_vertex_pair(dna: Dna, location: str, edge_type: str, vertex_type: str,
                       vertex_id: str, edge_id: str, **edge_params) -> Dna:
    """Splice a new (edge, vertex) pair into the backbone edge ``location``.

    The backbone edge ``a -> b`` becomes ``a -new edge-> v -old edge-> b``, so the old
    edge keeps its id (and its weights) while the new edge gets ``edge_id``.
    """
    if location not in insertion_locations(dna):
        raise NoMutableLocationError(f"{location} is not a mutable backbone edge")
    child = dna.copy()
    old = child.edges[location]
    a = old.from_vertex
    child.vertices[vertex_id] = Vertex(vertex_type=vertex_type)
    child.vertices[a].edges_out.discard(location)
    old.from_vertex = vertex_id
    child.vertices[vertex_id].edges_out.add(location)
    add_edge(child, a, vertex_id, edge_type, edge_id,
             depth_precedence=BACKBONE_PRECEDENCE, scale_precedence=BACKBONE_PRECEDENCE,
             **edge_params)
    return child


def excise_vertex_pair(dna: Dna, vertex_id: str) -> Dna:
    """Remove a backbone vertex and its incoming backbone edge; reconnect the neighbours.

    Skip connections touching the vertex are dropped. Raises NoMutableLocationError if
    the vertex is not excisable.
    """
    if vertex_id not in excisable_vertices(dna):
        raise NoMutableLocationError(f"{vertex_id} cannot be excised")
    child = dna.copy()
    in_edge = primary_in_edge(child, vertex_id)
    a = child.edges[in_edge].from_vertex
    verts, main = backbone(child)
    out_edge = main[verts.index(vertex_id)]
    b = child.edges[out_edge].to_vertex
    v = child.vertices[vertex_id]
    for eid in sorted((v.edges_in | v.edges_out) - {out_edge}):
        remove_edge(child, eid)
    for eid, e in list(child.edges.items()):
        if e.from_vertex == a and e.to_vertex == b:
            remove_edge(child, eid)
    child.vertices[vertex_id].edges_out.discard(out_edge)
    del child.vertices[vertex_id]
    child.edges[out_edge].from_vertex = a
    child.vertices[a].edges_out.add(out_edge)
    return child


def structurally_equal(a: Dna, b: Dna) -> bool:
    return a == b


# -- serialization -------------------------------------------------------------

_FORMAT_KEYS = ("learning_rate", "weight_decay_rate", "input_vertex", "output_vertex",
                "vertices", "edges")


def to_dict(dna: Dna) -> dict:
    return {
        "learning_rate": dna.learning_rate,
        "weight_decay_rate": dna.weight_decay_rate,
        "input_vertex": dna.input_vertex_id,
        "output_vertex": dna.output_vertex_id,
        "vertices": {
            vid: {
                "type": v.vertex_type,
                "leakiness": v.leakiness,
                "edges_in": sorted(v.edges_in),
                "edges_out": sorted(v.edges_out),
                "inputs_mutable": v.inputs_mutable,
                "outputs_mutable": v.outputs_mutable,
                "properties_mutable": v.properties_mutable,
            }
            for vid, v in sorted(dna.vertices.items())
        },
        "edges": {
            eid: {
                "from": e.from_vertex,
                "to": e.to_vertex,
                "type": e.edge_type,
                "depth_factor": e.depth_factor,
                "filter_half_width": e.filter_half_width,
                "filter_half_height": e.filter_half_height,
                "stride_scale": e.stride_scale,
                "depth_precedence": e.depth_precedence,
                "scale_precedence": e.scale_precedence,
            }
            for eid, e in sorted(dna.edges.items())
        },
    }


def from_dict(doc: dict) -> Dna:
    try:
        missing = [k for k in _FORMAT_KEYS if k not in doc]
        if missing:
            raise MalformedDnaError(f"missing keys: {missing}")
        vertices = {
            vid: Vertex(
                edges_in=set(v["edges_in"]),
                edges_out=set(v["edges_out"]),
                vertex_type=v["type"],
                leakiness=float(v["leakiness"]),
                inputs_mutable=bool(v["inputs_mutable"]),
                outputs_mutable=bool(v["outputs_mutable"]),
                properties_mutable=bool(v["properties_mutable"]),
            )
            for vid, v in doc["vertices"].items()
        }
        edges = {
            eid: Edge(
                from_vertex=e["from"],
                to_vertex=e["to"],
                edge_type=e["type"],
                depth_factor=_opt_float(e.get("depth_factor")),
                filter_half_width=_opt_float(e.get("filter_half_width")),
                filter_half_height=_opt_float(e.get("filter_half_height")),
                stride_scale=_opt_float(e.get("stride_scale")),
                depth_precedence=int(e["depth_precedence"]),
                scale_precedence=int(e["scale_precedence"]),
            )
            for eid, e in doc["edges"].items()
        }
        return Dna(
            learning_rate=float(doc["learning_rate"]),
            weight_decay_rate=float(doc["weight_decay_rate"]),
            vertices=vertices,
            edges=edges,
            input_vertex_id=doc["input_vertex"],
            output_vertex_id=doc["output_vertex"],
        )
    except MalformedDnaError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise MalformedDnaError(str(exc)) from exc


def _opt_float(x) -> float | None:
    return None if x is None else float(x)


def serialize(dna: Dna) -> bytes:
    problems = validate(dna)
    if problems:
        raise DnaError("refusing to serialize invalid Dna: " + "; ".join(problems))
    # json writes floats with repr(), the shortest string that round-trips exactly.
    return json.dumps(to_dict(dna), indent=1, allow_nan=False).encode("utf-8")


def deserialize(data: bytes) -> Dna:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedDnaError(f"not a Dna document: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDnaError("top level must be an object")
    dna = from_dict(doc)
    problems = validate(dna)
    if problems:
        raise MalformedDnaError("; ".join(problems))
    return dna
