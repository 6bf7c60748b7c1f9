"""The fixed mutation set and the reproduction step built on it."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from . import dna as dna_lib
from .dna import BN_RELU, CONV, IDENTITY, LINEAR, SKIP_PRECEDENCE, Dna

MAX_ATTEMPTS = 100


class MutationKind(str, enum.Enum):
    ALTER_LEARNING_RATE = "ALTER_LEARNING_RATE"
    IDENTITY = "IDENTITY"
    RESET_WEIGHTS = "RESET_WEIGHTS"
    INSERT_CONVOLUTION = "INSERT_CONVOLUTION"
    REMOVE_CONVOLUTION = "REMOVE_CONVOLUTION"
    ALTER_STRIDE = "ALTER_STRIDE"
    ALTER_CHANNELS = "ALTER_CHANNELS"
    FILTER_SIZE = "FILTER_SIZE"
    INSERT_ONE_TO_ONE = "INSERT_ONE_TO_ONE"
    ADD_SKIP = "ADD_SKIP"
    REMOVE_SKIP = "REMOVE_SKIP"


ALL_KINDS: tuple[MutationKind, ...] = tuple(MutationKind)


class WeightAction(str, enum.Enum):
    INHERIT_ALL = "INHERIT_ALL"
    INHERIT_NONE = "INHERIT_NONE"
    INHERIT_MATCHING = "INHERIT_MATCHING"


class MutationInapplicable(Exception):
    """The chosen mutation has nothing to act on; the caller should pick another kind."""


class RetriesExhausted(Exception):
    pass


@dataclass
class MutationOutcome:
    child_dna: Dna
    kinds: list[MutationKind]
    weight_action: WeightAction
    # Edge or vertex ids touched by parameter mutations, for logging.
    touched: list[str] = field(default_factory=list)

    @property
    def kind(self) -> MutationKind:
        return self.kinds[-1]


def weight_action_for(kind: MutationKind) -> WeightAction:
    if kind in (MutationKind.IDENTITY, MutationKind.ALTER_LEARNING_RATE):
        return WeightAction.INHERIT_ALL
    if kind == MutationKind.RESET_WEIGHTS:
        return WeightAction.INHERIT_NONE
    return WeightAction.INHERIT_MATCHING


def compose_weight_actions(actions: list[WeightAction]) -> WeightAction:
    if WeightAction.INHERIT_NONE in actions:
        return WeightAction.INHERIT_NONE
    if actions and all(a == WeightAction.INHERIT_ALL for a in actions):
        return WeightAction.INHERIT_ALL
    return WeightAction.INHERIT_MATCHING


def sample_mutation_kind(rng: random.Random) -> MutationKind:
    return rng.choice(ALL_KINDS)


def sample_half_to_twice(value: float, rng: random.Random) -> float:
    """Uniform sample on ``[value / 2, 2 * value]``."""
    if not value > 0:
        raise ValueError(f"value must be positive, got {value}")
    return rng.uniform(value / 2.0, 2.0 * value)


def sample_learning_rate_factor(rng: random.Random) -> float:
    """Factor in [0.5, 2], uniform in log scale."""
    return 2.0 ** rng.uniform(-1.0, 1.0)


def _mutable_conv_edges(dna: Dna) -> list[str]:
    return [
        eid for eid in dna.conv_edge_ids()
        if dna.vertices[dna.edges[eid].from_vertex].outputs_mutable
        and dna.vertices[dna.edges[eid].to_vertex].inputs_mutable
    ]


def _fresh_id(dna: Dna, rng: random.Random) -> str:
    while True:
        new = dna_lib.random_id(rng)
        if new not in dna.vertices and new not in dna.edges:
            return new


def _insert(parent: Dna, rng: random.Random, edge_type: str) -> tuple[Dna, list[str]]:
    locations = dna_lib.insertion_locations(parent)
    if not locations:
        raise MutationInapplicable("no backbone location to insert into")
    location = rng.choice(locations)
    vertex_type = rng.choice((BN_RELU, LINEAR))
    vertex_id = _fresh_id(parent, rng)
    edge_id = _fresh_id(parent, rng)
    params = {}
    if edge_type == CONV:
        params = dict(
            depth_factor=1.0,
            filter_half_width=1.0,
            filter_half_height=1.0,
            stride_scale=rng.choice((0.0, 1.0)),
        )
    child = dna_lib.insert_vertex_pair(parent, location, edge_type, vertex_type,
                                       vertex_id, edge_id, **params)
    return child, [edge_id, vertex_id]


def _remove_convolution(parent: Dna, rng: random.Random) -> tuple[Dna, list[str]]:
    candidates = dna_lib.excisable_vertices(parent, edge_type=CONV)
    if not candidates:
        raise MutationInapplicable("no removable convolution")
    vertex_id = rng.choice(candidates)
    return dna_lib.excise_vertex_pair(parent, vertex_id), [vertex_id]


def _alter_stride(parent: Dna, rng: random.Random) -> tuple[Dna, list[str]]:
    # Half-to-twice on a stored log2 stride of 0 has nowhere to go.
    candidates = [e for e in _mutable_conv_edges(parent) if parent.edges[e].stride_scale > 0]
    if not candidates:
        raise MutationInapplicable("no convolution with a mutable stride")
    eid = rng.choice(candidates)
    child = parent.copy()
    child.edges[eid].stride_scale = sample_half_to_twice(child.edges[eid].stride_scale, rng)
    return child, [eid]


def _alter_channels(parent: Dna, rng: random.Random) -> tuple[Dna, list[str]]:
    candidates = _mutable_conv_edges(parent)
    if not candidates:
        raise MutationInapplicable("no convolution")
    eid = rng.choice(candidates)
    child = parent.copy()
    child.edges[eid].depth_factor = sample_half_to_twice(child.edges[eid].depth_factor, rng)
    return child, [eid]


def _filter_size(parent: Dna, rng: random.Random) -> tuple[Dna, list[str]]:
    candidates = _mutable_conv_edges(parent)
    if not candidates:
        raise MutationInapplicable("no convolution")
    eid = rng.choice(candidates)
    attr = rng.choice(("filter_half_width", "filter_half_height"))
    current = getattr(parent.edges[eid], attr)
    if not current > 0:
        raise MutationInapplicable(f"{attr} of {eid} is zero")
    child = parent.copy()
    setattr(child.edges[eid], attr, sample_half_to_twice(current, rng))
    return child, [eid]


def _add_skip(parent: Dna, rng: random.Random) -> tuple[Dna, list[str]]:
    from_ids = sorted(v for v, x in parent.vertices.items() if x.outputs_mutable)
    to_ids = sorted(v for v, x in parent.vertices.items() if x.inputs_mutable)
    rng.shuffle(from_ids)
    rng.shuffle(to_ids)
    for to_id in to_ids:
        # Anything reachable from the target would close a loop.
        disallowed = dna_lib.descendants(parent, to_id)
        for from_id in from_ids:
            if from_id in disallowed or parent.has_edge(from_id, to_id):
                continue
            child = parent.copy()
            edge_id = _fresh_id(parent, rng)
            dna_lib.add_edge(child, from_id, to_id, IDENTITY, edge_id,
                             depth_precedence=SKIP_PRECEDENCE,
                             scale_precedence=SKIP_PRECEDENCE)
            return child, [edge_id]
    raise MutationInapplicable("no legal pair for a skip connection")


def _remove_skip(parent: Dna, rng: random.Random) -> tuple[Dna, list[str]]:
    candidates = [
        eid for eid in dna_lib.skip_edges(parent)
        if parent.vertices[parent.edges[eid].from_vertex].outputs_mutable
        and parent.vertices[parent.edges[eid].to_vertex].inputs_mutable
    ]
    if not candidates:
        raise MutationInapplicable("no skip connection")
    eid = rng.choice(candidates)
    child = parent.copy()
    dna_lib.remove_edge(child, eid)
    return child, [eid]


def apply_mutation(parent: Dna, kind: MutationKind, rng: random.Random) -> MutationOutcome:
    """Apply one mutation of the given kind to a copy of ``parent``.

    Raises:
        MutationInapplicable: nothing in ``parent`` can be acted on by this kind.
    """
    kind = MutationKind(kind)
    touched: list[str] = []
    if kind == MutationKind.ALTER_LEARNING_RATE:
        child = parent.copy()
        child.learning_rate = parent.learning_rate * sample_learning_rate_factor(rng)
    elif kind in (MutationKind.IDENTITY, MutationKind.RESET_WEIGHTS):
        child = parent.copy()
    elif kind == MutationKind.INSERT_CONVOLUTION:
        child, touched = _insert(parent, rng, CONV)
    elif kind == MutationKind.INSERT_ONE_TO_ONE:
        child, touched = _insert(parent, rng, IDENTITY)
    elif kind == MutationKind.REMOVE_CONVOLUTION:
        child, touched = _remove_convolution(parent, rng)
    elif kind == MutationKind.ALTER_STRIDE:
        child, touched = _alter_stride(parent, rng)
    elif kind == MutationKind.ALTER_CHANNELS:
        child, touched = _alter_channels(parent, rng)
    elif kind == MutationKind.FILTER_SIZE:
        child, touched = _filter_size(parent, rng)
    elif kind == MutationKind.ADD_SKIP:
        child, touched = _add_skip(parent, rng)
    elif kind == MutationKind.REMOVE_SKIP:
        child, touched = _remove_skip(parent, rng)
    else:  # pragma: no cover - enum is closed
        raise ValueError(kind)
    problems = dna_lib.validate(child)
    assert not problems, f"{kind.value} produced an invalid child: {problems}"
    return MutationOutcome(child, [kind], weight_action_for(kind), touched)


def reproduce(parent: Dna, mutation_count: int, rng: random.Random,
              kinds: list[MutationKind] | None = None) -> MutationOutcome:
    """Apply ``mutation_count`` successful mutations in sequence.

    Kinds are drawn uniformly and redrawn whenever one turns out to be inapplicable.
    ``kinds`` forces a fixed sequence instead (no redraws).
    """
    if mutation_count < 1:
        raise ValueError("mutation_count must be >= 1")
    current = parent
    applied: list[MutationKind] = []
    touched: list[str] = []
    for i in range(mutation_count):
        if kinds is not None:
            outcome = apply_mutation(current, kinds[i], rng)
        else:
            for _ in range(MAX_ATTEMPTS):
                try:
                    outcome = apply_mutation(current, sample_mutation_kind(rng), rng)
                    break
                except MutationInapplicable:
                    continue
            else:
                raise RetriesExhausted(f"{MAX_ATTEMPTS} consecutive inapplicable mutations")
        current = outcome.child_dna
        applied.extend(outcome.kinds)
        touched.extend(outcome.touched)
    action = compose_weight_actions([weight_action_for(k) for k in applied])
    return MutationOutcome(current, applied, action, touched)
