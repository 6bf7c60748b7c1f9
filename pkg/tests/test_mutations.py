from __future__ import annotations

import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv_heavy_dna, evolved_dna
from neuroevo import dna as D
from neuroevo import mutations as M

K = M.MutationKind
A = M.WeightAction

# chi-square 0.999 quantiles, from tables
CHI2_999 = {10: 29.59, 15: 37.70, 80: 124.84}


def chi_square(counts, expected):
    return sum((c - e) ** 2 / e for c, e in zip(counts, expected))


def test_eleven_kinds_with_weight_actions():
    assert len(M.ALL_KINDS) == 11
    assert M.weight_action_for(K.IDENTITY) == A.INHERIT_ALL
    assert M.weight_action_for(K.ALTER_LEARNING_RATE) == A.INHERIT_ALL
    assert M.weight_action_for(K.RESET_WEIGHTS) == A.INHERIT_NONE
    others = set(M.ALL_KINDS) - {K.IDENTITY, K.ALTER_LEARNING_RATE, K.RESET_WEIGHTS}
    assert {M.weight_action_for(k) for k in others} == {A.INHERIT_MATCHING}


@pytest.mark.parametrize("actions, expected", [
    ([A.INHERIT_ALL], A.INHERIT_ALL),
    ([A.INHERIT_ALL, A.INHERIT_ALL], A.INHERIT_ALL),
    ([A.INHERIT_ALL, A.INHERIT_MATCHING], A.INHERIT_MATCHING),
    ([A.INHERIT_MATCHING, A.INHERIT_NONE, A.INHERIT_ALL], A.INHERIT_NONE),
])
def test_weight_action_composition(actions, expected):
    assert M.compose_weight_actions(actions) == expected


def test_kind_sampling_is_uniform():
    rng = random.Random(0)
    counts = Counter(M.sample_mutation_kind(rng) for _ in range(22000))
    assert chi_square([counts[k] for k in M.ALL_KINDS], [2000] * 11) < CHI2_999[10]


def test_half_to_twice_mean_and_range():
    rng = random.Random(1)
    xs = [M.sample_half_to_twice(8.0, rng) for _ in range(20000)]
    assert min(xs) >= 4.0 and max(xs) <= 16.0
    # U[4, 16]: mean 10, sd 12/sqrt(12)
    assert abs(sum(xs) / len(xs) - 10.0) < 4 * (12 / math.sqrt(12)) / math.sqrt(len(xs))
    with pytest.raises(ValueError):
        M.sample_half_to_twice(0.0, rng)


def test_learning_rate_factor_is_log_uniform_on_half_to_two():
    rng = random.Random(2)
    logs = [math.log2(M.sample_learning_rate_factor(rng)) for _ in range(16000)]
    assert min(logs) >= -1 and max(logs) <= 1
    bins = Counter(min(int((x + 1) * 8), 15) for x in logs)
    assert chi_square([bins[i] for i in range(16)], [1000] * 16) < CHI2_999[15]


def test_insert_convolution_adds_one_vertex_and_conv_edge():
    d = D.new_initial_dna(10, random.Random(0))
    out = M.apply_mutation(d, K.INSERT_CONVOLUTION, random.Random(1))
    c = out.child_dna
    assert len(c.vertices) == 3 and len(c.edges) == 2
    (conv,) = [e for e in c.edges.values() if e.edge_type == D.CONV]
    assert conv.depth_factor == 1.0 and conv.filter_width() == conv.filter_height() == 3
    assert conv.stride() in (1, 2)
    # the original edge keeps its id
    assert set(d.edges) < set(c.edges)


def test_remove_convolution_inverts_insert():
    d = D.new_initial_dna(10, random.Random(0))
    c = M.apply_mutation(d, K.INSERT_CONVOLUTION, random.Random(1)).child_dna
    back = M.apply_mutation(c, K.REMOVE_CONVOLUTION, random.Random(2)).child_dna
    assert D.structurally_equal(back, d)


@pytest.mark.parametrize("kind", [K.REMOVE_CONVOLUTION, K.ALTER_STRIDE, K.ALTER_CHANNELS,
                                  K.FILTER_SIZE, K.REMOVE_SKIP, K.ADD_SKIP])
def test_inapplicable_on_initial_dna(kind):
    d = D.new_initial_dna(10, random.Random(0))
    with pytest.raises(M.MutationInapplicable):
        M.apply_mutation(d, kind, random.Random(0))


@pytest.mark.parametrize("kind", [K.IDENTITY, K.RESET_WEIGHTS])
def test_identity_and_reset_keep_architecture(kind):
    d = evolved_dna(4, 10)
    out = M.apply_mutation(d, kind, random.Random(0))
    assert D.structurally_equal(out.child_dna, d)
    assert out.child_dna is not d


def test_alter_learning_rate_changes_only_the_rate():
    d = evolved_dna(4, 10)
    c = M.apply_mutation(d, K.ALTER_LEARNING_RATE, random.Random(0)).child_dna
    assert 0.5 <= c.learning_rate / d.learning_rate <= 2.0
    c.learning_rate = d.learning_rate
    assert D.structurally_equal(c, d)


def test_parameter_mutations_touch_one_edge_field():
    d = conv_heavy_dna(0)
    fields = {K.ALTER_STRIDE: {"stride_scale"}, K.ALTER_CHANNELS: {"depth_factor"},
              K.FILTER_SIZE: {"filter_half_width", "filter_half_height"}}
    for kind, allowed in fields.items():
        for seed in range(20):
            out = M.apply_mutation(d, kind, random.Random(seed))
            (eid,) = out.touched
            before, after = vars(d.edges[eid]), vars(out.child_dna.edges[eid])
            changed = {k for k in before if before[k] != after[k]}
            assert len(changed) == 1 and changed <= allowed
            ratio = after[next(iter(changed))] / before[next(iter(changed))]
            assert 0.5 <= ratio <= 2.0


def test_add_skip_never_creates_back_connection():
    d = conv_heavy_dna(1)
    for seed in range(200):
        c = M.apply_mutation(d, K.ADD_SKIP, random.Random(seed)).child_dna
        assert D.validate(c) == []
        (new,) = set(c.edges) - set(d.edges)
        e = c.edges[new]
        assert e.edge_type == D.IDENTITY and e.precedence == (0, 0)
        assert e.from_vertex not in D.descendants(d, e.to_vertex)


def test_add_skip_draws_target_then_source():
    # input -> a -> b -> output. Targets are shuffled first: ``a`` admits no new source,
    # so ``b`` and ``output`` each come first half the time. ``b`` then has one legal
    # source (input); ``output`` has two (input, a).
    d = D.new_initial_dna(10, random.Random(0))
    rng = random.Random(1)
    for _ in range(2):
        d = M.apply_mutation(d, K.INSERT_ONE_TO_ONE, rng).child_dna
    (inp, a, b, out), _ = D.backbone(d)
    counts = Counter()
    for seed in range(4000):
        c = M.apply_mutation(d, K.ADD_SKIP, random.Random(seed)).child_dna
        (new,) = set(c.edges) - set(d.edges)
        counts[(c.edges[new].from_vertex, c.edges[new].to_vertex)] += 1
    cells = [(inp, b), (inp, out), (a, out)]
    assert sum(counts[p] for p in cells) == 4000
    assert chi_square([counts[p] for p in cells], [2000, 1000, 1000]) < 13.82  # chi2(2), 0.999


def test_remove_skip_removes_only_skips():
    d = conv_heavy_dna(2)
    skips = set(D.skip_edges(d))
    assert skips
    c = M.apply_mutation(d, K.REMOVE_SKIP, random.Random(0)).child_dna
    assert set(d.edges) - set(c.edges) <= skips and len(c.edges) == len(d.edges) - 1


def test_reproduce_counts_and_composes():
    d = evolved_dna(5, 8)
    out = M.reproduce(d, 5, random.Random(3))
    assert len(out.kinds) == 5
    assert out.weight_action == M.compose_weight_actions(
        [M.weight_action_for(k) for k in out.kinds])
    forced = M.reproduce(d, 2, random.Random(0), kinds=[K.IDENTITY, K.ALTER_LEARNING_RATE])
    assert forced.weight_action == A.INHERIT_ALL


def test_reproduce_gives_up_after_repeated_inapplicable(monkeypatch):
    monkeypatch.setattr(M, "sample_mutation_kind", lambda rng: K.REMOVE_SKIP)
    with pytest.raises(M.RetriesExhausted):
        M.reproduce(D.new_initial_dna(10, random.Random(0)), 1, random.Random(0))


def test_reproduce_leaves_parent_untouched():
    d = conv_heavy_dna(3)
    snapshot = D.serialize(d)
    for seed in range(50):
        M.reproduce(d, 3, random.Random(seed))
    assert D.serialize(d) == snapshot


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(M.ALL_KINDS))
def test_every_applied_mutation_yields_valid_child(seed, kind):
    d = evolved_dna(seed % 1000, 12)
    try:
        out = M.apply_mutation(d, kind, random.Random(seed))
    except M.MutationInapplicable:
        return
    assert D.validate(out.child_dna) == []
    for e in out.child_dna.edges.values():
        if e.edge_type == D.CONV:
            assert e.filter_width() % 2 == 1 and e.filter_height() % 2 == 1
            assert e.stride() & (e.stride() - 1) == 0
