from __future__ import annotations

import random

import numpy as np
import pytest

from neuroevo import data as data_lib
from neuroevo import dna as dna_lib
from neuroevo import mutations as mut

# Criterion results collected by test_acceptance, printed after the run.
ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        verdict, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")


def evolved_dna(seed: int, mutations: int = 15, num_classes: int = 10) -> dna_lib.Dna:
    """A DNA grown by ``mutations`` random reproduction steps."""
    rng = random.Random(seed)
    d = dna_lib.new_initial_dna(num_classes, rng)
    for _ in range(mutations):
        d = mut.reproduce(d, 1, rng).child_dna
    return d


def conv_heavy_dna(seed: int, num_classes: int = 4) -> dna_lib.Dna:
    """Convolutions, skips, strides and channel changes, in a fixed recipe."""
    rng = random.Random(seed)
    d = dna_lib.new_initial_dna(num_classes, rng)
    K = mut.MutationKind
    recipe = ([K.INSERT_CONVOLUTION] * 4 + [K.ADD_SKIP] * 3 + [K.ALTER_CHANNELS, K.FILTER_SIZE] * 2
              + [K.INSERT_ONE_TO_ONE] * 2 + [K.ALTER_STRIDE])
    for kind in recipe:
        try:
            d = mut.apply_mutation(d, kind, rng).child_dna
        except mut.MutationInapplicable:
            pass
    return d


@pytest.fixture
def blobs():
    return data_lib.synthetic_dataset("k_class_blobs", 400, 1)


@pytest.fixture
def separable():
    return data_lib.synthetic_dataset("separable2", 400, 0)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


def _conv(half_w=1.0, half_h=None, depth=1.0, stride=0.0):
    return dict(depth_factor=depth, filter_half_width=half_w,
                filter_half_height=half_w if half_h is None else half_h, stride_scale=stride)


def hand_built_dna(index: int) -> dna_lib.Dna:
    """Five fixed architectures with known shapes, used as FLOP and compiler oracles.

    0: input -> output, identity only
    1: one 3x3 conv doubling channels
    2: 3x3 conv, then a 5x3 stride-2 conv
    3: two convs with an input skip that needs channel padding at the output
    4: stride-2 conv, linear one-to-one vertex, channel-halving conv, two skips
    """
    d = dna_lib.new_initial_dna(10, random.Random(index))

    def insert(edge_type, vertex_type, name, **params):
        nonlocal d
        loc = dna_lib.insertion_locations(d)[-1]
        d = dna_lib.insert_vertex_pair(d, loc, edge_type, vertex_type, f"v{name}", f"e{name}",
                                       **params)

    C, I, B, L = dna_lib.CONV, dna_lib.IDENTITY, dna_lib.BN_RELU, dna_lib.LINEAR
    if index == 1:
        insert(C, B, "1", **_conv(depth=2.0))
    elif index == 2:
        insert(C, B, "1", **_conv(depth=2.0))
        insert(C, B, "2", **_conv(half_w=2.0, half_h=1.0, stride=1.0))
    elif index == 3:
        insert(C, B, "1", **_conv(depth=2.0))
        insert(C, B, "2", **_conv(depth=1.5))
        dna_lib.add_edge(d, d.input_vertex_id, d.output_vertex_id, I, "skip0",
                         depth_precedence=dna_lib.SKIP_PRECEDENCE,
                         scale_precedence=dna_lib.SKIP_PRECEDENCE)
    elif index == 4:
        insert(C, B, "1", **_conv(depth=4.0, stride=1.0))
        insert(I, L, "2")
        insert(C, B, "3", **_conv(depth=0.5, half_w=0.0))
        dna_lib.add_edge(d, d.input_vertex_id, "v3", I, "skip0",
                         depth_precedence=dna_lib.SKIP_PRECEDENCE,
                         scale_precedence=dna_lib.SKIP_PRECEDENCE)
        dna_lib.add_edge(d, "v1", d.output_vertex_id, I, "skip1",
                         depth_precedence=dna_lib.SKIP_PRECEDENCE,
                         scale_precedence=dna_lib.SKIP_PRECEDENCE)
    elif index != 0:
        raise ValueError(index)
    assert dna_lib.validate(d) == [], dna_lib.validate(d)
    return d
