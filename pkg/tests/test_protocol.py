from __future__ import annotations

import math
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netsync.protocol import (
    Action,
    ActionKind,
    EntityState,
    InputCommand,
    PriorityConfig,
    Snapshot,
    WireError,
    decode_inputs,
    decode_snapshot,
    encode_inputs,
    encode_snapshot,
    prioritize,
    priority_score,
)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
u32 = st.integers(0, 2**32 - 1)

entities = st.builds(
    EntityState,
    entity_id=u32,
    position=st.tuples(finite, finite),
    velocity=st.tuples(finite, finite),
    last_input_seq=u32,
)
actions = st.builds(Action, kind=st.sampled_from(list(ActionKind)), vec=st.tuples(finite, finite))
commands = st.builds(
    InputCommand, client_id=u32, input_seq=u32, issued_at=st.integers(-(2**63), 2**63 - 1), action=actions
)


@settings(max_examples=100)
@given(
    tick=st.integers(0, 2**64 - 1),
    t=st.integers(0, 2**64 - 1),
    entries=st.lists(entities, max_size=20),
)
def test_snapshot_roundtrip(tick, t, entries):
    snap = Snapshot(tick, t, tuple(entries))
    assert decode_snapshot(encode_snapshot(snap)) == snap


@settings(max_examples=100)
@given(cmds=st.lists(commands, max_size=20))
def test_input_roundtrip(cmds):
    assert decode_inputs(encode_inputs(cmds)) == cmds


def test_snapshot_wire_layout_is_little_endian_and_fixed_size():
    snap = Snapshot(3, 150_000, (EntityState(7, (1.0, 2.0), (0.5, -0.5), 9),))
    data = encode_snapshot(snap)
    assert len(data) == struct.calcsize("<BQQH") + struct.calcsize("<IddddI")
    assert data[0] == 1
    assert struct.unpack_from("<Q", data, 1)[0] == 3


def test_truncated_and_padded_buffers_are_rejected():
    data = encode_snapshot(Snapshot(1, 2, (EntityState(1),)))
    with pytest.raises(WireError):
        decode_snapshot(data[:-1])
    with pytest.raises(WireError):
        decode_snapshot(data + b"\x00")
    inputs = encode_inputs([InputCommand(1, 1, 0)])
    with pytest.raises(WireError):
        decode_inputs(inputs[:-3])
    with pytest.raises(WireError):
        decode_inputs(b"")


def test_unknown_version_is_rejected():
    data = bytearray(encode_snapshot(Snapshot(1, 2)))
    data[0] = 99
    with pytest.raises(WireError):
        decode_snapshot(bytes(data))
    data = bytearray(encode_inputs([]))
    data[0] = 2
    with pytest.raises(WireError):
        decode_inputs(bytes(data))


def test_unknown_action_kind_is_rejected():
    data = bytearray(encode_inputs([InputCommand(1, 1, 0, Action.move(1, 0))]))
    # kind byte sits after the header and client_id, input_seq, issued_at
    data[3 + 4 + 4 + 8] = 9
    with pytest.raises(WireError):
        decode_inputs(bytes(data))


def test_non_finite_state_is_rejected():
    with pytest.raises(ValueError):
        EntityState(1, (math.nan, 0.0))


def test_snapshot_get():
    snap = Snapshot(0, 0, (EntityState(1), EntityState(4, (3.0, 0.0))))
    assert snap.get(4).position == (3.0, 0.0)
    assert snap.get(2) is None


def test_priority_score_combines_staleness_and_relevance():
    cfg = PriorityConfig(w_staleness=2.0, w_relevance=10.0, relevance_radius=10.0)
    own = EntityState(0)
    assert priority_score(EntityState(1, (5.0, 0.0)), own, 3, cfg) == pytest.approx(6 + 5)
    assert priority_score(EntityState(1, (50.0, 0.0)), own, 3, cfg) == 6


def test_prioritize_own_entity_first_and_free():
    world = {i: EntityState(i, (float(i), 0.0)) for i in range(10)}
    cfg = PriorityConfig(budget_per_tick=3)
    chosen = prioritize(world, 5, {}, 0, cfg)
    assert chosen[0] == 5
    assert len(chosen) == 4
    assert 5 not in chosen[1:]


def test_prioritize_breaks_ties_by_lower_id():
    world = {i: EntityState(i) for i in (9, 3, 7, 1)}
    cfg = PriorityConfig(budget_per_tick=2, w_relevance=0.0)
    assert prioritize(world, 9, {}, 0, cfg) == [9, 1, 3]


def test_prioritize_requires_known_own_entity():
    with pytest.raises(KeyError):
        prioritize({1: EntityState(1)}, 2, {}, 0, PriorityConfig())


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(2, 25),
    budget=st.integers(1, 6),
    xs=st.lists(st.floats(-100, 100), min_size=25, max_size=25),
)
def test_staleness_prevents_starvation(n, budget, xs):
    world = {i: EntityState(i, (xs[i], 0.0)) for i in range(n)}
    cfg = PriorityConfig(budget_per_tick=budget, relevance_radius=20.0)
    last: dict[int, int] = {}
    others = n - 1
    # relevance adds at most w_relevance, so everyone is sent within a bounded window
    window = math.ceil(others / budget) + 2
    for tick in range(window * 4):
        for e in prioritize(world, 0, last, tick, cfg):
            last[e] = tick
        if tick >= window:
            assert all(tick - last.get(e, -1) <= window for e in range(1, n))


def test_priority_config_validation():
    with pytest.raises(ValueError):
        PriorityConfig(budget_per_tick=0)
    with pytest.raises(ValueError):
        PriorityConfig(w_staleness=0, w_relevance=0)
    with pytest.raises(ValueError):
        PriorityConfig(relevance_radius=0)
