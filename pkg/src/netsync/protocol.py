"""Wire vocabulary shared by server and clients, plus the snapshot prioritizer.

Snapshot layout (little-endian)::

    header  version:u8=1  tick:u64  server_time_us:u64  count:u16
    entry   entity_id:u32 pos_x:f64 pos_y:f64 vel_x:f64 vel_y:f64 last_input_seq:u32

Input packet layout::

    header  version:u8=1  count:u16
    entry   client_id:u32 input_seq:u32 issued_at_us:i64 action_tag:u8 payload:2*f64
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

WIRE_VERSION = 1

_SNAP_HEADER = struct.Struct("<BQQH")
_SNAP_ENTRY = struct.Struct("<IddddI")
_INPUT_HEADER = struct.Struct("<BH")
_INPUT_ENTRY = struct.Struct("<IIqBdd")


class WireError(ValueError):
    """Malformed or incompatible wire bytes."""


class ActionKind(enum.IntEnum):
    IDLE = 0
    MOVE = 1
    FIRE = 2


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    vec: tuple[float, float] = (0.0, 0.0)  # direction for MOVE, aim point for FIRE

    @classmethod
    def idle(cls) -> Action:
        return cls(ActionKind.IDLE)

    @classmethod
    def move(cls, dx: float, dy: float) -> Action:
        return cls(ActionKind.MOVE, (float(dx), float(dy)))

    @classmethod
    def fire(cls, x: float, y: float) -> Action:
        return cls(ActionKind.FIRE, (float(x), float(y)))


@dataclass(frozen=True)
class EntityState:
    entity_id: int
    position: tuple[float, float] = (0.0, 0.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    last_input_seq: int = 0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (*self.position, *self.velocity)):
            raise ValueError(f"entity {self.entity_id}: non-finite state")


@dataclass(frozen=True)
class InputCommand:
    client_id: int
    input_seq: int
    issued_at: int
    action: Action = field(default_factory=Action.idle)


@dataclass(frozen=True)
class Snapshot:
    """Authoritative states sent to one client.

    Each entry's ``last_input_seq`` is the acked input sequence of the entity's
    owner (0 for unowned entities).
    """

    tick: int
    server_time: int
    entries: tuple[EntityState, ...] = ()

    def get(self, entity_id: int) -> EntityState | None:
        for e in self.entries:
            if e.entity_id == entity_id:
                return e
        return None


# --- codecs ---------------------------------------------------------------------


def encode_snapshot(snap: Snapshot) -> bytes:
    parts = [_SNAP_HEADER.pack(WIRE_VERSION, snap.tick, snap.server_time, len(snap.entries))]
    for e in snap.entries:
        parts.append(_SNAP_ENTRY.pack(e.entity_id, *e.position, *e.velocity, e.last_input_seq))
    return b"".join(parts)


def decode_snapshot(data: bytes) -> Snapshot:
    if len(data) < _SNAP_HEADER.size:
        raise WireError(f"snapshot too short: {len(data)} bytes")
    version, tick, server_time, count = _SNAP_HEADER.unpack_from(data, 0)
    if version != WIRE_VERSION:
        raise WireError(f"unsupported snapshot version {version}")
    expected = _SNAP_HEADER.size + count * _SNAP_ENTRY.size
    if len(data) != expected:
        raise WireError(f"snapshot length {len(data)} != expected {expected} for {count} entries")
    entries = []
    for i in range(count):
        eid, px, py, vx, vy, acked = _SNAP_ENTRY.unpack_from(data, _SNAP_HEADER.size + i * _SNAP_ENTRY.size)
        entries.append(EntityState(eid, (px, py), (vx, vy), acked))
    return Snapshot(tick, server_time, tuple(entries))


def encode_inputs(cmds: Sequence[InputCommand]) -> bytes:
    parts = [_INPUT_HEADER.pack(WIRE_VERSION, len(cmds))]
    for c in cmds:
        parts.append(
            _INPUT_ENTRY.pack(c.client_id, c.input_seq, c.issued_at, int(c.action.kind), *c.action.vec)
        )
    return b"".join(parts)


def decode_inputs(data: bytes) -> list[InputCommand]:
    if len(data) < _INPUT_HEADER.size:
        raise WireError(f"input packet too short: {len(data)} bytes")
    version, count = _INPUT_HEADER.unpack_from(data, 0)
    if version != WIRE_VERSION:
        raise WireError(f"unsupported input version {version}")
    expected = _INPUT_HEADER.size + count * _INPUT_ENTRY.size
    if len(data) != expected:
        raise WireError(f"input packet length {len(data)} != expected {expected}")
    out = []
    for i in range(count):
        cid, seq, issued, tag, a, b = _INPUT_ENTRY.unpack_from(data, _INPUT_HEADER.size + i * _INPUT_ENTRY.size)
        try:
            kind = ActionKind(tag)
        except ValueError:
            raise WireError(f"unknown action tag {tag}") from None
        out.append(InputCommand(cid, seq, issued, Action(kind, (a, b))))
    return out


# --- prioritizer -----------------------------------------------------------------


@dataclass(frozen=True)
class PriorityConfig:
    budget_per_tick: int = 8
    w_staleness: float = 1.0
    w_relevance: float = 1.0
    relevance_radius: float = 50.0

    def __post_init__(self) -> None:
        if self.budget_per_tick < 1:
            raise ValueError("budget_per_tick must be >= 1")
        if self.w_staleness < 0 or self.w_relevance < 0:
            raise ValueError("priority weights must be non-negative")
        if self.w_staleness == 0 and self.w_relevance == 0:
            raise ValueError("priority weights cannot both be zero")
        if self.relevance_radius <= 0:
            raise ValueError("relevance_radius must be positive")


def priority_score(
    entity: EntityState, own: EntityState, staleness: int, cfg: PriorityConfig
) -> float:
    dx = entity.position[0] - own.position[0]
    dy = entity.position[1] - own.position[1]
    relevance = max(0.0, 1.0 - math.hypot(dx, dy) / cfg.relevance_radius)
    return cfg.w_staleness * staleness + cfg.w_relevance * relevance


def prioritize(
    world: Mapping[int, EntityState],
    own_entity: int,
    last_sent: Mapping[int, int],
    tick: int,
    cfg: PriorityConfig,
) -> list[int]:
    """Entities to include in one client's snapshot, own entity first.

    Staleness is ``tick - last_sent[e]``; an entity never sent counts as sent
    at tick -1. The own entity is free; the rest fill ``budget_per_tick`` by
    descending score, ties to the lower id.
    """
    if own_entity not in world:
        raise KeyError(f"client entity {own_entity} not in world")
    own = world[own_entity]
    scored = []
    for eid, ent in world.items():
        if eid == own_entity:
            continue
        staleness = tick - last_sent.get(eid, -1)
        scored.append((-priority_score(ent, own, staleness, cfg), eid))
    scored.sort()
    return [own_entity] + [eid for _, eid in scored[: cfg.budget_per_tick]]
