"""Client pipeline: own-entity prediction/reconciliation and remote-entity interpolation."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metrics import AoiProcess, OffsetTracker, SyncExchange
from .protocol import Action, EntityState, InputCommand, decode_snapshot, encode_inputs
from .server import ServerMsg, apply_input, lerp_state
from .sim import Link, SimEvent, Simulator, US_PER_S


class EmptyBuffer(LookupError):
    pass


class PendingInputBuffer:
    """Inputs sent but not yet acknowledged, gapless and sorted by sequence."""

    def __init__(self, acked: int = 0) -> None:
        self.acked = acked
        self.items: list[InputCommand] = []

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def next_seq(self) -> int:
        return (self.items[-1].input_seq if self.items else self.acked) + 1

    def append(self, cmd: InputCommand) -> None:
        if cmd.input_seq != self.next_seq:
            raise ValueError(f"expected input_seq {self.next_seq}, got {cmd.input_seq}")
        self.items.append(cmd)

    def ack(self, acked: int) -> None:
        if acked <= self.acked:
            return
        self.acked = acked
        self.items = [c for c in self.items if c.input_seq > acked]


def predict(
    state: EntityState,
    cmd: InputCommand,
    pending: PendingInputBuffer,
    dt: float,
    speed: float,
) -> EntityState:
    pending.append(cmd)
    return apply_input(state, cmd, dt, speed)


def reconcile(
    authoritative: EntityState, pending: PendingInputBuffer, dt: float, speed: float
) -> EntityState:
    """Replay unacknowledged inputs on top of the server's state."""
    pending.ack(authoritative.last_input_seq)
    state = authoritative
    for cmd in pending:
        state = apply_input(state, cmd, dt, speed)
    return state


class InterpBuffer:
    """Time-ordered snapshot states of one remote entity."""

    def __init__(self, render_delay: int, extrapolation_cap: int = 0, keep: int = 2_000_000) -> None:
        self.render_delay = render_delay
        self.extrapolation_cap = extrapolation_cap
        self.keep = keep
        self.times: list[int] = []
        self.states: list[EntityState] = []

    def __len__(self) -> int:
        return len(self.times)

    def add(self, server_time: int, state: EntityState) -> bool:
        if self.times and server_time <= self.times[-1]:
            return False  # late or duplicate snapshot
        self.times.append(server_time)
        self.states.append(state)
        cut = bisect.bisect_left(self.times, server_time - self.keep)
        # always keep one entry at or before the cut for bracketing
        cut = max(0, cut - 1)
        if cut:
            del self.times[:cut]
            del self.states[:cut]
        return True


def render_remote(buf: InterpBuffer, render_time: int) -> EntityState:
    """State of a remote entity at ``render_time`` (already shifted by the render delay)."""
    if not buf.times:
        raise EmptyBuffer("no snapshot received yet")
    times = buf.times
    if render_time <= times[0]:
        return buf.states[0]
    if render_time >= times[-1]:
        last = buf.states[-1]
        ahead = min(render_time - times[-1], buf.extrapolation_cap)
        if ahead <= 0:
            return last
        t = ahead / US_PER_S
        pos = (last.position[0] + last.velocity[0] * t, last.position[1] + last.velocity[1] * t)
        return EntityState(last.entity_id, pos, last.velocity, last.last_input_seq)
    i = bisect.bisect_right(times, render_time) - 1
    if times[i] == render_time:
        return buf.states[i]
    alpha = (render_time - times[i]) / (times[i + 1] - times[i])
    return lerp_state(buf.states[i], buf.states[i + 1], alpha)


# --- workloads --------------------------------------------------------------------


@dataclass(frozen=True)
class Workload:
    """Per-client input generator.

    ``kind`` is ``random_walk`` (seeded), ``script`` (tick -> Action) or
    ``idle``. Inputs stop after ``input_ticks`` client ticks when set; the
    client keeps resending unacknowledged ones afterwards. ``fire_every``
    fires at the rendered position of ``fire_target`` every n ticks.
    """

    kind: str = "random_walk"
    turn_prob: float = 0.2
    idle_prob: float = 0.1
    script: tuple[tuple[int, Action], ...] = ()
    input_ticks: int | None = None
    fire_every: int = 0
    fire_target: int | None = None


class WorkloadGen:
    def __init__(self, wl: Workload, rng: np.random.Generator) -> None:
        self.wl = wl
        self.rng = rng
        self.heading = (1.0, 0.0)
        self.script = dict(wl.script)

    def next(self, tick: int) -> Action:
        wl = self.wl
        if wl.kind == "idle":
            return Action.idle()
        if wl.kind == "script":
            return self.script.get(tick, Action.idle())
        u = self.rng.random()
        if u < wl.idle_prob:
            return Action.idle()
        if u < wl.idle_prob + wl.turn_prob:
            ang = float(self.rng.uniform(0, 2 * math.pi))
            self.heading = (math.cos(ang), math.sin(ang))
        return Action.move(*self.heading)


# --- client node ---------------------------------------------------------------------


@dataclass(frozen=True)
class ClientConfig:
    render_delay: int = 100_000
    extrapolation_cap: int = 0
    clock_offset: int = 0  # local clock minus server clock


@dataclass
class ClientStats:
    corrections: list[float] = field(default_factory=list)
    snapshot_latency: list[int] = field(default_factory=list)
    snapshot_ticks: list[int] = field(default_factory=list)
    aoi: AoiProcess = field(default_factory=AoiProcess)
    stale_snapshots: int = 0
    inputs_sent: int = 0


class Client:
    """One client node; simulator target ``client:<id>``."""

    def __init__(
        self,
        sim: Simulator,
        client_id: int,
        own: EntityState,
        cfg: ClientConfig,
        workload: Workload,
        rng: np.random.Generator,
        tick_period: int,
        input_dt: float,
        speed: float,
    ) -> None:
        self.sim = sim
        self.client_id = client_id
        self.cfg = cfg
        self.own_id = own.entity_id
        self.predicted = own
        self.pending = PendingInputBuffer(own.last_input_seq)
        self.remote: dict[int, InterpBuffer] = {}
        self.gen = WorkloadGen(workload, rng)
        self.workload = workload
        self.tick_period = tick_period
        self.input_dt = input_dt
        self.speed = speed
        self.last_snapshot_tick = -1
        self.last_authoritative: EntityState | None = None
        self.offset = OffsetTracker()
        self.stats = ClientStats()
        self.uplink: tuple[Link, Callable[[int, ServerMsg], None]] | None = None
        self.input_tick = 0
        self.node = f"client:{client_id}"
        self._pending_sync: dict[int, tuple[int, int]] = {}
        sim.register(self.node, self.handle)

    @property
    def local_now(self) -> int:
        return self.sim.now + self.cfg.clock_offset

    def server_time_estimate(self) -> float:
        return self.local_now - self.offset.estimate

    def start(self, at: int = 0) -> None:
        self.sim.schedule(at, self.node, ("input_tick",))

    def handle(self, event: SimEvent) -> None:
        kind = event.payload[0]
        if kind == "input_tick":
            self._on_input_tick()
        elif kind == "snapshot":
            self._on_snapshot(event.payload[1], event.payload[2])
        elif kind == "sync":
            self._on_sync(event.payload[1])
        elif kind == "delay_resp":
            _, t1, t2, t3, t4 = event.payload
            self.offset.add(SyncExchange(t1, t2, t3, t4))

    def _on_input_tick(self) -> None:
        wl = self.workload
        active = wl.input_ticks is None or self.input_tick < wl.input_ticks
        if active:
            if wl.fire_every and self.input_tick % wl.fire_every == wl.fire_every - 1:
                action = self._aim()
            else:
                action = self.gen.next(self.input_tick)
            cmd = InputCommand(self.client_id, self.pending.next_seq, self.local_now, action)
            self.predicted = predict(self.predicted, cmd, self.pending, self.input_dt, self.speed)
        if self.pending:
            self._send(encode_inputs(self.pending.items))
        self.input_tick += 1
        if active or self.pending:
            self.sim.schedule(self.sim.now + self.tick_period, self.node, ("input_tick",))

    def _aim(self) -> Action:
        target = self.workload.fire_target
        if target is None or target not in self.remote or not len(self.remote[target]):
            return Action.idle()
        st = self.render(target)
        return Action.fire(*st.position)

    def render(self, entity_id: int, server_time: float | None = None) -> EntityState:
        t = self.server_time_estimate() if server_time is None else server_time
        return render_remote(self.remote[entity_id], int(round(t - self.cfg.render_delay)))

    def _send(self, data: bytes) -> None:
        assert self.uplink is not None
        link, deliver = self.uplink
        self.stats.inputs_sent += 1
        t = link.send(self.sim.now, len(data))
        if t is not None:
            deliver(t, ServerMsg("inputs", self.client_id, data))

    def _on_snapshot(self, data: bytes, sent_at: int) -> None:
        now = self.sim.now
        snap = decode_snapshot(data)
        self.stats.snapshot_ticks.append(snap.tick)
        self.stats.snapshot_latency.append(now - sent_at)
        self.stats.aoi.add(snap.server_time, now)
        if snap.tick <= self.last_snapshot_tick:
            self.stats.stale_snapshots += 1
            return
        self.last_snapshot_tick = snap.tick
        for st in snap.entries:
            if st.entity_id == self.own_id:
                if st.last_input_seq < self.pending.acked:
                    continue
                before = self.predicted
                self.last_authoritative = st
                self.predicted = reconcile(st, self.pending, self.input_dt, self.speed)
                self.stats.corrections.append(
                    math.hypot(
                        self.predicted.position[0] - before.position[0],
                        self.predicted.position[1] - before.position[1],
                    )
                )
            else:
                buf = self.remote.get(st.entity_id)
                if buf is None:
                    buf = self.remote[st.entity_id] = InterpBuffer(
                        self.cfg.render_delay, self.cfg.extrapolation_cap
                    )
                buf.add(snap.server_time, st)

    def _on_sync(self, t1: int) -> None:
        t2 = self.local_now
        t3 = self.local_now
        assert self.uplink is not None
        link, deliver = self.uplink
        t = link.send(self.sim.now, 24)
        if t is not None:
            deliver(t, ServerMsg("delay_req", self.client_id, extra=(t1, t2, t3)))
