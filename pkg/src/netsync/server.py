"""Authoritative server: tick loop, input gathering, history and lag compensation."""

from __future__ import annotations

import bisect
import math
import statistics
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

from .protocol import (
    ActionKind,
    EntityState,
    InputCommand,
    PriorityConfig,
    Snapshot,
    decode_inputs,
    encode_snapshot,
    prioritize,
)
from .sim import Link, SimEvent, Simulator, US_PER_S
from .metrics import SyncExchange, estimate_offset


# --- policies & config -----------------------------------------------------------


@dataclass(frozen=True)
class WaitAll:
    """Process a tick only once every connected client has a new input queued."""

    disconnect_ticks: int = 10


@dataclass(frozen=True)
class Deadline:
    """Process at ``tick_start + D`` with whatever has arrived by then."""

    D: int


GatherPolicy = WaitAll | Deadline


@dataclass(frozen=True)
class ServerConfig:
    tick_period: int = 50_000
    gather: GatherPolicy = field(default_factory=WaitAll)
    history_horizon: int = 1_000_000
    snapshot_priority: PriorityConfig = field(default_factory=PriorityConfig)
    speed: float = 5.0  # world units / s
    input_dt: float = 0.05  # seconds of motion per input
    hit_radius: float = 0.5
    lag_compensation: bool = True
    interp_delay: int = 100_000  # render delay the clients use
    sync_every_ticks: int = 4

    def __post_init__(self) -> None:
        if self.tick_period <= 0:
            raise ValueError("tick_period must be positive")
        if self.history_horizon <= 0:
            raise ValueError("history_horizon must be positive")
        if isinstance(self.gather, Deadline) and not 0 <= self.gather.D < self.tick_period:
            raise ValueError("deadline D must lie in [0, tick_period)")
        if isinstance(self.gather, WaitAll) and self.gather.disconnect_ticks < 1:
            raise ValueError("disconnect_ticks must be >= 1")


# --- pure operations ---------------------------------------------------------------


def apply_input(state: EntityState, cmd: InputCommand, dt: float, speed: float) -> EntityState:
    """Advance ``state`` by one input.

    Only the next expected sequence number is applied; anything else (stale,
    duplicate or ahead of a gap) returns ``state`` unchanged. Client and
    server must both go through this function so that replays agree bit for
    bit.
    """
    if cmd.input_seq != state.last_input_seq + 1:
        return state
    kind = cmd.action.kind
    if kind is ActionKind.MOVE:
        dx, dy = cmd.action.vec
        norm = math.hypot(dx, dy)
        if norm > 0:
            vel = (speed * dx / norm, speed * dy / norm)
        else:
            vel = (0.0, 0.0)
        pos = (state.position[0] + vel[0] * dt, state.position[1] + vel[1] * dt)
        return EntityState(state.entity_id, pos, vel, cmd.input_seq)
    if kind is ActionKind.IDLE:
        return EntityState(state.entity_id, state.position, (0.0, 0.0), cmd.input_seq)
    return replace(state, last_input_seq=cmd.input_seq)


@dataclass(frozen=True)
class Arrival:
    time: int
    cmd: InputCommand


def gather_inputs(
    policy: GatherPolicy,
    pending: dict[int, list[Arrival]],
    tick_start: int,
    now: int,
    connected: Sequence[int],
) -> list[InputCommand] | None:
    """Pick the inputs a tick applies and remove them from ``pending``.

    ``wait_all`` returns ``None`` while some connected client has nothing
    queued yet. ``deadline`` takes arrivals up to ``tick_start + D`` and leaves
    later ones for the next tick. Result is ordered by (client_id, input_seq).
    """
    if isinstance(policy, WaitAll):
        cutoff = now
        for cid in connected:
            if not any(a.time <= cutoff for a in pending.get(cid, ())):
                return None
    else:
        cutoff = tick_start + policy.D
    taken: list[InputCommand] = []
    for cid in list(pending):
        keep = []
        for a in pending[cid]:
            if a.time <= cutoff:
                taken.append(a.cmd)
            else:
                keep.append(a)
        pending[cid] = keep
    taken.sort(key=lambda c: (c.client_id, c.input_seq))
    return taken


class TooOld(LookupError):
    def __init__(self, t_target: int, oldest: int) -> None:
        super().__init__(f"t={t_target} is older than the oldest stored state ({oldest})")
        self.t_target = t_target
        self.oldest = oldest


@dataclass(frozen=True)
class HistoryEntry:
    tick: int
    server_time: int
    states: Mapping[int, EntityState]


class WorldHistory:
    """Ring of past world states covering at least ``horizon`` µs back from the newest."""

    def __init__(self, horizon: int) -> None:
        self.horizon = horizon
        self._entries: deque[HistoryEntry] = deque()
        self._times: deque[int] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def newest(self) -> HistoryEntry:
        return self._entries[-1]

    @property
    def oldest(self) -> HistoryEntry:
        return self._entries[0]

    def push(self, tick: int, server_time: int, states: Mapping[int, EntityState]) -> None:
        if self._entries and server_time <= self._times[-1]:
            raise ValueError("history times must be strictly increasing")
        self._entries.append(HistoryEntry(tick, server_time, dict(states)))
        self._times.append(server_time)
        while self._times[0] < server_time - self.horizon:
            self._entries.popleft()
            self._times.popleft()

    def entries(self) -> list[HistoryEntry]:
        return list(self._entries)

    def rewind(self, t_target: int) -> dict[int, EntityState]:
        if not self._entries:
            raise TooOld(t_target, 0)
        if t_target < self._times[0]:
            raise TooOld(t_target, self._times[0])
        if t_target >= self._times[-1]:
            return dict(self._entries[-1].states)
        times = list(self._times)
        i = bisect.bisect_right(times, t_target) - 1
        a, b = self._entries[i], self._entries[i + 1]
        if a.server_time == t_target:
            return dict(a.states)
        alpha = (t_target - a.server_time) / (b.server_time - a.server_time)
        out = {}
        for eid, sb in b.states.items():
            sa = a.states.get(eid)
            out[eid] = sb if sa is None else lerp_state(sa, sb, alpha)
        return out


def lerp_state(a: EntityState, b: EntityState, alpha: float) -> EntityState:
    pos = (
        a.position[0] + (b.position[0] - a.position[0]) * alpha,
        a.position[1] + (b.position[1] - a.position[1]) * alpha,
    )
    vel = (
        a.velocity[0] + (b.velocity[0] - a.velocity[0]) * alpha,
        a.velocity[1] + (b.velocity[1] - a.velocity[1]) * alpha,
    )
    return EntityState(b.entity_id, pos, vel, b.last_input_seq)


@dataclass(frozen=True)
class HitResult:
    hit: bool
    target: int | None
    too_old: bool = False
    distance: float = math.inf


def validate_hit(
    history: WorldHistory,
    aim: tuple[float, float],
    view_time: int,
    targets: Sequence[int],
    radius: float,
) -> HitResult:
    """Test ``aim`` against target circles in the world as it was at ``view_time``."""
    too_old = False
    try:
        world = history.rewind(view_time)
    except TooOld:
        too_old = True
        world = dict(history.oldest.states)
    best: tuple[float, int] | None = None
    for eid in targets:
        st = world.get(eid)
        if st is None:
            continue
        d = math.hypot(aim[0] - st.position[0], aim[1] - st.position[1])
        if best is None or (d, eid) < best:
            best = (d, eid)
    if best is None:
        return HitResult(False, None, too_old)
    return HitResult(best[0] <= radius, best[1], too_old, best[0])


# --- server node -----------------------------------------------------------------


@dataclass(frozen=True)
class Bot:
    """Server-driven entity: constant velocity, reflected inside an optional box."""

    entity_id: int
    start: tuple[float, float]
    velocity: tuple[float, float]
    bounds: tuple[float, float, float, float] | None = None  # xmin, ymin, xmax, ymax

    def state_at(self, t_us: int) -> EntityState:
        t = t_us / US_PER_S
        pos = []
        vel = []
        for axis in (0, 1):
            p = self.start[axis] + self.velocity[axis] * t
            v = self.velocity[axis]
            if self.bounds is not None:
                lo, hi = self.bounds[axis], self.bounds[axis + 2]
                span = hi - lo
                if span > 0:
                    k = (p - lo) % (2 * span)
                    if k > span:
                        p, v = lo + 2 * span - k, -v
                    else:
                        p = lo + k
            pos.append(p)
            vel.append(v)
        return EntityState(self.entity_id, (pos[0], pos[1]), (vel[0], vel[1]))


@dataclass
class TickRecord:
    tick: int
    tick_start: int
    processed_at: int
    applied: int


@dataclass
class ShotRecord:
    client_id: int
    received: int
    view_time: int
    hit: bool
    target: int | None
    too_old: bool


@dataclass
class ServerMsg:
    kind: str
    client_id: int = -1
    data: bytes = b""
    extra: tuple = ()


class Server:
    """Authoritative world driven by simulator events addressed to ``"server"``.

    ``downlinks`` maps client id -> (link, deliver) where ``deliver(time,
    msg)`` schedules the message at the client.
    """

    NODE = "server"

    def __init__(
        self,
        sim: Simulator,
        cfg: ServerConfig,
        client_entities: Mapping[int, EntityState],
        bots: Sequence[Bot] = (),
    ) -> None:
        self.sim = sim
        self.cfg = cfg
        self.owner = {cid: st.entity_id for cid, st in client_entities.items()}
        self.world: dict[int, EntityState] = {st.entity_id: st for st in client_entities.values()}
        self.bots = list(bots)
        for b in self.bots:
            self.world[b.entity_id] = b.state_at(0)
        self.history = WorldHistory(cfg.history_horizon)
        self.pending: dict[int, list[Arrival]] = {cid: [] for cid in self.owner}
        self.last_heard: dict[int, int] = {cid: 0 for cid in self.owner}
        self.last_sent: dict[int, dict[int, int]] = {cid: {} for cid in self.owner}
        self.downlinks: dict[int, tuple[Link, Callable[[int, object], None]]] = {}
        self.owd_samples: dict[int, deque[int]] = {cid: deque(maxlen=5) for cid in self.owner}
        self.offset_samples: dict[int, deque[float]] = {cid: deque(maxlen=5) for cid in self.owner}
        self.exchanges: list[tuple[int, SyncExchange]] = []
        self.tick = 0
        self.tick_start = 0
        self.waiting = False
        self.ticks: list[TickRecord] = []
        self.shots: list[ShotRecord] = []
        self.discarded = 0
        self.too_old = 0
        self.arrival: dict[tuple[int, int], int] = {}
        sim.register(self.NODE, self.handle)

    def start(self, at: int = 0) -> None:
        self.sim.schedule(at, self.NODE, ServerMsg("tick"))

    # -- event handling

    def handle(self, event: SimEvent) -> None:
        msg: ServerMsg = event.payload
        now = self.sim.now
        if msg.kind == "tick":
            self._begin_tick(now)
        elif msg.kind == "deadline":
            self._process(now)
        elif msg.kind == "wake":
            if self.waiting:
                self._try_process(now)
        elif msg.kind == "inputs":
            self._on_inputs(msg.client_id, msg.data, now)
        elif msg.kind == "delay_req":
            self._on_delay_req(msg.client_id, msg.extra, now)

    def _begin_tick(self, now: int) -> None:
        self.tick_start = now
        if isinstance(self.cfg.gather, Deadline):
            self.sim.schedule(now + self.cfg.gather.D, self.NODE, ServerMsg("deadline"))
        else:
            self.waiting = True
            self._try_process(now)

    def connected(self, now: int) -> list[int]:
        if not isinstance(self.cfg.gather, WaitAll):
            return list(self.owner)
        timeout = self.cfg.gather.disconnect_ticks * self.cfg.tick_period
        return [cid for cid, t in self.last_heard.items() if now - t < timeout]

    def _try_process(self, now: int) -> None:
        connected = self.connected(now)
        cmds = gather_inputs(self.cfg.gather, self.pending, self.tick_start, now, connected)
        if cmds is None:
            # wake when the first silent client would time out
            timeout = self.cfg.gather.disconnect_ticks * self.cfg.tick_period
            silent = [self.last_heard[c] + timeout for c in connected if not self.pending[c]]
            if silent:
                self.sim.schedule(max(now, min(silent)), self.NODE, ServerMsg("wake"))
            return
        self.waiting = False
        self._apply_and_broadcast(now, cmds)

    def _process(self, now: int) -> None:
        cmds = gather_inputs(self.cfg.gather, self.pending, self.tick_start, now, self.connected(now))
        self._apply_and_broadcast(now, cmds or [])

    def _on_inputs(self, cid: int, data: bytes, now: int) -> None:
        self.last_heard[cid] = now
        eid = self.owner[cid]
        applied = self.world[eid].last_input_seq
        queued = {a.cmd.input_seq for a in self.pending[cid]}
        for cmd in decode_inputs(data):
            if cmd.client_id != cid or cmd.input_seq <= applied or cmd.input_seq in queued:
                self.discarded += 1
                continue
            self.pending[cid].append(Arrival(now, cmd))
            self.arrival[(cid, cmd.input_seq)] = now
            queued.add(cmd.input_seq)
        if self.waiting:
            self._try_process(now)

    def _apply_and_broadcast(self, now: int, cmds: list[InputCommand]) -> None:
        cfg = self.cfg
        applied = 0
        held: list[Arrival] = []
        for b in self.bots:
            self.world[b.entity_id] = b.state_at(now)
        for cmd in cmds:
            eid = self.owner[cmd.client_id]
            before = self.world[eid]
            after = apply_input(before, cmd, cfg.input_dt, cfg.speed)
            if after is before and cmd.input_seq > before.last_input_seq + 1:
                # gap: keep until the missing input shows up
                held.append(Arrival(self.arrival[(cmd.client_id, cmd.input_seq)], cmd))
                continue
            if after is before:
                self.discarded += 1
                continue
            self.world[eid] = after
            applied += 1
            received = self.arrival.pop((cmd.client_id, cmd.input_seq))
            if cmd.action.kind is ActionKind.FIRE:
                self._fire(cmd, received)
        for a in held:
            self.pending[a.cmd.client_id].append(a)

        self.history.push(self.tick, now, self.world)
        self.ticks.append(TickRecord(self.tick, self.tick_start, now, applied))
        self._broadcast(now)
        if self.tick % cfg.sync_every_ticks == 0:
            self._send_sync(now)
        self.tick += 1
        next_start = max(self.tick_start + cfg.tick_period, now + 1)
        self.sim.schedule(next_start, self.NODE, ServerMsg("tick"))

    def _fire(self, cmd: InputCommand, received: int) -> None:
        cid = cmd.client_id
        owd = self.owd_estimate(cid)
        view_time = received - owd - self.cfg.interp_delay
        targets = [eid for eid in self.world if eid != self.owner[cid]]
        if self.cfg.lag_compensation:
            res = validate_hit(self.history, cmd.action.vec, view_time, targets, self.cfg.hit_radius)
        else:
            res = _test_current(self.world, cmd.action.vec, targets, self.cfg.hit_radius)
        if res.too_old:
            self.too_old += 1
        self.shots.append(ShotRecord(cid, received, view_time, res.hit, res.target, res.too_old))

    def owd_estimate(self, cid: int) -> int:
        s = self.owd_samples[cid]
        return int(statistics.median(s)) if s else 0

    def _broadcast(self, now: int) -> None:
        cfg = self.cfg
        for cid, (link, deliver) in self.downlinks.items():
            chosen = prioritize(self.world, self.owner[cid], self.last_sent[cid], self.tick, cfg.snapshot_priority)
            for eid in chosen:
                self.last_sent[cid][eid] = self.tick
            snap = Snapshot(self.tick, now, tuple(self.world[e] for e in chosen))
            data = encode_snapshot(snap)
            t = link.send(now, len(data))
            if t is not None:
                deliver(t, ("snapshot", data, now))

    # -- PTP-style exchange: server is the master clock

    def _send_sync(self, now: int) -> None:
        for cid, (link, deliver) in self.downlinks.items():
            t = link.send(now, 16)
            if t is not None:
                deliver(t, ("sync", now))

    def _on_delay_req(self, cid: int, extra: tuple, now: int) -> None:
        t1, t2, t3 = extra
        x = SyncExchange(t1, t2, t3, now)
        self.exchanges.append((cid, x))
        rtt = (x.t4 - x.t1) - (x.t3 - x.t2)
        self.owd_samples[cid].append(rtt // 2)
        self.offset_samples[cid].append(estimate_offset(x))
        link, deliver = self.downlinks[cid]
        t = link.send(now, 16)
        if t is not None:
            deliver(t, ("delay_resp", t1, t2, t3, now))


def _test_current(world, aim, targets, radius) -> HitResult:
    best = None
    for eid in targets:
        st = world[eid]
        d = math.hypot(aim[0] - st.position[0], aim[1] - st.position[1])
        if best is None or (d, eid) < best:
            best = (d, eid)
    if best is None:
        return HitResult(False, None)
    return HitResult(best[0] <= radius, best[1], False, best[0])
