"""Discrete-event engine and impaired-link model.

All time is integer microseconds. Nothing here reads the wall clock, so a run
is fully determined by its configuration and seed.
"""

from __future__ import annotations

import heapq
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

US_PER_S = 1_000_000
US_PER_MS = 1_000


class SimulationError(RuntimeError):
    """Raised on scheduler misuse (e.g. scheduling into the past)."""


def rng_stream(seed: int, stream_id: str) -> np.random.Generator:
    """Independent generator for ``(seed, stream_id)``.

    The label is hashed with CRC32 so that the mapping is stable across
    interpreters (``hash()`` on str is salted per process).
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = zlib.crc32(stream_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: str

    def generator(self) -> np.random.Generator:
        return rng_stream(self.seed, self.stream_id)


@dataclass
class VirtualClock:
    now: int = 0

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise SimulationError(f"clock cannot move backwards ({t} < {self.now})")
        self.now = t


@dataclass(order=True, frozen=True)
class SimEvent:
    fire_time: int
    seq: int
    target: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


@dataclass(frozen=True)
class TraceRecord:
    time_us: int
    seq: int
    target: str
    kind: str


def _payload_kind(payload: Any) -> str:
    if isinstance(payload, tuple) and payload and isinstance(payload[0], str):
        return payload[0]
    kind = getattr(payload, "kind", None)
    return kind if isinstance(kind, str) else type(payload).__name__


class Simulator:
    """Single-threaded event loop.

    Handlers are registered per target id; a handler receives the event and
    may schedule further events (including at the current time).
    """

    def __init__(self, record_trace: bool = False) -> None:
        self.clock = VirtualClock()
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[SimEvent], None]] = {}
        self.trace: list[TraceRecord] | None = [] if record_trace else None

    @property
    def now(self) -> int:
        return self.clock.now

    def register(self, target: str, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[target] = handler

    def schedule(self, fire_time: int, target: str, payload: Any = None) -> SimEvent:
        if fire_time < self.clock.now:
            raise SimulationError(
                f"event for {target!r} at t={fire_time} is before now={self.clock.now}"
            )
        event = SimEvent(int(fire_time), self._seq, target, payload)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def pending(self) -> int:
        return len(self._queue)

    def run_until(self, t_end: int) -> int:
        if t_end < self.clock.now:
            raise SimulationError(f"t_end={t_end} is before now={self.clock.now}")
        dispatched = 0
        while self._queue and self._queue[0].fire_time <= t_end:
            event = heapq.heappop(self._queue)
            self.clock.advance_to(event.fire_time)
            if self.trace is not None:
                kind = _payload_kind(event.payload)
                self.trace.append(TraceRecord(event.fire_time, event.seq, event.target, kind))
            handler = self._handlers.get(event.target)
            if handler is not None:
                handler(event)
            dispatched += 1
        self.clock.advance_to(t_end)
        return dispatched


# --- link model -------------------------------------------------------------


@dataclass(frozen=True)
class NoJitter:
    kind: str = "none"


@dataclass(frozen=True)
class UniformJitter:
    a: int
    b: int
    kind: str = "uniform"

    def __post_init__(self) -> None:
        if not 0 <= self.a <= self.b:
            raise ValueError(f"uniform jitter needs 0 <= a <= b, got ({self.a}, {self.b})")


@dataclass(frozen=True)
class NormalJitter:
    """Normal(mu, sigma) truncated below at zero."""

    mu: float
    sigma: float
    kind: str = "normal"

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class TraceJitter:
    """Recorded extra delays (µs), replayed cyclically in send order."""

    values: tuple[int, ...]
    kind: str = "trace"

    def __post_init__(self) -> None:
        if not self.values or min(self.values) < 0:
            raise ValueError("trace jitter needs a non-empty list of non-negative delays")

    @classmethod
    def from_file(cls, path: str | Path) -> TraceJitter:
        lines = Path(path).read_text().split()
        return cls(tuple(int(x) for x in lines))


JitterDist = NoJitter | UniformJitter | NormalJitter | TraceJitter


@dataclass(frozen=True)
class LinkModel:
    base_delay: int
    jitter: JitterDist = NoJitter()
    loss_prob: float = 0.0
    reorder_allowed: bool = False
    bandwidth_limit: float | None = None  # bytes/s

    def __post_init__(self) -> None:
        if self.base_delay < 0:
            raise ValueError(f"base_delay must be >= 0, got {self.base_delay}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"loss_prob must be in [0, 1], got {self.loss_prob}")
        if self.bandwidth_limit is not None and self.bandwidth_limit <= 0:
            raise ValueError("bandwidth_limit must be positive")


class Link:
    """One directed link: a LinkModel plus its own RNG stream and FIFO state.

    ``send`` returns the delivery time in µs, or ``None`` if the message is
    dropped.
    """

    def __init__(self, model: LinkModel, rng: np.random.Generator) -> None:
        self.model = model
        self.rng = rng
        self._last_delivery = -1
        self._busy_until = 0
        self._trace_pos = 0
        self.sent = 0
        self.dropped = 0
        # (send_time, delay, send_index) per delivered message
        self.log: list[tuple[int, int, int]] = []

    def _jitter(self) -> int:
        j = self.model.jitter
        if isinstance(j, NoJitter):
            return 0
        if isinstance(j, UniformJitter):
            return int(self.rng.integers(j.a, j.b, endpoint=True))
        if isinstance(j, NormalJitter):
            return int(round(max(0.0, self.rng.normal(j.mu, j.sigma))))
        value = j.values[self._trace_pos % len(j.values)]
        self._trace_pos += 1
        return value

    def send(self, now: int, size: int = 0) -> int | None:
        m = self.model
        index = self.sent
        self.sent += 1
        # loss is drawn first so the jitter stream does not depend on loss_prob == 0
        lost = m.loss_prob > 0 and self.rng.random() < m.loss_prob
        depart = now
        if m.bandwidth_limit is not None:
            start = max(now, self._busy_until)
            depart = start + math.ceil(size * US_PER_S / m.bandwidth_limit)
            self._busy_until = depart
        delivery = depart + m.base_delay + self._jitter()
        if lost:
            self.dropped += 1
            return None
        if not m.reorder_allowed:
            delivery = max(delivery, self._last_delivery)
        self._last_delivery = max(self._last_delivery, delivery)
        self.log.append((now, delivery - now, index))
        return delivery

    def arrival_order(self) -> list[int]:
        """Send indexes of delivered messages, in delivery order."""
        return [i for _, _, i in sorted(self.log, key=lambda r: (r[0] + r[1], r[2]))]

    def sample_losses(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Vectorised loss draws for a batch of concurrent messages (True = lost).

        Always consumes one uniform per message, so the stream position does
        not depend on ``loss_prob``.
        """
        return self.rng.random(shape) < self.model.loss_prob


def send(link: Link, now: int, size: int = 0) -> int | None:
    return link.send(now, size)


def ms(x: float) -> int:
    return int(round(x * US_PER_MS))


def mean_delay_us(model: LinkModel) -> float:
    j = model.jitter
    if isinstance(j, UniformJitter):
        extra = (j.a + j.b) / 2
    elif isinstance(j, NormalJitter):
        extra = j.mu
    elif isinstance(j, TraceJitter):
        extra = sum(j.values) / len(j.values)
    else:
        extra = 0.0
    return model.base_delay + extra


def max_delay_us(models: Sequence[LinkModel]) -> float:
    out = 0.0
    for m in models:
        j = m.jitter
        if isinstance(j, UniformJitter):
            extra = j.b
        elif isinstance(j, NormalJitter):
            extra = j.mu + 4 * j.sigma
        elif isinstance(j, TraceJitter):
            extra = max(j.values)
        else:
            extra = 0
        out = max(out, m.base_delay + extra)
    return out
