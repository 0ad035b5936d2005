"""Timing metrics: age of information, delay statistics, clock offset, threshold checks."""

from __future__ import annotations

import math
import statistics
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

US_PER_MS = 1_000


class NoData(LookupError):
    """Age is undefined before the first delivery."""


# --- age of information ------------------------------------------------------------


@dataclass
class AoiProcess:
    """Receiver-side age process built from (generation_time, delivery_time) pairs."""

    deliveries: list[tuple[int, int]] = field(default_factory=list)
    t_start: int | None = None
    t_end: int | None = None

    def __post_init__(self) -> None:
        for g, d in self.deliveries:
            if d < g:
                raise ValueError(f"delivery {d} precedes generation {g}")

    def add(self, generation: int, delivery: int) -> None:
        if delivery < generation:
            raise ValueError(f"delivery {delivery} precedes generation {generation}")
        self.deliveries.append((generation, delivery))

    def steps(self) -> list[tuple[int, int]]:
        """(time, freshest generation) at every instant the freshest generation improves."""
        out: list[tuple[int, int]] = []
        for g, d in sorted(self.deliveries, key=lambda p: (p[1], p[0])):
            if out and g <= out[-1][1]:
                continue  # stale packet: older than what the receiver already has
            if out and out[-1][0] == d:
                out[-1] = (d, g)
            else:
                out.append((d, g))
        return out


def age_at(proc: AoiProcess, t: int) -> int:
    freshest = None
    for g, d in proc.deliveries:
        if d <= t and (freshest is None or g > freshest):
            freshest = g
    if freshest is None:
        raise NoData(f"no delivery at or before t={t}")
    return t - freshest


def average_age(proc: AoiProcess, t_start: int | None = None, t_end: int | None = None) -> float:
    """Exact time-average of the sawtooth over ``[t_start, t_end]``.

    Between improvements the age rises with slope one, so each piece is a
    trapezoid; with integer times the doubled area is an exact integer.
    """
    t_start = proc.t_start if t_start is None else t_start
    t_end = proc.t_end if t_end is None else t_end
    steps = proc.steps()
    if not steps or t_start is None or t_end is None:
        raise NoData("empty process or missing window")
    if steps[0][0] > t_start:
        raise NoData(f"window starts at {t_start}, before the first delivery at {steps[0][0]}")
    if t_end <= t_start:
        raise ValueError("window must have positive length")
    area2 = 0
    for i, (t, g) in enumerate(steps):
        seg_end = steps[i + 1][0] if i + 1 < len(steps) else t_end
        a, b = max(t, t_start), min(seg_end, t_end)
        if b <= a:
            continue
        area2 += (b - a) * (a + b - 2 * g)
    return area2 / (2 * (t_end - t_start))


def peak_ages(proc: AoiProcess, t_start: int | None = None, t_end: int | None = None) -> list[int]:
    """Age just before each improvement (the sawtooth peaks) inside the window."""
    steps = proc.steps()
    lo = -math.inf if t_start is None else t_start
    hi = math.inf if t_end is None else t_end
    return [t - g_prev for (_, g_prev), (t, _) in zip(steps, steps[1:]) if lo < t <= hi]


# --- clock offset --------------------------------------------------------------------


@dataclass(frozen=True)
class SyncExchange:
    """Two-way exchange timestamps: master send, slave receive, slave send, master receive."""

    t1: int
    t2: int
    t3: int
    t4: int


def estimate_offset(x: SyncExchange) -> float:
    """Slave-minus-master clock offset; exact when both directions take equal time."""
    return ((x.t2 - x.t1) - (x.t4 - x.t3)) / 2


def round_trip(x: SyncExchange) -> int:
    return (x.t4 - x.t1) - (x.t3 - x.t2)


class OffsetTracker:
    """Sliding median over the last ``k`` per-exchange offset estimates."""

    def __init__(self, k: int = 5) -> None:
        self.raw: list[float] = []
        self._window: deque[float] = deque(maxlen=k)

    def add(self, x: SyncExchange) -> float:
        est = estimate_offset(x)
        self.raw.append(est)
        self._window.append(est)
        return self.estimate

    @property
    def estimate(self) -> float:
        if not self._window:
            return 0.0
        return float(statistics.median(self._window))


# --- delay statistics ------------------------------------------------------------------


@dataclass(frozen=True)
class DelayStats:
    count: int
    mean: float
    max: float
    std: float
    p99_spread: float  # 99th percentile minus minimum


def delay_stats(delays: Sequence[float]) -> DelayStats:
    if len(delays) == 0:
        return DelayStats(0, 0.0, 0.0, 0.0, 0.0)
    arr = np.asarray(delays, dtype=float)
    return DelayStats(
        count=len(arr),
        mean=float(arr.mean()),
        max=float(arr.max()),
        std=float(arr.std()),
        p99_spread=float(np.percentile(arr, 99) - arr.min()),
    )


def out_of_order_fraction(seqs: Iterable[int]) -> float:
    """Share of arrivals carrying a lower sequence number than one already seen."""
    seen = -math.inf
    late = total = 0
    for s in seqs:
        total += 1
        if s < seen:
            late += 1
        seen = max(seen, s)
    return late / total if total else 0.0


# --- reports & thresholds ----------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    max_rtt_mean_us: float | None = None
    max_rtt_max_us: float | None = None
    max_one_way_us: float | None = None
    min_delivery_ratio: float | None = None


PRESETS: dict[str, Thresholds] = {
    # user dissatisfaction for first-person shooters sets in around 100 ms RTT
    "FPS": Thresholds(max_rtt_mean_us=100 * US_PER_MS),
    # motion-to-photon round trip 20 ms, of which ~7 ms is left for transmission
    "VR": Thresholds(max_rtt_max_us=20 * US_PER_MS, max_one_way_us=7 * US_PER_MS),
    # industrial control: one-way < 1 ms, reliability 99.9999 %
    "IIoT": Thresholds(max_one_way_us=1 * US_PER_MS, min_delivery_ratio=0.999999),
    "custom": Thresholds(),
}


@dataclass
class TimingReport:
    latency_mean_us: float = 0.0
    latency_max_us: float = 0.0
    jitter_std_us: float = 0.0
    jitter_p99_spread_us: float = 0.0
    rtt_mean_us: float = 0.0
    rtt_max_us: float = 0.0
    aoi_avg_us: float = 0.0
    aoi_peak_us: float = 0.0
    out_of_order_fraction: float = 0.0
    loss_fraction: float = 0.0
    correction_mean: float = 0.0
    correction_max: float = 0.0
    offset_error_max_us: float = 0.0
    first_delivery_us: int | None = None
    verdicts: dict[str, bool] = field(default_factory=dict)

    @property
    def delivery_ratio(self) -> float:
        return 1.0 - self.loss_fraction

    def to_dict(self) -> dict:
        out = asdict(self)
        out["delivery_ratio"] = self.delivery_ratio
        return out


def classify(report: TimingReport, preset: str | Thresholds) -> dict[str, bool]:
    """Pass/fail per requirement of a preset class."""
    th = PRESETS[preset] if isinstance(preset, str) else preset
    out: dict[str, bool] = {}
    if th.max_rtt_mean_us is not None:
        out["rtt_mean"] = report.rtt_mean_us <= th.max_rtt_mean_us
    if th.max_rtt_max_us is not None:
        out["rtt_max"] = report.rtt_max_us <= th.max_rtt_max_us
    if th.max_one_way_us is not None:
        out["one_way_max"] = report.latency_max_us <= th.max_one_way_us
    if th.min_delivery_ratio is not None:
        out["delivery_ratio"] = report.delivery_ratio >= th.min_delivery_ratio
    return out


def report_from_samples(
    one_way: Sequence[float],
    rtts: Sequence[float] = (),
    sent: int | None = None,
    lost: int = 0,
) -> TimingReport:
    """Delay/RTT/loss part of a report built directly from raw samples."""
    lat = delay_stats(one_way)
    sent = len(one_way) + lost if sent is None else sent
    if lost > sent:
        raise ValueError("lost exceeds sent")
    return TimingReport(
        latency_mean_us=lat.mean,
        latency_max_us=lat.max,
        jitter_std_us=lat.std,
        jitter_p99_spread_us=lat.p99_spread,
        rtt_mean_us=float(np.mean(rtts)) if len(rtts) else 0.0,
        rtt_max_us=float(np.max(rtts)) if len(rtts) else 0.0,
        loss_fraction=lost / sent if sent else 0.0,
    )
