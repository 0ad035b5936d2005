"""Scenario files: strict JSON schema and conversion to runtime configs.

Times are given in milliseconds in the file and converted to integer
microseconds. Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from . import dtsched
from .client import ClientConfig, Workload
from .metrics import PRESETS, Thresholds
from .protocol import Action, ActionKind, PriorityConfig
from .server import Bot, Deadline, ServerConfig, WaitAll
from .sim import LinkModel, NoJitter, NormalJitter, TraceJitter, UniformJitter, ms


class ScenarioError(ValueError):
    """Unparseable or invalid scenario file."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NoJitterSpec(_Strict):
    kind: Literal["none"]


class UniformJitterSpec(_Strict):
    kind: Literal["uniform"]
    a_ms: float = Field(ge=0)
    b_ms: float = Field(ge=0)

    @model_validator(mode="after")
    def _order(self):
        if self.b_ms < self.a_ms:
            raise ValueError("b_ms must be >= a_ms")
        return self


class NormalJitterSpec(_Strict):
    kind: Literal["normal"]
    mu_ms: float
    sigma_ms: float = Field(ge=0)


class TraceJitterSpec(_Strict):
    kind: Literal["trace"]
    path: str | None = None
    values_ms: list[float] | None = None

    @model_validator(mode="after")
    def _source(self):
        if (self.path is None) == (self.values_ms is None):
            raise ValueError("give exactly one of path or values_ms")
        return self


JitterSpec = Annotated[
    Union[NoJitterSpec, UniformJitterSpec, NormalJitterSpec, TraceJitterSpec],
    Field(discriminator="kind"),
]


class LinkSpec(_Strict):
    base_delay_ms: float = Field(ge=0)
    jitter: JitterSpec = NoJitterSpec(kind="none")
    loss_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    reorder_allowed: bool = False
    bandwidth_Bps: float | None = Field(default=None, gt=0)

    def build(self, base_dir: Path | None = None) -> LinkModel:
        j = self.jitter
        if isinstance(j, UniformJitterSpec):
            jitter = UniformJitter(ms(j.a_ms), ms(j.b_ms))
        elif isinstance(j, NormalJitterSpec):
            jitter = NormalJitter(j.mu_ms * 1000, j.sigma_ms * 1000)
        elif isinstance(j, TraceJitterSpec):
            if j.values_ms is not None:
                jitter = TraceJitter(tuple(ms(v) for v in j.values_ms))
            else:
                p = Path(j.path)
                if not p.is_absolute() and base_dir is not None:
                    p = base_dir / p
                jitter = TraceJitter.from_file(p)
        else:
            jitter = NoJitter()
        return LinkModel(ms(self.base_delay_ms), jitter, self.loss_prob, self.reorder_allowed, self.bandwidth_Bps)


class WaitAllSpec(_Strict):
    policy: Literal["wait_all"]
    disconnect_ticks: int = Field(default=10, ge=1)


class DeadlineSpec(_Strict):
    policy: Literal["deadline"]
    D_ms: float = Field(ge=0)


GatherSpec = Annotated[Union[WaitAllSpec, DeadlineSpec], Field(discriminator="policy")]


class PrioritySpec(_Strict):
    budget_per_tick: int = Field(default=8, ge=1)
    w_staleness: float = Field(default=1.0, ge=0)
    w_relevance: float = Field(default=1.0, ge=0)
    relevance_radius: float = Field(default=50.0, gt=0)


class ServerSpec(_Strict):
    tick_period_ms: float = Field(gt=0)
    history_horizon_ms: float = Field(gt=0)
    gather: GatherSpec = WaitAllSpec(policy="wait_all")
    priority: PrioritySpec = PrioritySpec()
    speed: float = Field(default=5.0, gt=0)
    hit_radius: float = Field(default=0.5, gt=0)
    lag_compensation: bool = True
    sync_every_ticks: int = Field(default=4, ge=1)


class ScriptStep(_Strict):
    tick: int = Field(ge=0)
    action: Literal["idle", "move", "fire"]
    vec: tuple[float, float] = (0.0, 0.0)


class WorkloadSpec(_Strict):
    kind: Literal["random_walk", "script", "idle"] = "random_walk"
    turn_prob: float = Field(default=0.2, ge=0, le=1)
    idle_prob: float = Field(default=0.1, ge=0, le=1)
    script: list[ScriptStep] = []
    input_ticks: int | None = Field(default=None, ge=0)
    fire_every: int = Field(default=0, ge=0)
    fire_target: int | None = None


class ClientSpec(_Strict):
    id: int = Field(ge=0)
    uplink: LinkSpec
    downlink: LinkSpec
    render_delay_ms: float | None = Field(default=None, ge=0)
    extrapolation_cap_ms: float = Field(default=0.0, ge=0)
    clock_offset_ms: float = 0.0
    start: tuple[float, float] = (0.0, 0.0)
    workload: WorkloadSpec = WorkloadSpec()


class BotSpec(_Strict):
    id: int = Field(ge=0)
    start: tuple[float, float]
    velocity: tuple[float, float]
    bounds: tuple[float, float, float, float] | None = None


class ThresholdSpec(_Strict):
    max_rtt_mean_ms: float | None = None
    max_rtt_max_ms: float | None = None
    max_one_way_ms: float | None = None
    min_delivery_ratio: float | None = Field(default=None, ge=0, le=1)


class DtSchedSpec(_Strict):
    horizon: int = Field(default=10_000, ge=1)
    tau_s: float = Field(default=0.1, gt=0)
    q: float = Field(default=0.03, ge=0)
    n_objects: int = Field(default=40, ge=1)
    r_position: float = Field(default=0.25, gt=0)
    r_velocity: float = Field(default=0.09, gt=0)
    energy_range_J: tuple[float, float] = (0.040, 0.060)
    K: int = Field(default=2, ge=0)
    gate: float = Field(default=0.05, ge=0)
    lam: float = Field(default=60.0, ge=0, alias="lambda")
    initial_var: tuple[float, float] = (1.0, 0.25)
    mismatch: float = Field(default=1.0, gt=0)
    link: LinkSpec = LinkSpec(base_delay_ms=5.0)
    confidence_key: Literal["noise", "posterior"] = "noise"
    policies: list[Literal["JCCS", "Cost-BG", "Confidence-BG", "RC"]] = [
        "JCCS",
        "Cost-BG",
        "Confidence-BG",
        "RC",
    ]

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    def build(self) -> dtsched.DtScenario:
        return dtsched.DtScenario(
            horizon=self.horizon,
            tau=self.tau_s,
            q=self.q,
            n_objects=self.n_objects,
            r_position=self.r_position,
            r_velocity=self.r_velocity,
            energy_range=tuple(self.energy_range_J),
            K=self.K,
            gate=self.gate,
            lam=self.lam,
            initial_var=tuple(self.initial_var),
            mismatch=self.mismatch,
            link=self.link.build(),
            confidence_key=self.confidence_key,
        )


class Scenario(_Strict):
    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    preset: Literal["FPS", "VR", "IIoT", "custom"] = "custom"
    seeds: list[int] = Field(min_length=1)
    duration_ms: float = Field(ge=0)
    warmup_ms: float = Field(default=0.0, ge=0)
    server: ServerSpec | None = None
    clients: list[ClientSpec] = []
    bots: list[BotSpec] = []
    thresholds: ThresholdSpec | None = None
    dtsched: DtSchedSpec | None = None
    trace_events: bool = True

    _base_dir: Path | None = PrivateAttr(default=None)

    @property
    def base_dir(self) -> Path | None:
        return self._base_dir

    @model_validator(mode="after")
    def _references(self):
        if self.clients and self.server is None:
            raise ValueError("clients given without a server block")
        if self.server is not None and not self.clients:
            raise ValueError("server block needs at least one client")
        ids = [c.id for c in self.clients] + [b.id for b in self.bots]
        if len(ids) != len(set(ids)):
            raise ValueError("client and bot ids must be unique")
        for c in self.clients:
            t = c.workload.fire_target
            if t is not None and (t not in ids or t == c.id):
                raise ValueError(f"client {c.id}: fire_target {t} does not name another entity")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be non-negative")
        if self.warmup_ms > self.duration_ms:
            raise ValueError("warmup_ms exceeds duration_ms")
        return self

    # -- conversions

    def server_config(self) -> ServerConfig:
        s = self.server
        assert s is not None
        gather = (
            WaitAll(s.gather.disconnect_ticks)
            if isinstance(s.gather, WaitAllSpec)
            else Deadline(ms(s.gather.D_ms))
        )
        render = max((self.render_delay(c) for c in self.clients), default=0)
        return ServerConfig(
            tick_period=ms(s.tick_period_ms),
            gather=gather,
            history_horizon=ms(s.history_horizon_ms),
            snapshot_priority=PriorityConfig(**s.priority.model_dump()),
            speed=s.speed,
            input_dt=s.tick_period_ms / 1000,
            hit_radius=s.hit_radius,
            lag_compensation=s.lag_compensation,
            interp_delay=render,
            sync_every_ticks=s.sync_every_ticks,
        )

    def render_delay(self, c: ClientSpec) -> int:
        # default: two snapshot intervals
        assert self.server is not None
        if c.render_delay_ms is None:
            return 2 * ms(self.server.tick_period_ms)
        return ms(c.render_delay_ms)

    def client_config(self, c: ClientSpec) -> ClientConfig:
        return ClientConfig(self.render_delay(c), ms(c.extrapolation_cap_ms), ms(c.clock_offset_ms))

    @staticmethod
    def workload(c: ClientSpec) -> Workload:
        w = c.workload
        steps = tuple(
            (st.tick, Action(_ACTIONS[st.action], (float(st.vec[0]), float(st.vec[1])))) for st in w.script
        )
        return Workload(w.kind, w.turn_prob, w.idle_prob, steps, w.input_ticks, w.fire_every, w.fire_target)

    def bot_list(self) -> list[Bot]:
        return [Bot(b.id, tuple(b.start), tuple(b.velocity), b.bounds) for b in self.bots]

    def threshold_set(self) -> Thresholds:
        if self.thresholds is None:
            return PRESETS[self.preset]
        t = self.thresholds
        conv = lambda v: None if v is None else v * 1000  # noqa: E731
        return Thresholds(
            conv(t.max_rtt_mean_ms), conv(t.max_rtt_max_ms), conv(t.max_one_way_ms), t.min_delivery_ratio
        )


_ACTIONS = {"idle": ActionKind.IDLE, "move": ActionKind.MOVE, "fire": ActionKind.FIRE}


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return Scenario.model_validate(raw)
    except ValidationError as exc:
        raise ScenarioError(f"{source}: {_format_errors(exc)}") from None


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("netsync") / "scenarios"
    return {p.name.removesuffix(".json"): Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def resolve_path(path_or_name: str | Path) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if str(path_or_name) in bundled:
        return bundled[str(path_or_name)]
    raise ScenarioError(f"scenario {path_or_name!s} not found (no such file or bundled preset)")


def load_scenario(path: str | Path) -> Scenario:
    p = resolve_path(path)
    sc = parse_scenario(p.read_text(), str(p))
    sc._base_dir = p.parent
    return sc
