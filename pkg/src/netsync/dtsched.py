"""Digital-twin sensor scheduling.

A set of independent 1-D kinematic objects (position, velocity) is tracked by
a Kalman filter fed from a pool of scalar sensors. Every slot the twin
predicts, decides which sensors to query (subject to a reliability gate and a
per-slot connection limit), pays the query energy, and folds in whatever
measurements survive the uplink.

Arrays carry an optional leading batch axis so that independent seeds can be
advanced together; every per-seed random stream is keyed by the seed alone,
which keeps a seed's trajectory identical whether it runs alone or batched.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .sim import Link, LinkModel, rng_stream

POSITION = 0
VELOCITY = 1
PSD_TOL = 1e-9


class PolicyKind(str, enum.Enum):
    JCCS = "JCCS"
    COST_BG = "Cost-BG"
    CONFIDENCE_BG = "Confidence-BG"
    RC = "RC"


ALL_POLICIES = (PolicyKind.JCCS, PolicyKind.COST_BG, PolicyKind.CONFIDENCE_BG, PolicyKind.RC)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessModel:
    """Constant-velocity objects driven by white acceleration noise of intensity q."""

    tau: float
    q: float
    n_objects: int = 40

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.q < 0:
            raise ConfigError("q must be non-negative")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")

    @property
    def F(self) -> np.ndarray:
        return np.array([[1.0, self.tau], [0.0, 1.0]])

    @property
    def Q(self) -> np.ndarray:
        t = self.tau
        return self.q * np.array([[t**3 / 3, t**2 / 2], [t**2 / 2, t]])


@dataclass(frozen=True)
class SensorMeta:
    sensor_id: int
    kind: int  # POSITION or VELOCITY
    target: int
    r: float
    e: float  # joules per query

    def __post_init__(self) -> None:
        if self.kind not in (POSITION, VELOCITY):
            raise ConfigError(f"sensor {self.sensor_id}: unknown kind {self.kind}")
        if self.r <= 0 or self.e <= 0:
            raise ConfigError(f"sensor {self.sensor_id}: r and e must be positive")


@dataclass
class SensorArrays:
    """Column view of a sensor pool, indexed by sensor_id."""

    kind: np.ndarray
    target: np.ndarray
    r: np.ndarray
    e: np.ndarray

    @classmethod
    def from_meta(cls, sensors: Sequence[SensorMeta]) -> SensorArrays:
        ids = [s.sensor_id for s in sensors]
        if ids != list(range(len(sensors))):
            raise ConfigError("sensor ids must be 0..N-1 in order")
        return cls(
            kind=np.array([s.kind for s in sensors], dtype=np.intp),
            target=np.array([s.target for s in sensors], dtype=np.intp),
            r=np.array([s.r for s in sensors], dtype=float),
            e=np.array([s.e for s in sensors], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.kind)


@dataclass
class Belief:
    mean: np.ndarray  # (..., M, 2)
    cov: np.ndarray  # (..., M, 2, 2)

    def copy(self) -> Belief:
        return Belief(self.mean.copy(), self.cov.copy())


@dataclass(frozen=True)
class SchedulePolicy:
    kind: PolicyKind
    K: int
    gate: float
    lam: float = 0.0
    # "noise": rank by sensor noise r; "posterior": rank by the variance the
    # sensed component would have after the query
    confidence_key: str = "noise"

    def __post_init__(self) -> None:
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.gate < 0:
            raise ConfigError("gate must be >= 0")
        if self.confidence_key not in ("noise", "posterior"):
            raise ConfigError(f"unknown confidence_key {self.confidence_key!r}")


# --- filter -------------------------------------------------------------------


def kalman_predict(belief: Belief, model: ProcessModel) -> Belief:
    F = model.F
    mean = belief.mean @ F.T
    cov = F @ belief.cov @ F.T + model.Q
    return Belief(mean, cov)


def _update_inplace(mean: np.ndarray, cov: np.ndarray, kind: int, z, r) -> None:
    """Scalar update of rows ``mean (..., 2)``, ``cov (..., 2, 2)`` observing one component."""
    Pk = cov[..., :, kind].copy()  # P h
    s = Pk[..., kind] + r
    gain = Pk / s[..., None]
    innov = z - mean[..., kind]
    mean += gain * innov[..., None]
    cov -= gain[..., :, None] * Pk[..., None, :]
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    cov[...] = sym


def kalman_update(belief: Belief, obj: int, z: float, sensor: SensorMeta) -> Belief:
    """Fold one scalar measurement of ``sensor``'s component of object ``obj``."""
    out = belief.copy()
    _update_inplace(out.mean[..., obj, :], out.cov[..., obj, :, :], sensor.kind, z, sensor.r)
    return out


def _voi_arrays(cov: np.ndarray, sensors: SensorArrays) -> np.ndarray:
    """Trace reduction for every sensor: ``cov (..., M, 2, 2)`` -> ``(..., N)``."""
    P = cov[..., sensors.target, :, :]  # (..., N, 2, 2)
    is_pos = sensors.kind == POSITION
    col = np.where(is_pos[:, None], P[..., :, 0], P[..., :, 1])
    pkk = np.where(is_pos, P[..., 0, 0], P[..., 1, 1])
    return (col**2).sum(axis=-1) / (pkk + sensors.r)


def _sensed_variance(cov: np.ndarray, sensors: SensorArrays) -> np.ndarray:
    diag = np.diagonal(cov, axis1=-2, axis2=-1)  # (..., M, 2)
    return diag[..., sensors.target, sensors.kind]


def voi(belief: Belief, sensor: SensorMeta, model: ProcessModel | None = None) -> float:
    """Expected covariance-trace reduction from querying ``sensor``.

    ``belief`` is taken to be already predicted for the slot; the result does
    not depend on the measured value.
    """
    P = belief.cov[sensor.target]
    col = P[:, sensor.kind]
    return float((col @ col) / (col[sensor.kind] + sensor.r))


def min_eigenvalue(cov: np.ndarray) -> np.ndarray:
    a = cov[..., 0, 0]
    d = cov[..., 1, 1]
    b = cov[..., 0, 1]
    return (a + d) / 2 - np.sqrt(((a - d) / 2) ** 2 + b**2)


# --- scheduling ---------------------------------------------------------------


def _select_batch(
    cov: np.ndarray,
    sensors: SensorArrays,
    policy: SchedulePolicy,
    rc_keys: np.ndarray | None,
    energy: np.ndarray | None = None,
) -> np.ndarray:
    """Query order per batch row: ``(S, K)`` sensor indices, ``-1`` padded.

    ``energy (S, N)`` overrides ``sensors.e`` when pools differ per row.
    """
    S = cov.shape[0]
    K = policy.K
    out = np.full((S, K), -1, dtype=np.intp)
    if K == 0:
        return out
    eligible = _sensed_variance(cov, sensors) > policy.gate  # (S, N)
    if energy is None:
        energy = np.broadcast_to(sensors.e, eligible.shape)

    if policy.kind is PolicyKind.JCCS:
        work = cov.copy()
        cost = policy.lam * energy
        chosen = np.zeros_like(eligible)
        rows = np.arange(S)
        for k in range(K):
            score = _voi_arrays(work, sensors) - cost
            score = np.where(eligible & ~chosen, score, -np.inf)
            best = np.argmax(score, axis=1)  # first max -> lowest sensor_id on ties
            ok = score[rows, best] > 0
            if not ok.any():
                break
            r_ok = rows[ok]
            b_ok = best[ok]
            out[r_ok, k] = b_ok
            chosen[r_ok, b_ok] = True
            tgt = sensors.target[b_ok]
            # covariance update does not need the measured value
            m = np.zeros((len(r_ok), 2))
            c = work[r_ok, tgt]
            for kind in (POSITION, VELOCITY):
                sel = sensors.kind[b_ok] == kind
                if sel.any():
                    cc = c[sel]
                    _update_inplace(m[sel], cc, kind, 0.0, sensors.r[b_ok][sel])
                    c[sel] = cc
            work[r_ok, tgt] = c
        return out

    if policy.kind is PolicyKind.COST_BG:
        key = energy
    elif policy.kind is PolicyKind.CONFIDENCE_BG:
        if policy.confidence_key == "noise":
            key = np.broadcast_to(sensors.r, eligible.shape)
        else:
            pkk = _sensed_variance(cov, sensors)
            key = pkk * sensors.r / (pkk + sensors.r)
    else:
        if rc_keys is None:
            raise ValueError("RC policy needs random keys")
        key = rc_keys
    key = np.where(eligible, key, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :K]
    taken = np.take_along_axis(key, order, axis=1)
    out[:, : order.shape[1]] = np.where(np.isfinite(taken), order, -1)
    return out


def select_sensors(
    belief: Belief,
    sensors: Sequence[SensorMeta],
    policy: SchedulePolicy,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Sensor ids to query this slot, in selection order.

    ``belief`` must already be predicted for the slot.
    """
    arrays = SensorArrays.from_meta(sensors)
    rc_keys = None
    if policy.kind is PolicyKind.RC:
        if rng is None:
            raise ValueError("RC policy needs an rng")
        rc_keys = rng.random((1, len(arrays)))
    order = _select_batch(belief.cov[None], arrays, policy, rc_keys)[0]
    return [int(i) for i in order if i >= 0]


def marginal_score(
    belief: Belief, sensors: Sequence[SensorMeta], chosen: Iterable[int], lam: float
) -> float:
    """Total trace reduction of querying ``chosen`` together, minus ``lam`` times their energy."""
    arrays = SensorArrays.from_meta(sensors)
    cov = belief.cov.copy()
    before = np.trace(cov, axis1=-2, axis2=-1).sum()
    energy = 0.0
    for sid in chosen:
        s = sensors[sid]
        m = np.zeros(2)
        _update_inplace(m, cov[s.target], s.kind, 0.0, arrays.r[sid])
        energy += s.e
    after = np.trace(cov, axis1=-2, axis2=-1).sum()
    return float(before - after - lam * energy)


# --- episodes -----------------------------------------------------------------


@dataclass(frozen=True)
class DtScenario:
    horizon: int = 10_000
    tau: float = 0.1
    q: float = 0.03
    n_objects: int = 40
    r_position: float = 0.25
    r_velocity: float = 0.09
    energy_range: tuple[float, float] = (0.040, 0.060)
    K: int = 2
    gate: float = 0.05
    lam: float = 60.0
    initial_var: tuple[float, float] = (1.0, 0.25)
    mismatch: float = 1.0
    link: LinkModel = field(default_factory=lambda: LinkModel(base_delay=5_000))
    confidence_key: str = "noise"
    block: int = 500

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        lo, hi = self.energy_range
        if not 0 < lo <= hi:
            raise ConfigError("energy_range must satisfy 0 < lo <= hi")
        if self.r_position <= 0 or self.r_velocity <= 0:
            raise ConfigError("sensor noise variances must be positive")
        if self.mismatch <= 0:
            raise ConfigError("mismatch must be positive")
        ProcessModel(self.tau, self.q, self.n_objects)
        SchedulePolicy(PolicyKind.JCCS, self.K, self.gate, self.lam, self.confidence_key)

    @property
    def model(self) -> ProcessModel:
        return ProcessModel(self.tau, self.q, self.n_objects)

    def policy(self, kind: PolicyKind | str, lam: float | None = None) -> SchedulePolicy:
        return SchedulePolicy(
            PolicyKind(kind),
            self.K,
            self.gate,
            self.lam if lam is None else lam,
            self.confidence_key,
        )

    def sensors(self, seed: int) -> list[SensorMeta]:
        """Default pool: one position and one velocity sensor per object.

        Ids 0..M-1 are position sensors, M..2M-1 velocity sensors.
        """
        M = self.n_objects
        g = rng_stream(seed, "dt.sensors")
        energies = g.uniform(self.energy_range[0], self.energy_range[1], size=2 * M)
        out = []
        for i in range(2 * M):
            kind = POSITION if i < M else VELOCITY
            r = self.r_position if kind == POSITION else self.r_velocity
            out.append(SensorMeta(i, kind, i % M, r, float(energies[i])))
        return out


@dataclass
class EpisodeResult:
    """Per-slot traces for a batch of seeds (first axis = seed)."""

    seeds: list[int]
    policy: str
    tau: float
    energy: np.ndarray  # (S, H) joules spent per slot
    rmse: np.ndarray  # (S, H)
    queries: np.ndarray  # (S, H)
    delivered: np.ndarray  # (S, H)
    sq_error: np.ndarray  # (S, 2) time-summed squared error per component kind, averaged over objects
    post_var: np.ndarray  # (S, 2) same for posterior variance

    @property
    def avg_power(self) -> np.ndarray:
        H = self.energy.shape[1]
        return self.energy.sum(axis=1) / (H * self.tau)

    @property
    def mrmse(self) -> np.ndarray:
        return self.rmse.mean(axis=1)

    def summary(self) -> dict[str, float]:
        return {
            "avg_power_W": float(self.avg_power.mean()),
            "mrmse": float(self.mrmse.mean()),
        }


def _noise_factor(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(Q)
    return V * np.sqrt(np.clip(w, 0.0, None))


def run_episodes(
    scenario: DtScenario,
    policy: SchedulePolicy,
    seeds: Sequence[int],
    check_psd: bool = True,
) -> EpisodeResult:
    """Simulate ``len(seeds)`` independent episodes in lock-step."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("need at least one seed")
    S, H, M, B = len(seeds), scenario.horizon, scenario.n_objects, scenario.block
    model = scenario.model
    F = model.F
    Q = model.Q
    truth_factor = _noise_factor(Q * scenario.mismatch)

    pools = [SensorArrays.from_meta(scenario.sensors(s)) for s in seeds]
    sensors = pools[0]
    N = len(sensors)
    # kind/target/r are seed independent; energy is per seed
    energy_tab = np.stack([p.e for p in pools])  # (S, N)
    meas_sd = np.sqrt(sensors.r)

    truth_rng = [rng_stream(s, "dt.truth") for s in seeds]
    meas_rng = [rng_stream(s, "dt.meas") for s in seeds]
    links = [Link(scenario.link, rng_stream(s, "dt.link")) for s in seeds]
    rc_rng = [rng_stream(s, "dt.rc") for s in seeds]

    p0 = np.diag(scenario.initial_var).astype(float)
    x = np.stack([g.standard_normal((M, 2)) for g in truth_rng]) * np.sqrt(scenario.initial_var)
    mean = np.zeros((S, M, 2))
    cov = np.broadcast_to(p0, (S, M, 2, 2)).copy()

    energy = np.zeros((S, H))
    rmse = np.zeros((S, H))
    queries = np.zeros((S, H), dtype=np.int32)
    delivered = np.zeros((S, H), dtype=np.int32)
    sq_error = np.zeros((S, 2))
    post_var = np.zeros((S, 2))
    rows = np.arange(S)

    for start in range(0, H, B):
        n = min(B, H - start)
        w = np.stack([g.standard_normal((n, M, 2)) for g in truth_rng]) @ truth_factor.T
        v = np.stack([g.standard_normal((n, N)) for g in meas_rng]) * meas_sd
        lost = np.stack([lk.sample_losses((n, N)) for lk in links])
        keys = np.stack([g.random((n, N)) for g in rc_rng]) if policy.kind is PolicyKind.RC else None

        for j in range(n):
            t = start + j
            x = x @ F.T + w[:, j]
            mean = mean @ F.T
            cov = F @ cov @ F.T + Q

            order = _select_batch(cov, sensors, policy, None if keys is None else keys[:, j], energy_tab)
            for k in range(order.shape[1]):
                sid = order[:, k]
                active = sid >= 0
                if not active.any():
                    break
                r_a = rows[active]
                s_a = sid[active]
                queries[r_a, t] += 1
                energy[r_a, t] += energy_tab[r_a, s_a]
                got = ~lost[r_a, j, s_a]
                r_a, s_a = r_a[got], s_a[got]
                if len(r_a) == 0:
                    continue
                delivered[r_a, t] += 1
                tgt = sensors.target[s_a]
                kind = sensors.kind[s_a]
                z = x[r_a, tgt, kind] + v[r_a, j, s_a]
                for kd in (POSITION, VELOCITY):
                    sel = kind == kd
                    if not sel.any():
                        continue
                    rr, tt = r_a[sel], tgt[sel]
                    mm = mean[rr, tt]
                    cc = cov[rr, tt]
                    _update_inplace(mm, cc, kd, z[sel], sensors.r[s_a[sel]])
                    mean[rr, tt] = mm
                    cov[rr, tt] = cc

            if check_psd and (min_eigenvalue(cov) < -PSD_TOL).any():
                raise FloatingPointError(f"covariance lost PSD at slot {t}")
            err = mean - x
            rmse[:, t] = np.sqrt((err**2).mean(axis=(1, 2)))
            sq_error += (err**2).mean(axis=1)
            post_var += np.diagonal(cov, axis1=-2, axis2=-1).mean(axis=1)

    return EpisodeResult(
        seeds=seeds,
        policy=policy.kind.value,
        tau=scenario.tau,
        energy=energy,
        rmse=rmse,
        queries=queries,
        delivered=delivered,
        sq_error=sq_error / H,
        post_var=post_var / H,
    )


def run_episode(scenario: DtScenario, policy: SchedulePolicy, seed: int) -> tuple[float, float]:
    """(average power in W, MRMSE) of one seeded episode."""
    res = run_episodes(scenario, policy, [seed])
    return float(res.avg_power[0]), float(res.mrmse[0])


def compare_policies(
    scenario: DtScenario, seeds: Sequence[int], lam: float | None = None
) -> dict[str, EpisodeResult]:
    return {
        kind.value: run_episodes(scenario, scenario.policy(kind, lam), seeds)
        for kind in ALL_POLICIES
    }


def open_loop_rmse_bound(scenario: DtScenario) -> float:
    """Approximate no-query RMSE at the end of the horizon (for sanity checks)."""
    model = scenario.model
    P = np.diag(scenario.initial_var).astype(float)
    for _ in range(scenario.horizon):
        P = model.F @ P @ model.F.T + model.Q
    return math.sqrt(np.trace(P) / 2)
