"""Experiment orchestration: wire a scenario into a simulation, run seeds, write the bundle.

Output layout under the output root::

    <scenario>/<seed>/events.csv     time_us,seq,target,kind
    <scenario>/<seed>/timing.json    TimingReport plus verdicts
    <scenario>/<seed>/dtsched.csv    seed,slot,policy,energy_J,mrmse_contrib,queries
    <scenario>/<seed>/dtsched.json   policy -> {avg_power_W, mrmse}
    <scenario>/summary.json          mean and sample stddev across seeds

``mrmse_contrib`` is the slot RMSE divided by the horizon, so the column sums
to the episode MRMSE.
"""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dtsched
from .client import Client
from .metrics import (
    AoiProcess,
    NoData,
    TimingReport,
    average_age,
    classify,
    delay_stats,
    out_of_order_fraction,
    peak_ages,
    round_trip,
)
from .protocol import EntityState
from .scenario import Scenario
from .server import Server
from .sim import Link, Simulator, ms, rng_stream

SCHEMA_VERSION = 1
EVENTS_HEADER = ("time_us", "seq", "target", "kind")
DTSCHED_HEADER = ("seed", "slot", "policy", "energy_J", "mrmse_contrib", "queries")


class NotBracketed(ValueError):
    """The target power is not reachable inside ``[0, lam_max]``."""


# --- game session ------------------------------------------------------------------


class Session:
    """One seeded run of the server/client part of a scenario."""

    def __init__(self, sc: Scenario, seed: int) -> None:
        if sc.server is None:
            raise ValueError(f"scenario {sc.name!r} has no server block")
        self.scenario = sc
        self.seed = seed
        self.sim = Simulator(record_trace=sc.trace_events)
        cfg = sc.server_config()
        entities = {c.id: EntityState(c.id, tuple(c.start)) for c in sc.clients}
        self.server = Server(self.sim, cfg, entities, sc.bot_list())
        self.clients: dict[int, Client] = {}
        self.links: list[Link] = []
        for c in sc.clients:
            client = Client(
                self.sim,
                c.id,
                entities[c.id],
                sc.client_config(c),
                sc.workload(c),
                rng_stream(seed, f"workload:{c.id}"),
                cfg.tick_period,
                cfg.input_dt,
                cfg.speed,
            )
            up = Link(c.uplink.build(sc.base_dir), rng_stream(seed, f"link:up:{c.id}"))
            down = Link(c.downlink.build(sc.base_dir), rng_stream(seed, f"link:down:{c.id}"))
            client.uplink = (up, self._deliver_to(Server.NODE))
            self.server.downlinks[c.id] = (down, self._deliver_to(client.node))
            self.links += [up, down]
            self.clients[c.id] = client
        self.server.start(0)
        for client in self.clients.values():
            client.start(0)

    def _deliver_to(self, node: str):
        def deliver(t: int, msg) -> None:
            self.sim.schedule(t, node, msg)

        return deliver

    def run(self) -> None:
        self.sim.run_until(ms(self.scenario.duration_ms))

    def report(self) -> TimingReport:
        return timing_report(self)


def timing_report(session: Session) -> TimingReport:
    """Summarise a finished session over the scenario's metrics window."""
    sc = session.scenario
    t0, t1 = ms(sc.warmup_ms), ms(sc.duration_ms)
    delays = [d for link in session.links for s, d, _ in link.log if s >= t0]
    lat = delay_stats(delays)
    sent = sum(link.sent for link in session.links)
    dropped = sum(link.dropped for link in session.links)
    ooo_late = ooo_total = 0
    for link in session.links:
        order = link.arrival_order()
        ooo_late += round(out_of_order_fraction(order) * len(order))
        ooo_total += len(order)
    rtts = [round_trip(x) for _, x in session.server.exchanges if x.t1 >= t0]
    corrections = [c for cl in session.clients.values() for c in cl.stats.corrections]

    aoi_avgs: list[float] = []
    aoi_peaks: list[int] = []
    firsts: list[int] = []
    offset_err = 0.0
    for cl in session.clients.values():
        proc: AoiProcess = cl.stats.aoi
        steps = proc.steps()
        if not steps:
            continue
        firsts.append(steps[0][0])
        start = max(t0, steps[0][0])
        if start < t1:
            try:
                aoi_avgs.append(average_age(proc, start, t1))
            except NoData:
                pass
            aoi_peaks += peak_ages(proc, start, t1)
        if cl.offset.raw:
            offset_err = max(offset_err, abs(cl.offset.estimate - cl.cfg.clock_offset))

    rep = TimingReport(
        latency_mean_us=lat.mean,
        latency_max_us=lat.max,
        jitter_std_us=lat.std,
        jitter_p99_spread_us=lat.p99_spread,
        rtt_mean_us=float(np.mean(rtts)) if rtts else 0.0,
        rtt_max_us=float(max(rtts)) if rtts else 0.0,
        aoi_avg_us=float(np.mean(aoi_avgs)) if aoi_avgs else 0.0,
        aoi_peak_us=float(max(aoi_peaks)) if aoi_peaks else 0.0,
        out_of_order_fraction=ooo_late / ooo_total if ooo_total else 0.0,
        loss_fraction=dropped / sent if sent else 0.0,
        correction_mean=float(np.mean(corrections)) if corrections else 0.0,
        correction_max=float(max(corrections)) if corrections else 0.0,
        offset_error_max_us=offset_err,
        first_delivery_us=min(firsts) if firsts else None,
    )
    rep.verdicts = classify(rep, sc.threshold_set())
    return rep


# --- file writers ------------------------------------------------------------------


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_events(session: Session, path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENTS_HEADER)
    for r in session.sim.trace or ():
        w.writerow((r.time_us, r.seq, r.target, r.kind))
    path.write_text(buf.getvalue())


def _write_dtsched(results: Sequence[dtsched.EpisodeResult], index: int, path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DTSCHED_HEADER)
    for res in results:
        seed = res.seeds[index]
        H = res.energy.shape[1]
        energy = res.energy[index]
        contrib = res.rmse[index] / H
        queries = res.queries[index]
        for t in range(H):
            w.writerow((seed, t, res.policy, repr(float(energy[t])), repr(float(contrib[t])), int(queries[t])))
    path.write_text(buf.getvalue())


def output_root(out: str | Path | None = None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get("NETSYNC_OUT", "out"))


# --- run ------------------------------------------------------------------------------


@dataclass
class RunResult:
    directory: Path
    summary: dict

    @property
    def all_pass(self) -> bool:
        return bool(self.summary["all_pass"])


def run_dtsched(sc: Scenario, seeds: Sequence[int]) -> list[dtsched.EpisodeResult]:
    assert sc.dtsched is not None
    dts = sc.dtsched.build()
    return [dtsched.run_episodes(dts, dts.policy(p), seeds) for p in sc.dtsched.policies]


def run(
    sc: Scenario,
    out: str | Path | None = None,
    seed_override: int | None = None,
) -> RunResult:
    """Run every seed of ``sc`` and write the bundle; returns the aggregated summary."""
    seeds = [seed_override] if seed_override is not None else list(sc.seeds)
    root = output_root(out) / sc.name
    root.mkdir(parents=True, exist_ok=True)

    dt_results = run_dtsched(sc, seeds) if sc.dtsched is not None else []
    for i, seed in enumerate(seeds):
        d = root / str(seed)
        d.mkdir(exist_ok=True)
        if sc.server is not None:
            session = Session(sc, seed)
            session.run()
            _write_events(session, d / "events.csv")
            rep = session.report()
            _dump_json({"schema_version": SCHEMA_VERSION, "seed": seed, **rep.to_dict()}, d / "timing.json")
        if dt_results:
            _write_dtsched(dt_results, i, d / "dtsched.csv")
            summary = {
                res.policy: {
                    "avg_power_W": float(res.avg_power[i]),
                    "mrmse": float(res.mrmse[i]),
                }
                for res in dt_results
            }
            _dump_json(summary, d / "dtsched.json")

    summary = aggregate(root, seeds)
    return RunResult(root, summary)


def _mean_std(values: Sequence[float]) -> dict[str, float]:
    vals = [float(v) for v in values]
    std = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return {"mean": statistics.fmean(vals), "std": std}


def aggregate(root: Path, seeds: Sequence[int] | None = None) -> dict:
    """Build and write ``summary.json`` from the per-seed files under ``root``."""
    root = Path(root)
    if seeds is None:
        seeds = sorted(int(p.name) for p in root.iterdir() if p.is_dir() and p.name.isdigit())
    if not seeds:
        raise FileNotFoundError(f"no seed directories under {root}")
    timing = {}
    dt = {}
    for seed in seeds:
        d = root / str(seed)
        if (d / "timing.json").exists():
            timing[seed] = json.loads((d / "timing.json").read_text())
        if (d / "dtsched.json").exists():
            dt[seed] = json.loads((d / "dtsched.json").read_text())

    summary: dict = {"schema_version": SCHEMA_VERSION, "scenario": root.name, "seeds": list(seeds)}
    all_pass = True
    if timing:
        numeric = [
            k
            for k, v in next(iter(timing.values())).items()
            if isinstance(v, (int, float)) and not isinstance(v, bool) and k not in ("seed", "schema_version")
        ]
        summary["timing"] = {
            k: _mean_std([t[k] for t in timing.values() if t.get(k) is not None])
            for k in numeric
            if any(t.get(k) is not None for t in timing.values())
        }
        summary["verdicts"] = {str(s): t["verdicts"] for s, t in timing.items()}
        all_pass = all(all(t["verdicts"].values()) for t in timing.values())
    if dt:
        policies = list(next(iter(dt.values())))
        summary["dtsched"] = {
            p: {
                "avg_power_W": _mean_std([v[p]["avg_power_W"] for v in dt.values()]),
                "mrmse": _mean_std([v[p]["mrmse"] for v in dt.values()]),
            }
            for p in policies
        }
    summary["all_pass"] = all_pass
    _dump_json(summary, root / "summary.json")
    return summary


# --- lambda calibration ------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    lam: float
    power: float
    evaluations: tuple[tuple[float, float], ...]  # (lambda, power) in evaluation order


def calibrate_lambda(
    dts: dtsched.DtScenario,
    seeds: Sequence[int],
    target_power: float,
    lam_max: float = 1000.0,
    rel_tol: float = 0.045,
    max_iter: int = 40,
) -> Calibration:
    """Bisect the energy price so that JCCS average power lands near ``target_power``.

    Power is non-increasing in the price; a violation seen during the search
    raises ``AssertionError``.
    """
    if target_power <= 0:
        raise ValueError("target_power must be positive")
    evals: list[tuple[float, float]] = []

    def power(lam: float) -> float:
        res = dtsched.run_episodes(dts, dts.policy(dtsched.PolicyKind.JCCS, lam), seeds)
        p = float(res.avg_power.mean())
        evals.append((lam, p))
        return p

    def close(p: float) -> bool:
        return abs(p - target_power) <= rel_tol * target_power

    lo, hi = 0.0, float(lam_max)
    p_lo = power(lo)
    if close(p_lo):
        return Calibration(lo, p_lo, tuple(evals))
    p_hi = power(hi)
    if close(p_hi):
        return Calibration(hi, p_hi, tuple(evals))
    # slack absorbs float noise only; power is a step function of lambda
    assert p_hi <= p_lo + 1e-12, f"power rose from {p_lo} to {p_hi} as lambda grew"
    if not p_hi < target_power < p_lo:
        raise NotBracketed(
            f"target {target_power} W outside [{p_hi:.6g}, {p_lo:.6g}] W reachable on lambda in [0, {lam_max}]"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        p = power(mid)
        assert p_hi - 1e-12 <= p <= p_lo + 1e-12, f"power {p} at lambda={mid} breaks monotonicity"
        if close(p):
            return Calibration(mid, p, tuple(evals))
        if p > target_power:
            lo, p_lo = mid, p
        else:
            hi, p_hi = mid, p
    raise NotBracketed(f"no lambda within {rel_tol:.1%} of {target_power} W after {max_iter} steps")


def calibrate_scenario(sc: Scenario, target_power: float, **kw) -> Calibration:
    if sc.dtsched is None:
        raise ValueError(f"scenario {sc.name!r} has no dtsched block")
    return calibrate_lambda(sc.dtsched.build(), sc.seeds, target_power, **kw)


def with_lambda(sc: Scenario, lam: float) -> Scenario:
    """Copy of ``sc`` with the dt-sched price replaced."""
    assert sc.dtsched is not None
    new = sc.model_copy(update={"dtsched": sc.dtsched.model_copy(update={"lam": lam})})
    new._base_dir = sc.base_dir
    return new


def format_summary(summary: dict) -> str:
    lines = [f"scenario {summary['scenario']}  seeds={len(summary['seeds'])}"]
    for k, v in summary.get("timing", {}).items():
        lines.append(f"  {k:<26} {v['mean']:.6g} ± {v['std']:.3g}")
    for s, verdict in summary.get("verdicts", {}).items():
        marks = ", ".join(f"{k}={'pass' if ok else 'FAIL'}" for k, ok in verdict.items()) or "no checks"
        lines.append(f"  seed {s}: {marks}")
    if "dtsched" in summary:
        lines.append(f"  {'policy':<15} {'avg_power_W':>22} {'mrmse':>24}")
        for p, v in summary["dtsched"].items():
            pw, mr = v["avg_power_W"], v["mrmse"]
            lines.append(
                f"  {p:<15} {pw['mean']:>12.4f} ± {pw['std']:<7.4f} {mr['mean']:>12.4f} ± {mr['std']:<9.4g}"
            )
    lines.append(f"  all_pass: {summary['all_pass']}")
    return "\n".join(lines)
