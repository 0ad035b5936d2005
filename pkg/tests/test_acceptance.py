"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line in the run summary."""

from __future__ import annotations

import itertools
import json
import math
import time

import numpy as np
import pytest

from netsync import harness
from netsync.dtsched import (
    Belief,
    PolicyKind,
    SchedulePolicy,
    SensorMeta,
    marginal_score,
    select_sensors,
)
from netsync.metrics import (
    AoiProcess,
    SyncExchange,
    average_age,
    classify,
    estimate_offset,
    peak_ages,
    report_from_samples,
)
from netsync.scenario import load_scenario, parse_scenario
from netsync.server import Bot
from netsync.sim import Link, LinkModel, Simulator, ms, rng_stream

from conftest import link


def scenario(**raw):
    base = {"name": "acc", "seeds": [1]}
    base.update(raw)
    return parse_scenario(json.dumps(base))


def one_client(uplink, downlink, duration_ms, server=None, client=None, bots=()):
    srv = {"tick_period_ms": 50, "history_horizon_ms": 1000}
    srv.update(server or {})
    cl = {"id": 1, "uplink": uplink, "downlink": downlink}
    cl.update(client or {})
    return scenario(duration_ms=duration_ms, server=srv, clients=[cl], bots=list(bots))


# --- 1 -----------------------------------------------------------------------------


def test_c01_scheduler_comparison_and_power_calibration(criterion):
    sc = load_scenario("dtsched_default")
    assert len(sc.seeds) == 20
    t0 = time.perf_counter()
    results = {r.policy: r for r in harness.run_dtsched(sc, sc.seeds)}
    elapsed = time.perf_counter() - t0
    power = {p: float(r.avg_power.mean()) for p, r in results.items()}
    mrmse = {p: float(r.mrmse.mean()) for p, r in results.items()}
    power_ratio = power["JCCS"] / power["Cost-BG"]
    mrmse_ratio = mrmse["Cost-BG"] / mrmse["JCCS"]
    lowest = all(power["JCCS"] < power[p] and mrmse["JCCS"] < mrmse[p] for p in power if p != "JCCS")

    cal = harness.calibrate_scenario(sc, 0.42)
    calibrated = 0.40 <= cal.power <= 0.44

    checks = {
        "a": power_ratio <= 0.6,
        "b": mrmse_ratio >= 1.2,
        "c": lowest,
        "calibrated": calibrated,
        "runtime": elapsed < 120,
    }
    ok = all(checks.values())
    criterion(
        1,
        "scheduler comparison",
        ok,
        f"P_JCCS/P_CostBG={power_ratio:.3f} MRMSE_CostBG/MRMSE_JCCS={mrmse_ratio:.3g} "
        f"JCCS lowest={lowest} lambda*={cal.lam:.4g} -> {cal.power:.4f} W, run {elapsed:.1f}s",
    )
    assert ok, (checks, power, mrmse)


# --- 2 -----------------------------------------------------------------------------


def periodic_source(period_us: int, delay_us: int, cycles: int) -> AoiProcess:
    """Updates generated every ``period_us`` sent over a fixed-delay link."""
    sim = Simulator()
    lk = Link(LinkModel(delay_us), rng_stream(0, "aoi"))
    proc = AoiProcess()

    def source(ev):
        sim.schedule(lk.send(sim.now), "sink", sim.now)
        if ev.payload + 1 < cycles:
            sim.schedule(sim.now + period_us, "source", ev.payload + 1)

    sim.register("source", source)
    sim.register("sink", lambda ev: proc.add(ev.payload, sim.now))
    sim.schedule(0, "source", 0)
    sim.run_until(cycles * period_us + delay_us)
    return proc


def test_c02_age_of_information_closed_form(criterion):
    worst_rel = 0.0
    peaks_exact = True
    for T_ms, d_ms in itertools.product((5, 10, 50), (1, 2, 10)):
        T, d = ms(T_ms), ms(d_ms)
        proc = periodic_source(T, d, 200)
        first, last = proc.deliveries[0][1], proc.deliveries[-1][1]
        avg = average_age(proc, first, last)
        expected = d + T / 2
        worst_rel = max(worst_rel, abs(avg - expected) / expected)
        peaks = peak_ages(proc)
        peaks_exact &= len(peaks) == 199 and all(p == d + T for p in peaks)
    ok = worst_rel <= 1e-9 and peaks_exact
    criterion(2, "AoI average and peak", ok, f"max rel err {worst_rel:.2e}, peaks exact={peaks_exact}")
    assert ok


# --- 3 -----------------------------------------------------------------------------


def test_c03_reconciliation_zero_correction_and_convergence(criterion):
    jitter = {"kind": "uniform", "a_ms": 0, "b_ms": 15}
    clean = one_client(
        link(30, jitter=jitter),
        link(30, jitter=jitter),
        duration_ms=10_000 * 50 + 200,
        server={"gather": {"policy": "deadline", "D_ms": 20}},
    )
    s = harness.Session(clean, 5)
    s.run()
    ticks = len(s.server.ticks)
    corrections = s.clients[1].stats.corrections
    zero = ticks >= 10_000 and len(corrections) > 9_000 and max(corrections) == 0.0

    lossy = one_client(
        link(30, jitter=jitter, loss_prob=0.2),
        link(30, jitter=jitter, loss_prob=0.2),
        duration_ms=60_000,
        server={"gather": {"policy": "deadline", "D_ms": 20}},
        client={"workload": {"kind": "random_walk", "input_ticks": 600}},
    )
    s2 = harness.Session(lossy, 6)
    s2.run()
    cl = s2.clients[1]
    server_state = s2.server.world[1]
    converged = (
        len(cl.pending) == 0
        and server_state.last_input_seq == 600
        and cl.last_authoritative == server_state
        and cl.predicted == server_state
    )
    ok = zero and converged
    criterion(
        3,
        "zero correction / convergence",
        ok,
        f"{ticks} ticks, max correction {max(corrections)}; lossy run converged={converged}",
    )
    assert ok


# --- 4 -----------------------------------------------------------------------------


def rendered_path(downlink, extrapolation_cap_ms, seed, step_ms=10):
    bot = Bot(5, (-10.0, 4.0), (3.0, -1.5))
    sc = one_client(
        link(20),
        downlink,
        duration_ms=30_000,
        server={"gather": {"policy": "deadline", "D_ms": 5}},
        client={
            "render_delay_ms": 100,
            "extrapolation_cap_ms": extrapolation_cap_ms,
            "clock_offset_ms": 17,
            "workload": {"kind": "idle"},
        },
        bots=[{"id": 5, "start": list(bot.start), "velocity": list(bot.velocity)}],
    )
    s = harness.Session(sc, seed)
    cl = s.clients[1]
    samples = []

    def probe(ev):
        rendered = cl.render(5)
        truth = bot.state_at(s.sim.now - ms(100))
        samples.append((rendered.position, truth.position))
        s.sim.schedule(s.sim.now + ms(step_ms), "probe")

    s.sim.register("probe", probe)
    s.sim.schedule(ms(1000), "probe")
    s.run()
    return bot, samples


def test_c04_interpolation_exact_and_continuous(criterion):
    step_ms = 10
    bot, samples = rendered_path(link(20), 0, 1, step_ms)
    err = max(math.dist(r, t) for r, t in samples)
    exact = err <= 1e-9

    _, lossy = rendered_path(link(20, loss_prob=0.3), 1000, 2, step_ms)
    v = math.hypot(*bot.velocity)
    bound = v * step_ms / 1000 + 1e-9
    jump = max(math.dist(a[0], b[0]) for a, b in zip(lossy, lossy[1:]))
    continuous = jump <= bound
    ok = exact and continuous
    criterion(
        4,
        "interpolation exactness / continuity",
        ok,
        f"max error {err:.2e}; max step under 30% loss {jump:.6f} <= {bound:.6f}",
    )
    assert ok


# --- 5 -----------------------------------------------------------------------------


def shots(rtt_ms, speed, compensated):
    sc = one_client(
        link(rtt_ms / 2),
        link(rtt_ms / 2),
        duration_ms=6000,
        server={"gather": {"policy": "wait_all"}, "lag_compensation": compensated},
        client={"render_delay_ms": 100, "workload": {"kind": "idle", "fire_every": 3, "fire_target": 2}},
        bots=[{"id": 2, "start": [-20.0, 2.0], "velocity": [speed, 0.0]}],
    )
    s = harness.Session(sc, 1)
    s.run()
    rec = s.server.shots
    return sum(r.hit and r.target == 2 for r in rec), len(rec), sum(r.too_old for r in rec)


def test_c05_lag_compensation(criterion):
    speeds = [0.3 + 0.5 * k for k in range(12)]
    comp_rates, raw_rates = [], []
    too_old = 0
    for rtt in (25, 50, 100):
        hit = total = raw_hit = raw_total = 0
        for v in speeds:
            h, n, old = shots(rtt, v, True)
            hit, total, too_old = hit + h, total + n, too_old + old
            h, n, _ = shots(rtt, v, False)
            raw_hit, raw_total = raw_hit + h, raw_total + n
        comp_rates.append(hit / total)
        raw_rates.append(raw_hit / raw_total)
    ok = all(r == 1.0 for r in comp_rates) and raw_rates[0] > raw_rates[1] > raw_rates[2]
    criterion(
        5,
        "lag compensation",
        ok,
        "compensated " + "/".join(f"{r:.0%}" for r in comp_rates)
        + ", uncompensated " + "/".join(f"{r:.3f}" for r in raw_rates) + f" at RTT 25/50/100 ms; {too_old} shots predate history",
    )
    assert ok


# --- 6 -----------------------------------------------------------------------------


def test_c06_wait_all_processes_at_slowest_arrival(criterion):
    rng = np.random.default_rng(20240606)
    T = ms(50)
    mismatches = 0
    ticks_checked = 0
    for draw in range(100):
        n = int(rng.integers(1, 7))
        deltas = [int(x) for x in rng.integers(0, T, size=n)]
        clients = [
            {"id": i + 1, "uplink": link(d / 1000), "downlink": link(5), "workload": {"kind": "random_walk"}}
            for i, d in enumerate(deltas)
        ]
        sc = scenario(
            duration_ms=500,
            server={"tick_period_ms": 50, "history_horizon_ms": 1000, "gather": {"policy": "wait_all"}},
            clients=clients,
        )
        s = harness.Session(sc, draw)
        s.run()
        for t in s.server.ticks:
            ticks_checked += 1
            if t.processed_at != t.tick_start + max(deltas) or t.applied != n:
                mismatches += 1
    ok = mismatches == 0 and ticks_checked >= 100 * 9
    criterion(6, "wait_all semantics", ok, f"{ticks_checked} ticks over 100 draws, {mismatches} mismatches")
    assert ok


# --- 7 -----------------------------------------------------------------------------


def test_c07_clock_offset_estimation(criterion):
    rng = np.random.default_rng(7)
    symmetric_exact = True
    for _ in range(1000):
        t1, d, proc = (int(x) for x in rng.integers(0, 10**9, size=3))
        offset = int(rng.integers(-(10**8), 10**8))
        x = SyncExchange(t1, t1 + d + offset, t1 + d + offset + proc, t1 + 2 * d + proc)
        symmetric_exact &= estimate_offset(x) == offset

    worst = 0.0
    symmetric_sim_exact = True
    for d_f, d_r, off in itertools.product((1, 5, 20, 80), (1, 5, 20, 80), (-37.5, 0.0, 12.345)):
        sc = one_client(link(d_r), link(d_f), duration_ms=1000, client={"clock_offset_ms": off})
        s = harness.Session(sc, 1)
        s.run()
        raw = s.clients[1].offset.raw
        assert raw
        expected_err = ms(d_f - d_r) / 2
        for est in raw:
            err = est - ms(off)
            worst = max(worst, abs(err - expected_err))
            if d_f == d_r:
                symmetric_sim_exact &= err == 0
    ok = symmetric_exact and symmetric_sim_exact and worst <= 1e-9
    criterion(
        7,
        "clock offset",
        ok,
        f"symmetric error 0: {symmetric_exact and symmetric_sim_exact}; asymmetric grid deviation {worst:.1e}",
    )
    assert ok


# --- 8 -----------------------------------------------------------------------------


def _random_cov(rng):
    a = rng.normal(size=(2, 2)) * rng.uniform(0.1, 2.0)
    return a @ a.T + 1e-3 * np.eye(2)


def _best_subset(b, sensors, eligible, K, lam):
    return max(
        marginal_score(b, sensors, list(c), lam)
        for k in range(K + 1)
        for c in itertools.combinations(eligible, k)
    )


def test_c08_greedy_against_exhaustive_optimum(criterion):
    rng = np.random.default_rng(8)
    bound = 1 - 1 / math.e
    worst = math.inf
    violations = 0
    independent_gap = 0.0
    for i in range(1500):
        independent = i % 3 == 0
        N = int(rng.integers(1, 8))
        M = N if independent else int(rng.integers(1, 4))
        b = Belief(np.zeros((M, 2)), np.array([_random_cov(rng) for _ in range(M)]))
        sensors = [
            SensorMeta(
                j,
                int(rng.integers(0, 2)),
                j if independent else int(rng.integers(0, M)),
                float(rng.uniform(0.01, 2.0)),
                float(rng.uniform(0.01, 0.06)),
            )
            for j in range(N)
        ]
        gate = float(rng.choice([0.0, 0.5]))
        diag = np.diagonal(b.cov, axis1=-2, axis2=-1)
        eligible = [s.sensor_id for s in sensors if diag[s.target, s.kind] > gate]
        if len(eligible) > 5:
            continue
        K = int(rng.integers(1, 3))
        lam = float(rng.uniform(0, 40))
        chosen = select_sensors(b, sensors, SchedulePolicy(PolicyKind.JCCS, K, gate, lam))
        assert set(chosen) <= set(eligible) and len(chosen) <= K
        greedy = marginal_score(b, sensors, chosen, lam)
        opt = _best_subset(b, sensors, eligible, K, lam)
        if greedy < bound * opt - 1e-12:
            violations += 1
        if opt > 1e-12:
            worst = min(worst, greedy / opt)
        if independent:
            independent_gap = max(independent_gap, abs(opt - greedy) / max(opt, 1e-12))
    ok = violations == 0 and independent_gap <= 1e-12
    criterion(
        8,
        "greedy vs exhaustive",
        ok,
        f"worst greedy/opt {worst:.4f} (bound {bound:.4f}), independent-object gap {independent_gap:.1e}",
    )
    assert ok


# --- 9 -----------------------------------------------------------------------------


def test_c09_byte_identical_reruns(criterion, tmp_path):
    sc = scenario(
        name="det",
        seeds=[11, 12],
        duration_ms=3000,
        server={"tick_period_ms": 50, "history_horizon_ms": 1000, "gather": {"policy": "deadline", "D_ms": 15}},
        clients=[
            {
                "id": 1,
                "uplink": link(25, jitter={"kind": "normal", "mu_ms": 3, "sigma_ms": 4}, loss_prob=0.1),
                "downlink": link(25, jitter={"kind": "uniform", "a_ms": 0, "b_ms": 30}, reorder_allowed=True),
                "workload": {"fire_every": 5, "fire_target": 3},
            },
            {"id": 2, "uplink": link(60, loss_prob=0.05), "downlink": link(60), "clock_offset_ms": -4},
        ],
        bots=[{"id": 3, "start": [0, 0], "velocity": [1, 2], "bounds": [-10, -10, 10, 10]}],
        dtsched={"horizon": 500, "n_objects": 8},
    )
    harness.run(sc, out=tmp_path / "a")
    harness.run(sc, out=tmp_path / "b")
    harness.run(sc, out=tmp_path / "c", seed_override=12)
    names = ("events.csv", "timing.json", "dtsched.csv")
    same = all(
        (tmp_path / "a" / "det" / str(seed) / f).read_bytes() == (tmp_path / "b" / "det" / str(seed) / f).read_bytes()
        for seed in (11, 12)
        for f in names
    )
    isolated = all(
        (tmp_path / "a" / "det" / "12" / f).read_bytes() == (tmp_path / "c" / "det" / "12" / f).read_bytes()
        for f in names
    )
    differs = (tmp_path / "a" / "det" / "11" / "events.csv").read_bytes() != (
        tmp_path / "a" / "det" / "12" / "events.csv"
    ).read_bytes()
    ok = same and isolated and differs
    criterion(9, "determinism", ok, f"reruns identical={same}, single-seed rerun identical={isolated}")
    assert ok


# --- 10 ----------------------------------------------------------------------------


EPS = 1  # µs


@pytest.mark.parametrize("dummy", [None])
def test_c10_preset_threshold_boundaries(criterion, dummy):
    cases = []  # (preset, report, expected overall verdict)
    for delta, expect in ((-EPS, True), (0, True), (EPS, False)):
        # FPS: mean RTT around 100 ms
        cases.append(("FPS", report_from_samples([40_000], rtts=[90_000, 110_000 + 2 * delta]), expect))
        # VR: worst RTT around 20 ms, worst one-way around 7 ms
        cases.append(("VR", report_from_samples([3_000, 6_000], rtts=[15_000, 20_000 + delta]), expect))
        cases.append(("VR", report_from_samples([3_000, 7_000 + delta], rtts=[15_000]), expect))
        # IIoT: worst one-way around 1 ms
        cases.append(("IIoT", report_from_samples([400, 1_000 + delta]), expect))
    # IIoT reliability around 99.9999 %: 2 losses in 2e6 is exactly on the line
    for lost, expect in ((1, True), (2, True), (3, False)):
        cases.append(("IIoT", report_from_samples([500], sent=2_000_000, lost=lost), expect))
    wrong = [
        (preset, classify(rep, preset), expect)
        for preset, rep, expect in cases
        if all(classify(rep, preset).values()) != expect
    ]
    ok = not wrong
    criterion(10, "preset thresholds", ok, f"{len(cases)} boundary traces, {len(wrong)} misclassified")
    assert ok, wrong
