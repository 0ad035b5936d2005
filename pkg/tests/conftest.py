from __future__ import annotations

import copy

import pytest

from netsync.scenario import Scenario

_CRITERIA: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
    if detail:
        line += f"  ({detail})"
    _CRITERIA.append(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)


def link(delay_ms: float, **kw) -> dict:
    return {"base_delay_ms": delay_ms, **kw}


BASE = {
    "name": "t",
    "seeds": [1],
    "duration_ms": 2000,
    "server": {"tick_period_ms": 50, "history_horizon_ms": 1000},
    "clients": [{"id": 1, "uplink": link(20), "downlink": link(20)}],
}


def make_scenario(**overrides) -> Scenario:
    """BASE with top-level keys replaced; ``server``/``client`` dicts are merged."""
    raw = copy.deepcopy(BASE)
    server = overrides.pop("server", None)
    client = overrides.pop("client", None)
    if server:
        raw["server"].update(server)
    if client:
        raw["clients"][0].update(client)
    raw.update(overrides)
    return Scenario.model_validate(raw)
