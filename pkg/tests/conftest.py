from __future__ import annotations

import functools
import tempfile
import time
from pathlib import Path

import pytest

from diverterplan.scenario import load_scenario_file

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"

_ACCEPTANCE: dict[int, str] = {}


def scenario_path(name: str) -> Path:
    return SCEN / f"{name}.yaml"


@functools.lru_cache(maxsize=None)
def load(name: str):
    return load_scenario_file(scenario_path(name))


@functools.lru_cache(maxsize=None)
def planned(name: str, energy: bool = False):
    """Full pipeline result, computed once per session."""
    from diverterplan.cli import run_plan

    s, cfg = load(name)
    return run_plan(s, cfg, energy)


@functools.lru_cache(maxsize=None)
def cli_plan(name: str, energy: bool = False):
    """Run ``plan`` through the CLI once per session; returns (exit code, out dir, wall seconds)."""
    from diverterplan import cli

    out = Path(tempfile.mkdtemp(prefix=f"plan_{name}_"))
    argv = ["plan", "--scenario", str(scenario_path(name)), "--out", str(out)]
    if energy:
        argv.append("--energy")
    t0 = time.perf_counter()
    code = cli.main(argv)
    return code, out, time.perf_counter() - t0


@pytest.fixture
def acceptance_line():
    def record(n: int, ok: bool, detail: str):
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
