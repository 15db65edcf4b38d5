from __future__ import annotations

from pathlib import Path

import pytest

from microsim.registry import load_scenario_dir
from microsim.scenarios import builtin_path

DATA = Path(__file__).parent / "data"


@pytest.fixture
def minimal():
    return load_scenario_dir(builtin_path("minimal"))


@pytest.fixture
def sockshop():
    return load_scenario_dir(builtin_path("sockshop"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
