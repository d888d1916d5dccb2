import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from specmono.classical_dynamics import SemiclassicalRegime


@pytest.fixture(scope="session")
def default_regime():
    return SemiclassicalRegime(h=1e-4, eps=1e-2, delta=0.5, lam=1e-6, alpha=1e-2, d=1.0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(name, ok, detail)`` records and prints a PASS/FAIL line, then asserts ``ok``."""
    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
