from __future__ import annotations

import numpy as np
import pytest

from causalviews import ecs


@pytest.fixture
def layered():
    return ecs.generate_layered(3, 6, 8, 2, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain(momenta, d=1):
    """Linear chain 0 -> 1 -> ... with the given link momenta."""
    p = np.asarray(momenta, dtype=float).reshape(len(momenta), d)
    n = len(momenta) + 1
    return ecs.CausalSet(d, n, np.arange(n - 1), np.arange(1, n), p, 1)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line; the summary hook repeats them."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
