from __future__ import annotations

import sys

import numpy as np
import pytest

from mobidecomp import synth


@pytest.fixture(scope="session")
def truth2():
    """A two-district synthetic panel with its generating parameters."""
    return synth.simulate_panel(n_districts=2, seed=5)


@pytest.fixture(scope="session")
def panel2(truth2):
    return truth2.panel


@pytest.fixture
def rng():
    return np.random.default_rng(20200419)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
