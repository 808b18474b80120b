"""Shared fixtures and the acceptance-criterion reporter.

Acceptance tests register one line per criterion through `record_criterion`;
the terminal summary prints them as explicit PASS/FAIL lines so the outcome
of each criterion is visible in one place.
"""

import numpy as np
import pytest

_CRITERION_LINES: list[tuple[str, bool]] = []


@pytest.fixture
def record_criterion():
    def _record(label: str, passed: bool):
        _CRITERION_LINES.append((label, bool(passed)))

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed in _CRITERION_LINES:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
