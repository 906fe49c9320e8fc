from __future__ import annotations

import numpy as np
import pytest

ACCEPTANCE_CRITERIA = range(1, 11)
_acceptance: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, dtype=np.float64):
    return rng.standard_normal(shape).astype(dtype)


@pytest.fixture(scope="session")
def acceptance():
    """Registry of criterion number -> (passed, detail), printed at the end of the run."""
    return _acceptance


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        if n in _acceptance:
            ok, detail = _acceptance[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
