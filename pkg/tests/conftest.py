import warnings

import numpy as np
import pandas as pd
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def small_binary_frame(rng, n=200, p_w=2):
    """Binary exposure, binary covariates, continuous outcome."""
    cols = {f"W{i + 1}": rng.integers(0, 2, n).astype(float) for i in range(p_w)}
    lin = -0.3 + sum(0.6 * cols[k] for k in cols)
    a = (rng.random(n) < 1 / (1 + np.exp(-lin))).astype(float)
    y = 1.0 + a + sum(0.5 * cols[k] for k in cols) + rng.normal(0, 1, n)
    return pd.DataFrame({**cols, "A": a, "Y": y})


@pytest.fixture(autouse=True)
def _quiet_expected_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for the acceptance summary."""

    def record(number, ok, detail):
        _CRITERIA.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_CRITERIA[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
