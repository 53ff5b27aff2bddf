import numpy as np
import pytest

from afsel.analysis import PairedSample


def make_trace(v4, v6, start=0.0, step=1800.0):
    return [PairedSample(start + i * step, float(a), float(b)) for i, (a, b) in enumerate(zip(v4, v6))]


def normal_trace(n, mean_v4, mean_v6, sd, seed):
    rng = np.random.default_rng(seed)
    v4 = np.abs(rng.normal(mean_v4, sd, n)) + 1e-3
    v6 = np.abs(rng.normal(mean_v6, sd, n)) + 1e-3
    return make_trace(v4, v6)


@pytest.fixture
def trace_factory():
    return normal_trace


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
