import numpy as np
import pytest

from odsate.core_model import ObservedSample
from odsate.sim_harness import ScenarioSpec, case_control_sample, generate_pool, stream


@pytest.fixture(scope="session")
def m1_pool():
    return generate_pool(ScenarioSpec("M1", v=0.01, p10=0.2, pool_size=400_000, replications=1, seed=99))


@pytest.fixture(scope="session")
def m1_sample(m1_pool):
    return case_control_sample(m1_pool, 500, 500, stream(99, 3, 0))


def random_logistic_sample(n, seed, coef=(-0.4, 0.8, -0.6, 0.5, 0.3)):
    """Random (not outcome-dependent) sample with a logistic outcome on (1, t, u, x1, x2)."""
    rng = np.random.default_rng(seed)
    u = (rng.random(n) < 0.5).astype(float)
    x1 = rng.normal(size=n)
    x2 = rng.random(n)
    t = (rng.random(n) < 0.5).astype(float)
    eta = np.column_stack([np.ones(n), t, u, x1, x2]) @ np.asarray(coef)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return ObservedSample(y, t, np.column_stack([u, x1, x2]), ("discrete", "continuous", "continuous"),
                          ("u", "x1", "x2"))


@pytest.fixture
def random_sample():
    return random_logistic_sample(500, 3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record_criterion(label, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
