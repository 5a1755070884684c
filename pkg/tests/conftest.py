import numpy as np
import pytest

from ssqlasso import simgen
from ssqlasso.em import Dataset


def small_problem(seed, n=50, p=20, k=4, family="normal", tau=0.5, q=0):
    """Simulated AR-1 problem with k signals; returns (data, beta, alpha)."""
    rng = np.random.default_rng(seed)
    model = simgen.ModelSpec(coeff=simgen.CoefficientSpec(support_size=k), clinical_q=q)
    return simgen.gen_dataset(n, p, simgen.CorrelationSpec("ar1", 0.5), model,
                              simgen.ErrorSpec(family, tau), rng)


def random_dataset(rng, n, p, q=0):
    X = rng.standard_normal((n, p))
    Zc = rng.standard_normal((n, q))
    y = 1.0 + X[:, :3].sum(axis=1) * 0.8 + rng.standard_t(3, n)
    return Dataset.from_arrays(y, X, Zc)


@pytest.fixture
def tiny():
    return small_problem(0, n=40, p=12, k=3)[0]


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
