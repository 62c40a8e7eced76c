import pytest

from lcmm_subtypes import synthetic
from lcmm_subtypes.estimator import fit
from lcmm_subtypes.model import ModelSpec


@pytest.fixture(scope="session")
def small_sim():
    return synthetic.generate(synthetic.GeneratorConfig(n_eyes=500, seed=7))


@pytest.fixture(scope="session")
def small_fit(small_sim):
    spec = ModelSpec(n_classes=4).with_optimizer(n_starts=3, seed=7)
    return fit(small_sim.cohort, spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
