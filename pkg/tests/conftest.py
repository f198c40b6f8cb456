import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynpo import SamplePathSet, SolveConfig, generate_exponential_chain, solve_cdpo
from dynpo.example import MEAN0, example_specs

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def example_solution():
    """The built-in example solved on 100k paths with seed 1."""
    specs = example_specs()
    ps = generate_exponential_chain(100_000, MEAN0, 1)
    return solve_cdpo(SolveConfig(specs, ps, "lowest-index", "none"))


@pytest.fixture(scope="session")
def small_example():
    specs = example_specs()
    ps = generate_exponential_chain(5_000, MEAN0, 3)
    return solve_cdpo(SolveConfig(specs, ps, "lowest-index", "none"))


def random_pathset(rng, n_paths, horizon, n_agents=None, scale=10.0):
    s = rng.exponential(scale, (n_paths, horizon))
    x = None
    if n_agents:
        shares = rng.dirichlet(np.ones(n_agents), (n_paths, horizon))
        x = shares * s[:, :, None]
        x[:, :, -1] = s - x[:, :, :-1].sum(axis=2)
    return SamplePathSet(s, None, x)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
