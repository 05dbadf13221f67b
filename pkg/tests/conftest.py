import numpy as np
import pytest
from hypothesis import settings

from potec.bandit_env import EnvConfig, build_synthetic_env

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def small_env():
    return build_synthetic_env(EnvConfig(n_actions=12, n_clusters=3, context_dim=4), 0)


@pytest.fixture
def discrete_env():
    return build_synthetic_env(EnvConfig(n_actions=8, n_clusters=3, context_dim=3, n_discrete_contexts=4), 1)


def fd_gradient(fn, params, step=1e-6):
    g = np.empty_like(params)
    for j in range(len(params)):
        e = np.zeros_like(params)
        e[j] = step
        g[j] = (fn(params + e) - fn(params - e)) / (2 * step)
    return g


ACCEPTANCE_LINES: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full-scale acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
