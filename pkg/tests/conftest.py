import numpy as np
import pytest

from mcpanel.dgp import DgpConfig, generate


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo acceptance experiments (minutes)")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])


@pytest.fixture
def small_panel():
    panel, truth, tau = generate(DgpConfig(N=12, T=10, p=4, q=3, B=5, h_prob=0.3, b_prob=0.4, seed=1))
    return panel, truth, tau


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
