import numpy as np
import pytest

from bsdqn.env import EnvConfig, STConfig


def oracle_config(arrival_prob=0.8):
    """N=1, K=4, Q=C=5, beta uniform on {1,2,3}: the 108-state instance."""
    st = STConfig(queue_capacity=5, energy_capacity=5, arrival_prob=arrival_prob)
    return EnvConfig(K=4, sts=(st,), idle_slot_support=((1, 1 / 3), (2, 1 / 3), (3, 1 / 3)))


def default_config(n_st=2):
    lambdas = np.linspace(0.1, 0.9, n_st)
    return EnvConfig(sts=tuple(STConfig(arrival_prob=float(lam)) for lam in lambdas))


@pytest.fixture
def oracle_cfg():
    return oracle_config()


@pytest.fixture
def cfg2():
    return default_config(2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records one PASS/FAIL line for acceptance criterion ``n``."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
