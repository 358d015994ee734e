from __future__ import annotations

import numpy as np
import pytest

from rlanomaly.toyrl.ppo import TrainerConfig, train_policy


@pytest.fixture(scope="session")
def trained_policy():
    """A grid policy trained long enough to be near optimal."""
    policy, history = train_policy(TrainerConfig(iterations=40, seed=0))
    return policy


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
