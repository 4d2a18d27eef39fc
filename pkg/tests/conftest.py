import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stepgrpo.harness import config as config_mod
from stepgrpo.harness.runs import run_pretrain

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def ref_exp():
    return config_mod.reference()


@pytest.fixture(scope="session")
def ref_net(ref_exp):
    """The reference 4-mode policy, pretrained once per session."""
    return run_pretrain(ref_exp).net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
