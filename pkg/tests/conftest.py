import numpy as np
import pytest

from riskfilter.dynamics import ModelEnsemble
from riskfilter.envs import make_env, transition_tensor

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def gridworld():
    env = make_env("gridworld")
    return env, ModelEnsemble.single(env.system), transition_tensor(env)


@pytest.fixture(scope="session")
def lin1d():
    env = make_env("lin1d")
    return env, ModelEnsemble.single(env.system)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing fixture never reaches the call phase
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        status = "PASS" if rep.passed else "FAIL"
        item.config.stash[ACCEPTANCE].append(f"[{status}] criterion {number:>2}: {title}")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
