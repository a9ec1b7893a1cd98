import numpy as np
import pytest

from gravtile.core import ParticleSystem
from gravtile.hermite import generate_initial_conditions


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_system():
    return generate_initial_conditions(300, seed=7)


@pytest.fixture
def two_body_rest():
    return ParticleSystem(mass=[1.0, 1.0], pos=[[0, 0, 0], [1, 0, 0]], vel=np.zeros((2, 3)))


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, title, ok, detail)``."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, title, status, detail=""):
        if isinstance(status, bool):
            status = "PASS" if status else "FAIL"
        line = f"criterion {number} [{status}] {title}: {detail}"
        lines.append(line)
        print(line)
        return status

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
