import numpy as np
import pytest

from sim3recon.sim3 import Sim3

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_sim3(rng, max_angle=np.pi - 1e-3, log_scale=(np.log(0.1), np.log(10.0)), trans=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0, max_angle)
    lam = rng.uniform(*log_scale)
    return Sim3.exp(np.r_[rng.normal(size=3) * trans, omega, lam])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
