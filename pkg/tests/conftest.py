import math
import sys

import numpy as np
import pytest

from prefopt.taskgen import Instance, gen_instance


def central_difference(f, theta, h=1e-5):
    """Independent finite-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    out = np.empty_like(theta)
    for k in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        out[k] = (f(up) - f(down)) / (2 * h)
    return out


def rel_error(got, want):
    """Max-norm relative error; entries of ``want`` that are exactly zero are
    covered by the scale of the whole vector."""
    got, want = np.asarray(got), np.asarray(want)
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300))


def tv(p, q):
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=1).max())


def three_sigma(p, m):
    return 3.0 * math.sqrt(p * (1.0 - p) / m)


@pytest.fixture
def inst():
    return gen_instance(4, 5, 1.0, 1.0, seed=11)


@pytest.fixture
def small_inst():
    return gen_instance(3, 4, 1.0, 1.0, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_point_instance(gap):
    """One prompt, two completions, uniform reference, reward gap ``gap``."""
    return Instance(pi_ref=np.array([[0.5, 0.5]]), reward_true=np.array([[gap, 0.0]]))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
