import numpy as np
import pytest

from gradleak import nn


def central_diff(f, x, h=1e-6):
    """Plain central differences of a scalar function, used as an oracle."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += h
        lo[i] -= h
        out[i] = (f(hi.reshape(x.shape)) - f(lo.reshape(x.shape))) / (2 * h)
    return out.reshape(x.shape)


@pytest.fixture
def lenet8():
    return nn.named_model("lenet-mini", (1, 8, 8))


@pytest.fixture
def lenet16():
    return nn.named_model("lenet-mini", (1, 16, 16))


@pytest.fixture
def fc2():
    return nn.named_model("fc2", (1, 8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
