import numpy as np
import pytest

from mian import tensor as T

FD_STEP = 1e-5
SEEDS = list(range(20))


def numeric_grad(fn, x, h=FD_STEP):
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = fn(x.copy())
        x[i] = old - h
        down = fn(x.copy())
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def analytic_grad(build, x):
    """Gradient of ``build(Tensor)`` (a scalar Tensor) with respect to ``x``."""
    leaf = T.Tensor(x, requires_grad=True)
    T.backward(build(leaf))
    return leaf.grad


def check_grad(build, x, tol=1e-4):
    ana = analytic_grad(build, x)
    num = numeric_grad(lambda arr: build(T.Tensor(arr)).item(), x)
    assert rel_err(ana, num) <= tol, (ana, num)
    return rel_err(ana, num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
