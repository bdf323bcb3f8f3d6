import numpy as np
import pytest

from svsl.model import init_network, mlp_specs
from svsl.numerics import make_rng


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_net(rng):
    return init_network(3, mlp_specs([5, 4], 3), rng)


_CRITERIA: list[str] = []


def record_criterion(name, ok, detail=""):
    _CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
