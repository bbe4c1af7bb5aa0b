import numpy as np
import pytest

from whflow.graph import WeightedGraph, build_lattice_1d
from whflow.hamiltonian import State


def random_state(rng, n, spread=0.5, s_scale=1.0):
    rho = 1.0 + spread * rng.uniform(-1, 1, n)
    rho /= rho.sum()
    return State(rho, s_scale * rng.standard_normal(n))


def random_graph(rng, n, extra_edges=3):
    """A spanning path plus a few random chords with random positive weights."""
    pairs = {(i, i + 1) for i in range(n - 1)}
    extra_edges = min(extra_edges, n * (n - 1) // 2 - (n - 1))
    while len(pairs) < n - 1 + extra_edges:
        i, j = sorted(rng.choice(n, 2, replace=False))
        pairs.add((int(i), int(j)))
    edges = [(i, j, rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)) for i, j in sorted(pairs)]
    return WeightedGraph.from_edges(n, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cycle8():
    return build_lattice_1d(8, 1.0 / 8, "periodic")


# --- acceptance report -------------------------------------------------------


@pytest.fixture
def criterion(request):
    """``criterion(number, title, ok, detail)`` logs a PASS/FAIL line and asserts ``ok``.

    A test that raises before calling it still gets a FAIL line.
    """
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])
    seen = []

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}"
        lines.append((number, line))
        seen.append(number)
        print(line)
        assert ok, line

    yield record
    if not seen:
        lines.append((99, f"FAIL [--] {request.node.name}: raised before reporting"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
