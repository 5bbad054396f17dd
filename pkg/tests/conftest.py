import numpy as np
import pytest
from scipy.sparse import csr_matrix

from boil.environment import (
    Cell, CellKind, GridSpec, MovementGraph, build_movement_graph, generate_reference_env,
)
from boil.visibility import VisibilityMap, build_visibility_map


def grid_from_rows(rows, markers=()):
    """Build a grid from strings: '#' wall, digits are open-cell elevations."""
    cells = []
    for line in rows:
        for ch in line:
            cells.append(Cell(CellKind.WALL) if ch == "#" else Cell(CellKind.OPEN, int(ch)))
    return GridSpec.from_cells(len(rows[0]), len(rows), cells, markers)


def random_strong_graph(rng, n, extra=2.0):
    """Hamiltonian cycle plus random extra edges; strongly connected."""
    perm = rng.permutation(n)
    edges = {(int(perm[i]), int(perm[(i + 1) % n])) for i in range(n)} if n > 1 else set()
    for _ in range(int(extra * n)):
        u, v = rng.integers(n, size=2)
        if u != v:
            edges.add((int(u), int(v)))
    return MovementGraph.from_edges(n, sorted(edges))


def random_transitions(rng, graph, self_mass=0.01):
    """Random row-stochastic vector with at least ``self_mass`` on each self-loop."""
    x = rng.random(graph.n_edges) + 0.05
    rows = np.add.reduceat(x, graph.indptr[:-1])
    p = x / rows[graph.src]
    loops = graph.self_loops
    p = p * (1 - self_mass)
    p[loops] += self_mass
    return p


def toy_visibility(graph, values):
    return VisibilityMap(csr_matrix(np.asarray(values, dtype=float)), graph.src, graph.dst)


@pytest.fixture(scope="session")
def small_env():
    grid = generate_reference_env("small", 0)
    graph = build_movement_graph(grid)
    vis = build_visibility_map(grid, graph)
    return grid, graph, vis


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TOY_CYCLES = [
    (3, [(0, 1), (1, 2), (2, 0)]),
    (3, [(0, 2), (2, 1), (1, 0)]),
    (2, [(0, 1), (1, 0)]),
]


def toy_problem(seed):
    """Tiny coverage problem: a directed cycle with self-loops, two observed
    nodes with random visibility, other nodes unobserved."""
    from boil.optimizer import LossSpec

    rng = np.random.default_rng(seed)
    n, edges = TOY_CYCLES[seed % 3]
    graph = MovementGraph.from_edges(n, edges)
    V = rng.uniform(0.05, 0.95, (graph.n_edges, 2))
    V = np.hstack([V, np.zeros((graph.n_edges, n - 2))])
    return graph, LossSpec("coverage", toy_visibility(graph, V))


@pytest.fixture(scope="session")
def boil_small(small_env):
    """A short optimiser run on the small reference environment."""
    from boil.optimizer import LossSpec, OptimizerConfig, boil_optimize

    _, graph, vis = small_env
    res = boil_optimize(graph, LossSpec("coverage", vis), OptimizerConfig(num_steps=300, oracle_sweeps=10))
    return res


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
