"""Stationary distributions and flow diagnostics for chains on a movement graph.

A transition vector is a float array indexed by edge id; an edge distribution
is the same shape and holds ``pi(u) * P(u -> v)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csc_matrix, csr_matrix
from scipy.sparse.linalg import spsolve

from .environment import MovementGraph

DIST_VERSION = "dist/1"


class NotConverged(RuntimeError):
    def __init__(self, max_iters: int, residual: float):
        self.max_iters = max_iters
        self.residual = residual
        super().__init__(f"power iteration did not converge in {max_iters} sweeps (residual {residual:.3e})")


class ZeroMassNode(ValueError):
    def __init__(self, node: int):
        self.node = node
        super().__init__(f"node {node} has no outgoing probability mass")


def uniform_transitions(graph: MovementGraph) -> np.ndarray:
    deg = graph.out_degree
    return 1.0 / deg[graph.src]


def row_sums(x: np.ndarray, graph: MovementGraph) -> np.ndarray:
    return np.add.reduceat(x, graph.indptr[:-1]) if x.size else np.zeros(graph.n_nodes)


def is_row_stochastic(p: np.ndarray, graph: MovementGraph, tol: float = 1e-12) -> bool:
    return bool(np.all(p >= 0) and np.all(np.abs(row_sums(p, graph) - 1.0) <= tol))


def project_rows(x: np.ndarray, graph: MovementGraph, floor: float = 1e-9) -> np.ndarray:
    """Clamp entries to ``floor`` and renormalise each node's outgoing block."""
    y = np.maximum(x, floor)
    return y / row_sums(y, graph)[graph.src]


def transition_operator(p: np.ndarray, graph: MovementGraph) -> csr_matrix:
    """Sparse P^T, so that ``op @ pi`` pushes probability one step forward."""
    return csr_matrix((p, (graph.dst, graph.src)), shape=(graph.n_nodes, graph.n_nodes))


def balance_residual(p: np.ndarray, pi: np.ndarray, graph: MovementGraph) -> float:
    """max_v |sum_u pi(u) P(u -> v) - pi(v)|."""
    inflow = np.bincount(graph.dst, weights=pi[graph.src] * p, minlength=graph.n_nodes)
    return float(np.max(np.abs(inflow - pi)))


def power_sweeps(p, graph, x, sweeps: int, damping: float = 0.0, op=None, lazy: bool = False) -> np.ndarray:
    """A fixed number of power-iteration sweeps starting from ``x``.

    ``lazy`` averages each sweep with the previous vector, which leaves the
    stationary distribution unchanged but damps periodic oscillation.
    """
    op = transition_operator(p, graph) if op is None else op
    n = graph.n_nodes
    for _ in range(sweeps):
        x = 0.5 * (x + op @ x) if lazy else op @ x
        if damping:
            x = (1.0 - damping) * x + damping / n
        x /= x.sum()
    return x


def stationary_distribution(
    p: np.ndarray,
    graph: MovementGraph,
    tol: float = 1e-10,
    max_iters: int = 100_000,
    damping: float = 0.0,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Power iteration for the stationary distribution of ``p``.

    Starts from the uniform vector unless ``x0`` is given.  ``damping`` mixes
    in a uniform teleport with that mass at every sweep (0 disables it).

    Raises:
        NotConverged: the balance residual is still above ``tol`` after
            ``max_iters`` sweeps.
    """
    n = graph.n_nodes
    op = transition_operator(p, graph)
    x = np.full(n, 1.0 / n) if x0 is None else np.asarray(x0, dtype=float) / np.sum(x0)
    resid = np.inf
    for _ in range(max_iters + 1):
        nxt = op @ x
        if damping:
            nxt = (1.0 - damping) * nxt + damping / n
        resid = float(np.max(np.abs(nxt - x)))
        if resid <= tol:
            return x
        x = nxt / nxt.sum()
    raise NotConverged(max_iters, resid)


def solve_stationary(p: np.ndarray, graph: MovementGraph) -> np.ndarray:
    """Stationary distribution by a direct linear solve of pi (I - P) = 0
    with the last balance equation replaced by sum(pi) = 1.

    Stays accurate on nearly reducible chains where power iteration crawls.
    """
    n = graph.n_nodes
    b = np.zeros(n)
    b[-1] = 1.0
    if n <= 512:
        A = np.eye(n)
        np.add.at(A, (graph.dst, graph.src), -p)
        A[-1, :] = 1.0
        pi = np.linalg.solve(A, b)
    else:
        rows = np.concatenate([graph.dst, np.arange(n)])
        cols = np.concatenate([graph.src, np.arange(n)])
        vals = np.concatenate([-np.asarray(p, dtype=float), np.ones(n)])
        keep = rows != n - 1
        rows = np.concatenate([rows[keep], np.full(n, n - 1)])
        cols = np.concatenate([cols[keep], np.arange(n)])
        vals = np.concatenate([vals[keep], np.ones(n)])
        pi = spsolve(csc_matrix((vals, (rows, cols)), shape=(n, n)), b)
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def edge_distribution(p: np.ndarray, pi: np.ndarray, graph: MovementGraph) -> np.ndarray:
    return pi[graph.src] * p


def decompose_edge_distribution(P: np.ndarray, graph: MovementGraph) -> tuple[np.ndarray, np.ndarray]:
    """Split an edge distribution into node occupancy and transitions.

    Only the normalisation identities are guaranteed; global balance of the
    result is the caller's concern.
    """
    pi = row_sums(np.asarray(P, dtype=float), graph)
    zero = np.flatnonzero(pi <= 0)
    if zero.size:
        raise ZeroMassNode(int(zero[0]))
    return pi, P / pi[graph.src]


@dataclass(frozen=True)
class VorticityMatrix:
    """Antisymmetric net flux Gamma(u, v) = pi(u)P(u->v) - pi(v)P(v->u)."""

    matrix: csr_matrix

    def __call__(self, u: int, v: int) -> float:
        return float(self.matrix[u, v])

    def on_edges(self, graph: MovementGraph) -> np.ndarray:
        return np.asarray(self.matrix[graph.src, graph.dst]).ravel()

    def is_zero(self, atol: float = 0.0) -> bool:
        return bool(self.matrix.nnz == 0 or np.max(np.abs(self.matrix.data)) <= atol)


def pair_matrix(values: np.ndarray, graph: MovementGraph) -> csr_matrix:
    """Sum per-edge values into an (n x n) matrix; parallel edges add up."""
    m = csr_matrix((values, (graph.src, graph.dst)), shape=(graph.n_nodes, graph.n_nodes))
    m.sum_duplicates()
    return m


def vorticity(p: np.ndarray, pi: np.ndarray, graph: MovementGraph) -> VorticityMatrix:
    flow = pair_matrix(pi[graph.src] * p, graph)
    # a - b == -(b - a) exactly in IEEE arithmetic, so this is antisymmetric
    gamma = (flow - flow.T).tocsr()
    gamma.sum_duplicates()
    return VorticityMatrix(gamma)


@dataclass(frozen=True)
class VorticityViolation:
    u: int
    v: int
    gamma: float
    lower: float
    upper: float

    @property
    def margin(self) -> float:
        return max(self.lower - self.gamma, self.gamma - self.upper)


def check_vorticity_constraint(
    gamma: VorticityMatrix, pi: np.ndarray, Q: np.ndarray, graph: MovementGraph, tol: float = 1e-12
) -> list[VorticityViolation]:
    """Every ordered pair with -pi(v)Q(v,u) <= Gamma(u,v) <= pi(u)Q(u,v) violated."""
    qflow = pair_matrix(pi[graph.src] * Q, graph)
    pattern = (qflow + qflow.T + abs(gamma.matrix)).tocoo()
    out = []
    upper_m = qflow.tocsr()
    for u, v in sorted(set(zip(pattern.row.tolist(), pattern.col.tolist()))):
        g = float(gamma.matrix[u, v])
        upper = float(upper_m[u, v])
        lower = -float(upper_m[v, u])
        if g > upper + tol or g < lower - tol:
            out.append(VorticityViolation(u, v, g, lower, upper))
    return out


# -- dist/1 files -------------------------------------------------------------

def write_distribution(path, graph: MovementGraph, p: np.ndarray, pi: np.ndarray, meta: dict | None = None) -> None:
    P = edge_distribution(p, pi, graph)
    doc = {
        "version": DIST_VERSION,
        "edges": [
            {"src": int(u), "dst": int(v), "p_transition": float(a), "p_edge": float(b)}
            for u, v, a, b in zip(graph.src, graph.dst, p, P)
        ],
        "pi": [float(x) for x in pi],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class DistributionFile:
    src: np.ndarray
    dst: np.ndarray
    p_transition: np.ndarray
    p_edge: np.ndarray
    pi: np.ndarray
    meta: dict


def read_distribution(path, graph: MovementGraph | None = None) -> DistributionFile:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != DIST_VERSION:
        raise ValueError(f"unsupported distribution version {doc.get('version')!r}")
    edges = doc["edges"]
    out = DistributionFile(
        np.array([e["src"] for e in edges], dtype=np.int64),
        np.array([e["dst"] for e in edges], dtype=np.int64),
        np.array([e["p_transition"] for e in edges]),
        np.array([e["p_edge"] for e in edges]),
        np.array(doc["pi"]),
        doc.get("meta", {}),
    )
    if graph is not None and not (
        np.array_equal(out.src, graph.src) and np.array_equal(out.dst, graph.dst)
    ):
        raise ValueError("distribution edges do not match the movement graph")
    return out
