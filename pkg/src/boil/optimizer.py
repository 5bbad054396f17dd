"""Gradient-free learning of transition probabilities.

Each iteration perturbs the transition vector along a random direction on a
sphere and re-solves the stationary distribution.  The step follows the
two-point finite-difference estimate of the loss gradient.  The best iterate
seen (including the starting point) is returned.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path
from scipy.special import entr

from . import markov
from .environment import MovementGraph
from .visibility import VisibilityMap

log = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    pass


class EmptyPatrolSet(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class LossKind(str, enum.Enum):
    COVERAGE = "coverage"
    PATROLLING = "patrolling"
    REACHABILITY = "reachability"


# -- losses ---------------------------------------------------------------------

def _expected(P, vis: VisibilityMap) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.shape != (vis.n_edges,):
        raise DimensionMismatch(f"distribution has {P.shape} entries, visibility map has {vis.n_edges} edges")
    return vis.expected_visibility(P)


def coverage_loss(P, vis: VisibilityMap) -> float:
    """sum_w -A(w) ln A(w) with A(w) = sum_e P(e) V(e)(w); 0 ln 0 = 0."""
    return float(np.sum(entr(_expected(P, vis))))


def patrolling_loss(P, vis: VisibilityMap, patrol_set) -> float:
    nodes = np.unique(np.asarray(list(patrol_set), dtype=np.int64))
    if nodes.size == 0:
        raise EmptyPatrolSet("patrol set is empty")
    if nodes[0] < 0 or nodes[-1] >= vis.n_nodes:
        raise DimensionMismatch("patrol node outside the visibility map")
    return float(np.sum(entr(_expected(P, vis)[nodes])))


def reachability_loss(P, reach: VisibilityMap) -> float:
    return coverage_loss(P, reach)


def reachability_map(graph: MovementGraph, horizon, floor: float = 1e-3) -> VisibilityMap:
    """R(e)(w) from hop distances: ``1 - d(dst(e), w) / (T_R(w) + 1)``,
    clipped into the open interval (floor, 1 - floor)."""
    horizon = np.broadcast_to(np.asarray(horizon, dtype=float), (graph.n_nodes,))
    adj = csr_matrix((np.ones(graph.n_edges), (graph.src, graph.dst)), shape=(graph.n_nodes,) * 2)
    dist = shortest_path(adj, directed=True, unweighted=True)
    vals = np.clip(1.0 - dist[graph.dst] / (horizon[None, :] + 1.0), floor, 1.0 - floor)
    return VisibilityMap(csr_matrix(vals), graph.src, graph.dst, graph.traversal_time)


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    vis: VisibilityMap
    patrol_set: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.PATROLLING:
            if not self.patrol_set:
                raise EmptyPatrolSet("patrolling loss needs a non-empty patrol set")
            object.__setattr__(self, "patrol_set", tuple(sorted(set(int(w) for w in self.patrol_set))))
        if self.kind is LossKind.REACHABILITY and self.vis.matrix.nnz:
            if self.vis.matrix.data.max() >= 1.0:
                raise ValueError("reachability values must lie in (0, 1)")

    def __call__(self, P) -> float:
        if self.kind is LossKind.PATROLLING:
            return patrolling_loss(P, self.vis, self.patrol_set)
        return coverage_loss(P, self.vis)

    def node_values(self, P) -> np.ndarray:
        return _expected(P, self.vis)

    def batch(self, P2d: np.ndarray) -> np.ndarray:
        """Loss for each row of a (batch x edges) array of distributions."""
        A = np.asarray(P2d) @ self.vis.matrix.toarray()
        if self.kind is LossKind.PATROLLING:
            A = A[:, list(self.patrol_set)]
        return entr(A).sum(axis=1)


# -- optimiser ------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 0.1
    num_steps: int = 5000
    perturbation_radius: float = 0.05
    floor: float = 1e-9
    seed: int = 0
    # "power": warm-started power iteration to ``tol``; "direct": sparse
    # linear solve; "auto": direct up to ``direct_max_nodes`` nodes, else power.
    oracle: str = "auto"
    # when set, the loop runs exactly this many warm-started power sweeps
    # per stationary evaluation instead of solving to tolerance
    oracle_sweeps: int | None = None
    tol: float = 1e-10
    max_iters: int = 100_000
    direct_max_nodes: int = 20_000

    def __post_init__(self):
        if not (self.step_size > 0 and self.perturbation_radius > 0 and self.floor > 0):
            raise ValueError("step size, perturbation radius and floor must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.oracle not in ("auto", "power", "direct"):
            raise ValueError(f"unknown oracle {self.oracle!r}")
        if self.oracle_sweeps is not None and self.oracle_sweeps < 1:
            raise ValueError("oracle_sweeps must be >= 1")


@dataclass
class BoilResult:
    p: np.ndarray
    pi: np.ndarray
    loss_trace: list[float]
    best_index: int
    loss: float
    accepted: list[bool] = field(default_factory=list)

    def __iter__(self):
        yield from (self.p, self.pi, self.loss_trace)

    def edge_distribution(self, graph: MovementGraph) -> np.ndarray:
        return markov.edge_distribution(self.p, self.pi, graph)


class _Oracle:
    """Stationary solver used inside the loop."""

    def __init__(self, graph: MovementGraph, config: OptimizerConfig):
        self.graph = graph
        self.config = config
        mode = config.oracle
        if mode == "auto":
            mode = "direct" if graph.n_nodes <= config.direct_max_nodes else "power"
        self.mode = mode

    def __call__(self, p, x0):
        if self.config.oracle_sweeps is not None:
            return markov.power_sweeps(p, self.graph, x0.copy(), self.config.oracle_sweeps, lazy=True)
        return self.exact(p, x0)

    def exact(self, p, x0):
        if self.mode == "direct":
            return markov.solve_stationary(p, self.graph)
        c = self.config
        return markov.stationary_distribution(p, self.graph, c.tol, c.max_iters, x0=x0)


def _sphere(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    r = rng.standard_normal(dim)
    return radius * r / np.linalg.norm(r)


def sphere_gradient(delta: float, r: np.ndarray) -> np.ndarray:
    """Two-point zeroth-order estimate ``dim * delta * r`` for a loss change
    ``delta`` observed along the sphere perturbation ``r``."""
    return r.size * delta * r


def _zeroth_order(
    graph: MovementGraph,
    blocks: list[np.ndarray],
    objective: Callable[[list[np.ndarray], list[np.ndarray]], float],
    config: OptimizerConfig,
):
    """Shared loop over one or more stacked transition vectors."""
    m = graph.n_edges
    c = len(blocks)
    dim = m * c
    rng = np.random.default_rng(config.seed)
    oracle = _Oracle(graph, config)

    def project(theta):
        return [markov.project_rows(theta[i * m:(i + 1) * m], graph, config.floor) for i in range(c)]

    def checked(ps, xs):
        val = objective(ps, xs)
        if not np.isfinite(val):
            raise NonFiniteLoss(f"loss evaluated to {val} at iteration {k}")
        return val

    k = 0
    ps = [b.copy() for b in blocks]
    xs = [oracle.exact(p, None) for p in ps]
    cur = checked(ps, xs)
    trace = [cur]
    accepted = [True]
    best, best_ps, best_xs = 0, ps, xs
    for k in range(1, config.num_steps + 1):
        theta = np.concatenate(ps)
        r = _sphere(rng, dim, config.perturbation_radius)
        qs = project(theta + r)
        ys = [oracle(q, x) for q, x in zip(qs, xs)]
        if config.oracle_sweeps is not None:
            # advance the baseline by the same sweeps so the difference
            # isolates the perturbation
            xs = [oracle(p, x) for p, x in zip(ps, xs)]
            cur = checked(ps, xs)
        g = sphere_gradient(checked(qs, ys) - cur, r)
        ps = project(theta - config.step_size * g)
        xs = [oracle(p, x) for p, x in zip(ps, xs)]
        cur = checked(ps, xs)
        trace.append(cur)
        accepted.append(cur < trace[best])
        if accepted[-1]:
            best, best_ps, best_xs = k, ps, xs
    return best_ps, best_xs, trace, accepted, best


def _finalise(graph, config, blocks, best_ps, best_xs, objective, trace, best):
    """Exact re-solve of the chosen iterate; falls back to the start if the
    inexact oracle misjudged it."""
    oracle = _Oracle(graph, config)
    xs = [oracle.exact(p, x) for p, x in zip(best_ps, best_xs)]
    loss = objective(best_ps, xs)
    if config.oracle_sweeps is not None and best != 0:
        start_xs = [oracle.exact(b, None) for b in blocks]
        start = objective(blocks, start_xs)
        if start < loss:
            return blocks, start_xs, start, 0
    return best_ps, xs, loss, best


def boil_optimize(
    graph: MovementGraph,
    loss: LossSpec | Callable,
    config: OptimizerConfig | None = None,
    p0: np.ndarray | None = None,
) -> BoilResult:
    """Learn a transition vector that minimises ``loss`` of its edge distribution."""
    config = config or OptimizerConfig()
    p0 = markov.uniform_transitions(graph) if p0 is None else np.asarray(p0, dtype=float)
    if p0.shape != (graph.n_edges,):
        raise DimensionMismatch("initial transition vector does not match the graph")
    if not markov.is_row_stochastic(p0, graph, 1e-9):
        raise ValueError("initial transition vector is not row-stochastic")

    def objective(ps, xs):
        return loss(markov.edge_distribution(ps[0], xs[0], graph))

    if np.all(graph.out_degree == 1):
        pi = _Oracle(graph, config).exact(p0, None)
        val = objective([p0], [pi])
        return BoilResult(p0.copy(), pi, [val], 0, val, [True])

    best_ps, best_xs, trace, accepted, best = _zeroth_order(graph, [p0], objective, config)
    ps, xs, val, best = _finalise(graph, config, [p0], best_ps, best_xs, objective, trace, best)
    log.info("boil: %d steps, loss %.6g -> %.6g (best at %d)", config.num_steps, trace[0], val, best)
    return BoilResult(ps[0], xs[0], trace, best, val, accepted)


# -- time-split flows -------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    fraction: float = 0.5
    penalty: float | np.ndarray = 1.0

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError("split fraction must lie in (0, 1)")
        if np.any(np.asarray(self.penalty) < 0):
            raise ValueError("penalty must be non-negative")


@dataclass
class SplitResult:
    P_hat: np.ndarray
    P_bar: np.ndarray
    pi_hat: np.ndarray
    pi_bar: np.ndarray
    p_hat: np.ndarray
    p_bar: np.ndarray
    loss_trace: list[float]
    loss: float
    fraction: float
    accepted: list[bool] = field(default_factory=list)

    def __iter__(self):
        yield from (self.P_hat, self.P_bar, self.pi_hat, self.pi_bar)

    @property
    def combined(self) -> np.ndarray:
        return self.fraction * self.P_hat + (1 - self.fraction) * self.P_bar


def split_loss(base_loss, P_hat, P_bar, split: SplitConfig) -> float:
    """Base loss of the mixture minus half the penalty-weighted squared gap."""
    p = split.fraction
    gap = np.asarray(split.penalty) * (P_hat - P_bar) ** 2
    return base_loss(p * P_hat + (1 - p) * P_bar) - 0.5 * float(np.sum(gap))


def split_optimize(
    graph: MovementGraph,
    loss: LossSpec | Callable,
    config: OptimizerConfig | None = None,
    split: SplitConfig | None = None,
    p0: np.ndarray | None = None,
) -> SplitResult:
    """Jointly learn two balanced chains whose time-mixture is scored by ``loss``."""
    config = config or OptimizerConfig()
    split = split or SplitConfig()
    p0 = markov.uniform_transitions(graph) if p0 is None else np.asarray(p0, dtype=float)
    penalty = np.broadcast_to(np.asarray(split.penalty, dtype=float), (graph.n_edges,))
    split = SplitConfig(split.fraction, penalty)

    def objective(ps, xs):
        P_hat = markov.edge_distribution(ps[0], xs[0], graph)
        P_bar = markov.edge_distribution(ps[1], xs[1], graph)
        return split_loss(loss, P_hat, P_bar, split)

    blocks = [p0.copy(), p0.copy()]
    best_ps, best_xs, trace, accepted, best = _zeroth_order(graph, blocks, objective, config)
    ps, xs, val, _ = _finalise(graph, config, blocks, best_ps, best_xs, objective, trace, best)
    return SplitResult(
        markov.edge_distribution(ps[0], xs[0], graph),
        markov.edge_distribution(ps[1], xs[1], graph),
        xs[0], xs[1], ps[0], ps[1], trace, val, split.fraction, accepted,
    )


def combined_occupancy(result: SplitResult) -> np.ndarray:
    p = result.fraction
    return p * result.pi_hat + (1 - p) * result.pi_bar


def grid_search_transitions(graph: MovementGraph, loss, step: float = 0.01, floor: float = 1e-9, chunk: int = 20000):
    """Exhaustive search over a ``step``-grid of every node's outgoing simplex.

    Stationary distributions come from a dense linear solve, independent of
    the power iteration used by the optimiser.  Only sensible for graphs with
    a handful of free parameters.
    """
    import itertools

    n = graph.n_nodes
    per_node = []
    k = int(round(1 / step))
    for u in range(n):
        d = int(graph.out_degree[u])
        pts = [c for c in itertools.product(range(k + 1), repeat=d - 1) if sum(c) <= k]
        per_node.append(np.array([list(c) + [k - sum(c)] for c in pts], dtype=float) / k)
    sizes = [len(a) for a in per_node]
    total = int(np.prod(sizes))
    best_val, best_p = np.inf, None
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        parts = np.unravel_index(idx, sizes)
        p = np.concatenate([per_node[u][parts[u]] for u in range(n)], axis=1)
        p = np.maximum(p, floor)
        p /= np.add.reduceat(p, graph.indptr[:-1], axis=1)[:, np.repeat(np.arange(n), graph.out_degree)]
        pi = _dense_stationary(p, graph)
        P = pi[:, graph.src] * p
        vals = loss.batch(P) if hasattr(loss, "batch") else np.array([loss(row) for row in P])
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_p = float(vals[j]), p[j].copy()
    return best_val, best_p


def _dense_stationary(p_batch: np.ndarray, graph: MovementGraph) -> np.ndarray:
    """Batched solve of pi (I - P) = 0, sum(pi) = 1."""
    n = graph.n_nodes
    b = p_batch.shape[0]
    M = np.zeros((b, n, n))
    np.add.at(M, (slice(None), graph.src, graph.dst), p_batch)
    A = np.transpose(np.eye(n)[None] - M, (0, 2, 1)).copy()
    A[:, -1, :] = 1.0
    rhs = np.zeros((b, n))
    rhs[:, -1] = 1.0
    pi = np.linalg.solve(A, rhs[..., None])[..., 0]
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum(axis=1, keepdims=True)


__all__: Sequence[str] = [
    "LossKind", "LossSpec", "OptimizerConfig", "BoilResult", "SplitConfig", "SplitResult",
    "coverage_loss", "patrolling_loss", "reachability_loss", "reachability_map",
    "boil_optimize", "split_optimize", "split_loss", "combined_occupancy", "grid_search_transitions",
]
