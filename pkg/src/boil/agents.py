"""Patrolling strategies.

Each strategy maps an agent's position (and, for the count-driven ones, the
per-node visibility counts seen so far) to the next edge.  The scalar
``*_step`` functions act on one agent; ``VectorPolicy`` steps a whole team at
once and is what the simulator uses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import markov, sampler
from .environment import MovementGraph
from .visibility import VisibilityMap

COUNT_FLOOR = 1e-6


class StrategyKind(str, enum.Enum):
    RANDOM = "random"
    OPT_RANDOM = "optrandom"
    FRONTIER = "frontier"
    SAMPLE = "sample"
    COMM_FRONTIER = "commfrontier"
    COMM_SAMPLE = "commsample"
    OPTIMAL = "optimal"

    @property
    def needs_distribution(self) -> bool:
        return self in (StrategyKind.SAMPLE, StrategyKind.COMM_SAMPLE, StrategyKind.OPTIMAL)

    @property
    def uses_counts(self) -> bool:
        return self in (StrategyKind.FRONTIER, StrategyKind.SAMPLE, StrategyKind.COMM_FRONTIER, StrategyKind.COMM_SAMPLE)

    @property
    def communicates(self) -> bool:
        return self in (StrategyKind.COMM_FRONTIER, StrategyKind.COMM_SAMPLE)

    @property
    def teleports(self) -> bool:
        return self in (StrategyKind.OPTIMAL, StrategyKind.OPT_RANDOM)


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind
    lam: float = 10.0
    shared_counts: bool | None = None  # defaults to True for the Comm kinds
    distribution: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.shared_counts is None:
            object.__setattr__(self, "shared_counts", self.kind.communicates)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "lam": self.lam, "shared_counts": self.shared_counts,
                "distribution": self.distribution}


@dataclass(frozen=True)
class Target:
    """A learned edge distribution with its node occupancy, transitions and
    per-edge vorticity."""

    P: np.ndarray
    pi: np.ndarray
    p: np.ndarray
    gamma: np.ndarray

    @classmethod
    def from_transitions(cls, graph: MovementGraph, p, pi) -> "Target":
        p = np.asarray(p, dtype=float)
        pi = np.asarray(pi, dtype=float)
        gamma = markov.vorticity(p, pi, graph).on_edges(graph)
        return cls(markov.edge_distribution(p, pi, graph), pi, p, gamma)

    @classmethod
    def from_edge_distribution(cls, graph: MovementGraph, P) -> "Target":
        pi, p = markov.decompose_edge_distribution(np.asarray(P, dtype=float), graph)
        return cls.from_transitions(graph, p, pi)


# -- scalar strategies ------------------------------------------------------------

def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), probs.size - 1)


def frontier_weight(vis: VisibilityMap, e: int, C) -> float:
    """Mean of 1/max(C(w), floor) over the nodes edge ``e`` can see."""
    nodes = list(vis.row(e))
    if not nodes:
        return COUNT_FLOOR
    return float(np.mean([1.0 / max(C[w], COUNT_FLOOR) for w in nodes]))


def random_step(u: int, graph: MovementGraph, rng: np.random.Generator) -> int:
    return int(graph.indptr[u]) + int(rng.integers(graph.out_degree[u]))


def frontier_probabilities(u, graph, vis, C, scale: int = 1) -> np.ndarray:
    w = np.array([scale * frontier_weight(vis, e, C) for e in graph.out_edges(u)])
    return w / w.sum()


def frontier_step(u, graph, vis, C, rng, scale: int = 1) -> int:
    return int(graph.indptr[u]) + _draw(frontier_probabilities(u, graph, vis, C, scale), rng)


def sample_proposal(u, graph, vis, C, lam: float, scale: int = 1) -> np.ndarray:
    """Normalised Q(u, .) = 1 + lam * scale * frontier weight."""
    q = np.array([1.0 + lam * scale * frontier_weight(vis, e, C) for e in graph.out_edges(u)])
    return q / q.sum()


def sample_step(u, graph, vis, C, target: Target, lam: float, rng, scale: int = 1) -> int:
    """One MH move with the count-biased proposal; returns the traversed edge."""
    state = sampler.MHState(int(u), graph, target.pi, target.p, target.gamma, rng)
    return sampler.mh_step(state, lambda x: sample_proposal(x, graph, vis, C, lam, scale))


def optimal_step(P, rng: np.random.Generator) -> int:
    return sampler.sample_edge_unconstrained(P, rng)


def opt_random_step(graph: MovementGraph, rng: np.random.Generator) -> int:
    return int(rng.integers(graph.n_edges))


# -- team policy ---------------------------------------------------------------------

class VectorPolicy:
    """Steps every agent of a team with one set of array operations.

    ``uniforms`` passed to :meth:`step` holds two fresh U(0,1) draws per agent:
    column 0 picks the edge, column 1 decides MH acceptance.
    """

    def __init__(self, graph: MovementGraph, vis: VisibilityMap, config: StrategyConfig,
                 n_agents: int, target: Target | None = None):
        kind = config.kind
        if kind.needs_distribution and target is None:
            raise ValueError(f"strategy {kind.value} needs a distribution")
        self.graph, self.config, self.kind, self.n_agents = graph, config, kind, n_agents
        self.target = target
        self.scale = n_agents if kind.communicates else 1
        m = graph.n_edges
        deg = graph.out_degree
        D = int(deg.max())
        # out-edge table padded with a dummy edge id m that sees nothing
        self.out = np.full((graph.n_nodes, D), m, dtype=np.int64)
        for j in range(D):
            has = deg > j
            self.out[has, j] = graph.indptr[:-1][has] + j
        self.valid = self.out < m
        nodes, vals = vis.padded()
        # padding and the dummy edge point at dummy node n_nodes
        nodes = np.where(vals > 0, nodes, graph.n_nodes)
        self.supp_nodes = np.vstack([nodes, np.full((1, nodes.shape[1]), graph.n_nodes)])
        self.supp_mask = np.vstack([vals > 0, np.zeros((1, nodes.shape[1]), bool)])
        self.supp_vals = np.vstack([np.where(vals > 0, vals, 0.0), np.zeros((1, nodes.shape[1]))])
        self.supp_len = self.supp_mask.sum(axis=1)
        self.dst = np.concatenate([graph.dst, [-1]])
        if target is not None:
            self.cumP = np.cumsum(target.P)
        if kind is StrategyKind.OPT_RANDOM:
            self.cumP = np.arange(1, m + 1, dtype=float)

    @property
    def shared(self) -> bool:
        return bool(self.config.shared_counts)

    def new_counts(self) -> np.ndarray:
        rows = 1 if self.shared else self.n_agents
        return np.zeros((rows, self.graph.n_nodes + 1))

    def _frontier(self, E: np.ndarray, C: np.ndarray) -> np.ndarray:
        rows = np.zeros(E.shape[0], dtype=np.int64) if C.shape[0] == 1 else np.arange(E.shape[0])
        nodes = self.supp_nodes[E]
        inv = 1.0 / np.maximum(C[rows[:, None, None], nodes], COUNT_FLOOR)
        inv *= self.supp_mask[E]
        n = self.supp_len[E]
        w = np.where(n > 0, inv.sum(axis=-1) / np.maximum(n, 1), COUNT_FLOOR)
        return self.scale * w

    def _weights(self, cur: np.ndarray, C: np.ndarray) -> np.ndarray:
        E = self.out[cur]
        if self.kind in (StrategyKind.FRONTIER, StrategyKind.COMM_FRONTIER):
            w = self._frontier(E, C)
        else:
            w = 1.0 + self.config.lam * self._frontier(E, C)
        w = np.where(self.valid[cur], w, 0.0)
        return w / w.sum(axis=1, keepdims=True)

    def _pick(self, cur, probs, u0):
        cum = np.cumsum(probs, axis=1)
        j = (cum < u0[:, None] * cum[:, -1:]).sum(axis=1)
        j = np.minimum(j, self.graph.out_degree[cur] - 1)
        return self.out[cur, j], j

    def step(self, cur: np.ndarray, uniforms: np.ndarray, C: np.ndarray | None = None) -> np.ndarray:
        kind = self.kind
        u0 = uniforms[:, 0]
        if kind.teleports:
            x = u0 * self.cumP[-1]
            return np.minimum(np.searchsorted(self.cumP, x, side="right"), self.graph.n_edges - 1)
        g = self.graph
        if kind is StrategyKind.RANDOM:
            return g.indptr[cur] + np.minimum((u0 * g.out_degree[cur]).astype(np.int64), g.out_degree[cur] - 1)
        probs = self._weights(cur, C)
        e, _ = self._pick(cur, probs, u0)
        if kind in (StrategyKind.FRONTIER, StrategyKind.COMM_FRONTIER):
            return e
        v = g.dst[e]
        q_uv = np.sum(probs * (self.dst[self.out[cur]] == v[:, None]), axis=1)
        probs_v = self._weights(v, C)
        q_vu = np.sum(probs_v * (self.dst[self.out[v]] == cur[:, None]), axis=1)
        t = self.target
        acc = sampler.acceptance(t.pi[cur], t.pi[v], q_uv, q_vu, t.gamma[e])
        ok = (v == cur) | (uniforms[:, 1] < acc)
        return np.where(ok, e, g.indptr[cur])

    def update_counts(self, C: np.ndarray, edges: np.ndarray) -> None:
        """Add one to C(w) for every node in the support of each traversed edge."""
        nodes = self.supp_nodes[edges]
        mask = self.supp_mask[edges]
        if self.shared:
            np.add.at(C[0], nodes[mask], 1.0)
        else:
            rows = np.broadcast_to(np.arange(edges.size)[:, None], nodes.shape)
            C[rows[mask], nodes[mask]] += 1.0
