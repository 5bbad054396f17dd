"""Metropolis-Hastings stepping toward a possibly non-reversible target.

The target chain's net flux (vorticity) enters the acceptance ratio, so that
a walker restricted to graph edges can still follow a chain that does not
satisfy detailed balance.  Unconstrained edge sampling (teleporting agents)
lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import markov
from .environment import MovementGraph

# probabilities over graph.out_edges(u), in edge-id order
ProposalKernel = Callable[[int], np.ndarray]


@dataclass
class MHState:
    current: int
    graph: MovementGraph
    pi: np.ndarray
    p: np.ndarray
    gamma: np.ndarray  # vorticity on each edge's (src, dst) pair
    rng: np.random.Generator

    @classmethod
    def from_target(cls, graph: MovementGraph, p, pi, start: int, rng) -> "MHState":
        gamma = markov.vorticity(p, pi, graph).on_edges(graph)
        return cls(int(start), graph, np.asarray(pi, float), np.asarray(p, float), gamma, rng)


def uniform_kernel(graph: MovementGraph) -> ProposalKernel:
    return lambda u: np.full(int(graph.out_degree[u]), 1.0 / graph.out_degree[u])


def target_kernel(graph: MovementGraph, p: np.ndarray) -> ProposalKernel:
    return lambda u: p[graph.indptr[u]:graph.indptr[u + 1]]


def _pair_prob(graph: MovementGraph, Q: ProposalKernel, u: int, v: int) -> float:
    """Q(u, v) summed over parallel edges; 0 without an edge."""
    lo, hi = graph.indptr[u], graph.indptr[u + 1]
    return float(np.sum(Q(u)[graph.dst[lo:hi] == v]))


def acceptance(pi_u, pi_v, q_uv, q_vu, gamma_uv):
    """min(1, R) with the flux clipped into [-pi(v)Q(v,u), pi(u)Q(u,v)].

    Works elementwise on arrays; R = 1 where pi(u)Q(u,v) = 0.
    """
    fwd = np.asarray(pi_u) * q_uv
    back = np.asarray(pi_v) * q_vu
    g = np.clip(gamma_uv, -back, fwd)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(fwd > 0, (g + back) / np.where(fwd > 0, fwd, 1.0), 1.0)
    return np.minimum(1.0, r)


def hastings_ratio(u: int, v: int, state: MHState, Q: ProposalKernel) -> float:
    """Non-reversible Hastings ratio R(u, v) (not truncated at 1)."""
    g = state.graph
    if u == v:
        return 1.0
    q_uv = _pair_prob(g, Q, u, v)
    q_vu = _pair_prob(g, Q, v, u)
    fwd = state.pi[u] * q_uv
    if fwd == 0:
        return 1.0
    back = state.pi[v] * q_vu
    lo, hi = g.indptr[u], g.indptr[u + 1]
    hit = np.flatnonzero(g.dst[lo:hi] == v)
    gamma = float(state.gamma[lo + hit[0]]) if hit.size else 0.0
    gamma = min(max(gamma, -back), fwd)
    return (gamma + back) / fwd


def mh_step(state: MHState, Q: ProposalKernel) -> int:
    """Propose along an out-edge, accept or stay; returns the traversed edge id."""
    g = state.graph
    u = state.current
    probs = Q(u)
    lo = int(g.indptr[u])
    k = int(np.searchsorted(np.cumsum(probs), state.rng.random() * probs.sum(), side="right"))
    e = lo + min(k, probs.size - 1)
    v = int(g.dst[e])
    if state.rng.random() < min(1.0, hastings_ratio(u, v, state, Q)):
        state.current = v
        return e
    return lo  # the self-loop


def mh_kernel(state: MHState, Q: ProposalKernel) -> np.ndarray:
    """Per-edge probability of traversing each edge under one mh_step with a
    fixed proposal; rejected mass goes to the self-loop."""
    g = state.graph
    K = np.zeros(g.n_edges)
    for u in range(g.n_nodes):
        probs = Q(u)
        for j, e in enumerate(g.out_edges(u)):
            v = int(g.dst[e])
            K[e] += probs[j] * min(1.0, hastings_ratio(u, v, state, Q))
        lo = g.indptr[u]
        K[lo] += 1.0 - K[lo:g.indptr[u + 1]].sum()
    return K


def run_kernel(graph: MovementGraph, K: np.ndarray, start: int, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Edge traversal counts of a chain following per-edge kernel ``K``."""
    cum = np.cumsum(K)
    base = np.concatenate([[0.0], cum])[graph.indptr[:-1]]
    rows = [cum[graph.indptr[u]:graph.indptr[u + 1]].tolist() for u in range(graph.n_nodes)]
    los = graph.indptr[:-1].tolist()
    dst = graph.dst.tolist()
    counts = np.zeros(graph.n_edges, dtype=np.int64)
    import bisect

    u = int(start)
    for x in rng.random(steps).tolist():
        row = rows[u]
        j = min(bisect.bisect_right(row, base[u] + x * (row[-1] - base[u])), len(row) - 1)
        e = los[u] + j
        counts[e] += 1
        u = dst[e]
    return counts


def sample_edge_unconstrained(P, rng: np.random.Generator, size=None):
    """Categorical draw over all edges, ignoring the current position."""
    cum = np.cumsum(np.asarray(P, dtype=float))
    x = rng.random(size) * cum[-1]
    out = np.minimum(np.searchsorted(cum, x, side="right"), cum.size - 1)
    return int(out) if size is None else out
