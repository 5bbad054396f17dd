"""Macro-edges for multi-hop walks.

A walk through the movement graph can be added as a single edge whose
visibility is the time-weighted average of its hops.  Any distribution over
the enlarged edge set maps back onto the base edges without changing the
expected visibility of any node, so the loss is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, vstack

from .environment import MovementGraph
from .visibility import NonContiguousPath, VisibilityMap, path_visibility


@dataclass(frozen=True)
class PathEdge:
    edge_id: int  # id in the augmented graph
    node_sequence: tuple[int, ...]
    base_edges: tuple[int, ...]
    total_time: float
    # time share T_e / T_path of each distinct base edge, summed over repeats
    shares: dict[int, float]


@dataclass(frozen=True)
class AugmentedGraph:
    base: MovementGraph
    graph: MovementGraph
    # augmented id of every base edge
    base_ids: np.ndarray
    paths: tuple[PathEdge, ...]


def walk_edges(graph: MovementGraph, nodes) -> list[int]:
    """Edge ids of a node walk; the first matching edge is used per hop."""
    nodes = [int(u) for u in nodes]
    if len(nodes) < 2:
        raise NonContiguousPath("a path needs at least two nodes")
    index = graph.edge_index()
    out = []
    for u, v in zip(nodes[:-1], nodes[1:]):
        e = index.get((u, v))
        if e is None:
            raise NonContiguousPath(f"no edge {u} -> {v}")
        out.append(e)
    return out


def augment_with_paths(graph: MovementGraph, vis: VisibilityMap, paths) -> tuple[AugmentedGraph, VisibilityMap]:
    """Add one macro-edge per node walk in ``paths``."""
    base_m = graph.n_edges
    hops = [walk_edges(graph, p) for p in paths]
    src = np.concatenate([graph.src, [p[0] for p in paths]]).astype(np.int64)
    dst = np.concatenate([graph.dst, [p[-1] for p in paths]]).astype(np.int64)
    times = np.concatenate([graph.traversal_time, [graph.traversal_time[h].sum() for h in hops]])
    order = np.lexsort((np.arange(src.size), dst, src != dst, src))
    new_id = np.empty_like(order)
    new_id[order] = np.arange(order.size)
    g = MovementGraph(
        graph.n_nodes, src[order], dst[order], times[order],
        np.searchsorted(src[order], np.arange(graph.n_nodes + 1)), graph.node_cell, graph.width,
    )

    rows = [vis.matrix]
    records = []
    for k, (nodes, h) in enumerate(zip(paths, hops)):
        vec = path_visibility(vis, h)
        rows.append(csr_matrix((list(vec.values()), ([0] * len(vec), list(vec.keys()))), shape=(1, vis.n_nodes)))
        t = graph.traversal_time[h]
        shares: dict[int, float] = {}
        for e, te in zip(h, t):
            shares[e] = shares.get(e, 0.0) + te / t.sum()
        records.append(PathEdge(int(new_id[base_m + k]), tuple(int(u) for u in nodes), tuple(h), float(t.sum()), shares))
    mat = vstack(rows).tocsr()[order]
    aug_vis = VisibilityMap(mat, g.src, g.dst, g.traversal_time)
    return AugmentedGraph(graph, g, new_id[:base_m], tuple(records)), aug_vis


def augment_with_path(graph: MovementGraph, vis: VisibilityMap, path) -> tuple[AugmentedGraph, VisibilityMap]:
    return augment_with_paths(graph, vis, [path])


def back_project(augmented: AugmentedGraph, P_aug) -> np.ndarray:
    """Spread each macro-edge's mass over its hops in proportion to time."""
    P_aug = np.asarray(P_aug, dtype=float)
    if P_aug.shape != (augmented.graph.n_edges,):
        raise ValueError("distribution does not match the augmented edge set")
    P = P_aug[augmented.base_ids].copy()
    for path in augmented.paths:
        mass = P_aug[path.edge_id]
        for e, share in path.shares.items():
            P[e] += share * mass
    return P
