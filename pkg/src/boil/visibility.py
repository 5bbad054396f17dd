"""Edge visibility by elevation-aware ray casting.

Positions use cell-centre coordinates: the cell at (row, col) is the square
``[col - 0.5, col + 0.5] x [row - 0.5, row + 0.5]`` and points are ``(x, y) =
(col, row)``.  A ray is blocked by any wall it touches, and by any open cell
it touches that stands strictly higher than both the observer and the target.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .environment import GridSpec, MovementGraph

_EPS = 1e-9


class OutOfBounds(ValueError):
    pass


class NonContiguousPath(ValueError):
    pass


class CacheMismatch(ValueError):
    pass


class Fov(str, enum.Enum):
    FORWARD = "forward"
    OMNI = "omni"


@dataclass(frozen=True)
class VisibilityParams:
    radius: float = 3.5
    fov: Fov = Fov.FORWARD
    samples_per_edge: int = 4

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.samples_per_edge < 1:
            raise ValueError("samples_per_edge must be >= 1")
        object.__setattr__(self, "fov", Fov(self.fov))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fov"] = self.fov.value
        return d


def supercover(x0: float, y0: float, x1: float, y1: float) -> list[tuple[int, int]]:
    """All (row, col) cells whose closed square touches the closed segment."""
    cells = []
    dx, dy = x1 - x0, y1 - y0
    for r in range(math.floor(min(y0, y1) + 0.5 - _EPS), math.ceil(max(y0, y1) - 0.5 + _EPS) + 1):
        for c in range(math.floor(min(x0, x1) + 0.5 - _EPS), math.ceil(max(x0, x1) - 0.5 + _EPS) + 1):
            # Liang-Barsky clip of the segment against the cell square
            lo, hi = 0.0, 1.0
            ok = True
            for p, q0, qmin, qmax in ((dx, x0, c - 0.5, c + 0.5), (dy, y0, r - 0.5, r + 0.5)):
                if abs(p) < 1e-15:
                    if q0 < qmin - _EPS or q0 > qmax + _EPS:
                        ok = False
                        break
                    continue
                t1, t2 = (qmin - _EPS - q0) / p, (qmax + _EPS - q0) / p
                if t1 > t2:
                    t1, t2 = t2, t1
                lo, hi = max(lo, t1), min(hi, t2)
                if lo > hi:
                    ok = False
                    break
            if ok:
                cells.append((r, c))
    return cells


def containing_cell(x: float, y: float) -> tuple[int, int]:
    return math.floor(y + 0.5), math.floor(x + 0.5)


def line_of_sight(
    grid: GridSpec,
    observer: tuple[float, float],
    target: tuple[int, int],
    params: VisibilityParams,
    heading: tuple[float, float] | None = None,
    observer_elevation: int | None = None,
) -> bool:
    """Whether the target cell (row, col) is visible from a point (x, y)."""
    x, y = observer
    orow, ocol = containing_cell(x, y)
    if not (0 <= orow < grid.height and 0 <= ocol < grid.width):
        raise OutOfBounds(f"observer {observer} outside the grid")
    if grid.walls[orow, ocol]:
        raise OutOfBounds(f"observer {observer} stands on a wall")
    tr, tc = target
    if not (0 <= tr < grid.height and 0 <= tc < grid.width):
        raise OutOfBounds(f"target {target} outside the grid")
    if grid.walls[tr, tc]:
        return False
    ox_elev = int(grid.elevation[orow, ocol]) if observer_elevation is None else observer_elevation
    vx, vy = tc - x, tr - y
    if math.hypot(vx, vy) > params.radius + 1e-12:
        return False
    if heading is not None and params.fov is Fov.FORWARD:
        if vx * heading[0] + vy * heading[1] < -1e-12:
            return False
    ceiling = max(ox_elev, int(grid.elevation[tr, tc]))
    for r, c in supercover(x, y, tc, tr):
        if (r, c) == (orow, ocol) or (r, c) == (tr, tc):
            continue
        if not (0 <= r < grid.height and 0 <= c < grid.width):
            continue
        if grid.walls[r, c] or grid.elevation[r, c] > ceiling:
            return False
    return True


def sample_fractions(samples: int) -> np.ndarray:
    return (np.arange(samples) + 0.5) / samples


def edge_visibility(
    grid: GridSpec, graph: MovementGraph, edge: tuple[int, int], params: VisibilityParams
) -> dict[int, float]:
    """Time-averaged visibility of every node while traversing one edge.

    Straightforward per-sample ray casting; :func:`build_visibility_map`
    computes the same values for all edges at once.
    """
    u, v = edge
    r0, c0 = graph.node_rc(u)
    r1, c1 = graph.node_rc(v)
    loop = u == v
    fov_params = params if not loop else VisibilityParams(params.radius, Fov.OMNI, params.samples_per_edge)
    heading = None if loop else (c1 - c0, r1 - r0)
    fracs = sample_fractions(params.samples_per_edge)
    counts: dict[int, int] = {}
    reach = int(math.ceil(params.radius)) + 1
    for t in fracs:
        x, y = c0 + t * (c1 - c0), r0 + t * (r1 - r0)
        for tr in range(max(0, int(y) - reach), min(grid.height, int(y) + reach + 1)):
            for tc in range(max(0, int(x) - reach), min(grid.width, int(x) + reach + 1)):
                if grid.walls[tr, tc]:
                    continue
                if line_of_sight(grid, (x, y), (tr, tc), fov_params, heading):
                    w = graph.node_of_cell(tr * grid.width + tc)
                    counts[w] = counts.get(w, 0) + 1
    return {w: k / params.samples_per_edge for w, k in sorted(counts.items())}


@lru_cache(maxsize=64)
def _patterns(dr: int, dc: int, t: float, radius: float, forward: bool):
    """Relative ray geometry for an observer at ``t * (dc, dr)`` from the
    source centre.  Returns the observer cell offset and, per reachable
    target offset, the offsets of intermediate cells."""
    px, py = t * dc, t * dr
    orow, ocol = containing_cell(px, py)
    reach = int(math.ceil(radius)) + 1
    out = []
    for tr in range(-reach, reach + 1):
        for tc in range(-reach, reach + 1):
            vx, vy = tc - px, tr - py
            if math.hypot(vx, vy) > radius + 1e-12:
                continue
            if forward and vx * dc + vy * dr < -1e-12:
                continue
            mids = tuple(
                cell for cell in supercover(px, py, tc, tr)
                if cell != (orow, ocol) and cell != (tr, tc)
            )
            out.append(((tr, tc), mids))
    return (orow, ocol), tuple(out)


class VisibilityMap:
    """Sparse per-edge visibility vectors, stored as an (edges x nodes) CSR matrix."""

    def __init__(self, matrix, src=None, dst=None, times=None):
        self.matrix = csr_matrix(matrix)
        self.matrix.sum_duplicates()
        self.matrix.eliminate_zeros()
        m = self.matrix.shape[0]
        self.src = None if src is None else np.asarray(src)
        self.dst = None if dst is None else np.asarray(dst)
        self.times = np.ones(m) if times is None else np.asarray(times, dtype=float)
        data = self.matrix.data
        if data.size and (data.min() <= 0 or data.max() > 1 + 1e-12):
            raise ValueError("visibility values must lie in (0, 1]")

    @classmethod
    def from_rows(cls, rows: list[dict[int, float]], n_nodes: int, graph: MovementGraph | None = None):
        r, c, d = [], [], []
        for e, row in enumerate(rows):
            for w, val in row.items():
                r.append(e)
                c.append(w)
                d.append(val)
        mat = coo_matrix((d, (r, c)), shape=(len(rows), n_nodes))
        if graph is None:
            return cls(mat)
        return cls(mat, graph.src, graph.dst, graph.traversal_time)

    @property
    def n_edges(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[1]

    def row(self, e: int) -> dict[int, float]:
        lo, hi = self.matrix.indptr[e], self.matrix.indptr[e + 1]
        return dict(zip(self.matrix.indices[lo:hi].tolist(), self.matrix.data[lo:hi].tolist()))

    def dense_row(self, e: int) -> np.ndarray:
        return self.matrix[e].toarray().ravel()

    def expected_visibility(self, edge_dist) -> np.ndarray:
        """A(w) = sum_e P(e) V(e)(w)."""
        return self.matrix.T @ np.asarray(edge_dist, dtype=float)

    def support_sizes(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Supports as dense (edges x max_support) arrays; padding has value 0
        and node index 0."""
        sizes = self.support_sizes()
        width = max(int(sizes.max(initial=0)), 1)
        nodes = np.zeros((self.n_edges, width), dtype=np.int64)
        vals = np.zeros((self.n_edges, width))
        slot = np.arange(self.matrix.nnz) - np.repeat(self.matrix.indptr[:-1], sizes)
        rows = np.repeat(np.arange(self.n_edges), sizes)
        nodes[rows, slot] = self.matrix.indices
        vals[rows, slot] = self.matrix.data
        return nodes, vals

    def __eq__(self, other):
        if not isinstance(other, VisibilityMap):
            return NotImplemented
        a, b = self.matrix, other.matrix
        return (
            a.shape == b.shape
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.allclose(a.data, b.data, rtol=0, atol=1e-15)
        )

    __hash__ = None


def build_visibility_map(grid: GridSpec, graph: MovementGraph, params: VisibilityParams | None = None) -> VisibilityMap:
    """Visibility for every edge of a grid-derived movement graph.

    Rays are grouped by their geometry relative to the edge source so each
    group is evaluated for all edges with numpy.  Edges that are not single
    grid moves fall back to :func:`edge_visibility`.
    """
    params = params or VisibilityParams()
    h, w = grid.height, grid.width
    walls = grid.walls
    elev = grid.elevation.astype(np.int64)
    src_rc = np.column_stack(np.divmod(graph.node_cell[graph.src], w))
    dst_rc = np.column_stack(np.divmod(graph.node_cell[graph.dst], w))
    delta = dst_rc - src_rc
    cell_node = np.full(h * w, -1, dtype=np.int64)
    cell_node[graph.node_cell] = np.arange(graph.n_nodes)
    S = params.samples_per_edge

    rows_out, cols_out = [], []
    weights_out = []
    fallback = []
    groups: dict[tuple[int, int], np.ndarray] = {}
    for key in {tuple(d) for d in delta.tolist()}:
        if abs(key[0]) + abs(key[1]) > 1:
            fallback.extend(np.flatnonzero((delta == key).all(axis=1)).tolist())
            continue
        groups[key] = np.flatnonzero((delta == key).all(axis=1))

    for (dr, dc), edges in sorted(groups.items()):
        loop = dr == 0 and dc == 0
        fracs = [0.5] if loop else sample_fractions(S).tolist()
        weight = 1.0 if loop else 1.0 / S
        forward = params.fov is Fov.FORWARD and not loop
        r0, c0 = src_rc[edges, 0], src_rc[edges, 1]
        for t in fracs:
            (orow, ocol), pats = _patterns(dr, dc, 0.0 if loop else t, params.radius, forward)
            obs_elev = elev[r0 + orow, c0 + ocol]
            for (tr, tc), mids in pats:
                rr, cc = r0 + tr, c0 + tc
                ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                rrc, ccc = np.where(ok, rr, 0), np.where(ok, cc, 0)
                ok &= ~walls[rrc, ccc]
                ceiling = np.maximum(obs_elev, elev[rrc, ccc])
                for mr, mc in mids:
                    mrr, mcc = r0 + mr, c0 + mc
                    inb = (mrr >= 0) & (mrr < h) & (mcc >= 0) & (mcc < w)
                    mrr, mcc = np.where(inb, mrr, 0), np.where(inb, mcc, 0)
                    blocked = inb & (walls[mrr, mcc] | (elev[mrr, mcc] > ceiling))
                    ok &= ~blocked
                if ok.any():
                    rows_out.append(edges[ok])
                    cols_out.append(cell_node[rrc[ok] * w + ccc[ok]])
                    weights_out.append(np.full(int(ok.sum()), weight))

    for e in fallback:
        row = edge_visibility(grid, graph, (int(graph.src[e]), int(graph.dst[e])), params)
        rows_out.append(np.full(len(row), e))
        cols_out.append(np.array(list(row), dtype=np.int64))
        weights_out.append(np.array(list(row.values())))

    if rows_out:
        r = np.concatenate(rows_out)
        c = np.concatenate(cols_out)
        d = np.concatenate(weights_out)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        d = np.zeros(0)
    mat = coo_matrix((d, (r, c)), shape=(graph.n_edges, graph.n_nodes)).tocsr()
    mat.sum_duplicates()
    # counts of k/S must come back exact after summation
    mat.data = np.round(mat.data * S) / S
    mat.data = np.minimum(mat.data, 1.0)
    return VisibilityMap(mat, graph.src, graph.dst, graph.traversal_time)


# -- path composition ----------------------------------------------------------

def compose(vec_a: dict[int, float], time_a: float, vec_b: dict[int, float], time_b: float) -> dict[int, float]:
    """Visibility of path a followed by path b: the time-weighted average."""
    total = time_a + time_b
    out = {w: time_a * v / total for w, v in vec_a.items()}
    for w, v in vec_b.items():
        out[w] = out.get(w, 0.0) + time_b * v / total
    return out


def check_contiguous(vis_or_graph, path) -> None:
    src, dst = vis_or_graph.src, vis_or_graph.dst
    if src is None:
        return
    for a, b in zip(path[:-1], path[1:]):
        if dst[a] != src[b]:
            raise NonContiguousPath(f"edge {a} ends at {dst[a]} but edge {b} starts at {src[b]}")


def path_visibility(vis: VisibilityMap, path, times=None) -> dict[int, float]:
    """Time-weighted average of the edge visibilities along a walk."""
    path = [int(e) for e in path]
    if not path:
        raise NonContiguousPath("empty path")
    times = vis.times[path] if times is None else np.asarray(times, dtype=float)
    if len(times) != len(path):
        raise ValueError("path and times differ in length")
    check_contiguous(vis, path)
    sub = vis.matrix[path]
    acc = np.asarray(sub.T @ times).ravel() / float(np.sum(times))
    nz = np.flatnonzero(acc)
    return dict(zip(nz.tolist(), acc[nz].tolist()))


# -- cache ----------------------------------------------------------------------

def cache_key(grid: GridSpec, params: VisibilityParams) -> str:
    h = hashlib.sha256()
    h.update(grid.content_hash().encode())
    h.update(json.dumps(params.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def save_visibility(vis: VisibilityMap, path, key: str) -> None:
    buf = io.BytesIO()
    m = vis.matrix
    np.savez(
        buf, key=np.array(key), indptr=m.indptr, indices=m.indices, data=m.data,
        shape=np.array(m.shape), src=vis.src, dst=vis.dst, times=vis.times,
    )
    Path(path).write_bytes(buf.getvalue())


def load_visibility(path, key: str) -> VisibilityMap:
    with np.load(path) as f:
        stored = str(f["key"])
        if stored != key:
            raise CacheMismatch(f"visibility cache {path} has key {stored}, expected {key}")
        mat = csr_matrix((f["data"], f["indices"], f["indptr"]), shape=tuple(f["shape"]))
        return VisibilityMap(mat, f["src"], f["dst"], f["times"])
