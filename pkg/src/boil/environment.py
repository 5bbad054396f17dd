"""Grid environments and the directed movement graph derived from them.

Cells are stored row-major with a top-left origin.  Open cells carry one of
three elevation levels.  Movement between 4-neighbours is allowed downhill or
level in a single step, but uphill only one level at a time, so steep drops
become one-way edges.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ENV_VERSION = "env/1"
MAX_ELEVATION = 2
NEIGHBOURS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # (drow, dcol): N, E, S, W


class EnvironmentError_(Exception):
    """Base class for environment failures."""


class EmptyGrid(EnvironmentError_):
    pass


class AllWalls(EnvironmentError_):
    pass


class ValidationError(EnvironmentError_):
    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


class ParseError(EnvironmentError_):
    def __init__(self, message: str, line: int, offset: int):
        self.line = line
        self.offset = offset
        super().__init__(f"{message} (line {line}, offset {offset})")


class CellKind(str, enum.Enum):
    WALL = "wall"
    OPEN = "open"


class EnvKind(str, enum.Enum):
    SMALL = "small"
    LARGE = "large"


@dataclass(frozen=True)
class Cell:
    kind: CellKind
    elevation: int = 0


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Rectangular grid of cells plus tracked marker nodes.

    ``walls`` and ``elevation`` are the array views used by the numerical
    code; ``markers`` hold *cell* indices (row * width + col) of open cells.
    """

    width: int
    height: int
    walls: np.ndarray  # bool, shape (height, width)
    elevation: np.ndarray  # int8, shape (height, width); 0 under walls
    markers: tuple[int, ...] = ()

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        elev = np.where(walls, 0, np.asarray(self.elevation, dtype=np.int8))
        walls.setflags(write=False)
        elev.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "elevation", elev)
        object.__setattr__(self, "markers", tuple(int(m) for m in self.markers))

    @classmethod
    def from_cells(cls, width: int, height: int, cells, markers=()) -> "GridSpec":
        cells = list(cells)
        if width <= 0 or height <= 0:
            raise EmptyGrid(f"grid must be non-empty, got {width}x{height}")
        if len(cells) != width * height:
            raise ValidationError(
                "cells length = width x height",
                f"{len(cells)} cells for a {width}x{height} grid",
            )
        walls = np.array([c.kind == CellKind.WALL for c in cells], dtype=bool)
        elev = np.array([c.elevation for c in cells], dtype=np.int64)
        if np.any((elev < 0) | (elev > MAX_ELEVATION)):
            raise ValidationError("elevation in {0,1,2}")
        grid = cls(width, height, walls.reshape(height, width),
                   elev.reshape(height, width), tuple(markers))
        grid.validate()
        return grid

    @property
    def cells(self) -> list[Cell]:
        out = []
        for w, e in zip(self.walls.ravel(), self.elevation.ravel()):
            out.append(Cell(CellKind.WALL) if w else Cell(CellKind.OPEN, int(e)))
        return out

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise EmptyGrid(f"grid must be non-empty, got {self.width}x{self.height}")
        if self.walls.shape != (self.height, self.width):
            raise ValidationError("cells length = width x height")
        if np.any((self.elevation < 0) | (self.elevation > MAX_ELEVATION)):
            raise ValidationError("elevation in {0,1,2}")
        flat = self.walls.ravel()
        for m in self.markers:
            if not 0 <= m < flat.size:
                raise ValidationError("marker inside grid", f"marker {m}")
            if flat[m]:
                raise ValidationError("marker on open cell", f"marker {m} is a wall")

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.walls, other.walls)
            and np.array_equal(self.elevation, other.elevation)
            and self.markers == other.markers
        )

    __hash__ = None

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}".encode())
        h.update(self.walls.tobytes())
        h.update(self.elevation.astype(np.int8).tobytes())
        h.update(json.dumps(self.markers).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class MovementGraph:
    """Directed movement graph over the open cells of a grid.

    Edges are sorted by source node, so the outgoing edges of node ``u`` are
    ``range(indptr[u], indptr[u + 1])``.  Each node's self-loop comes first in
    its block.  Parallel edges are permitted (path augmentation adds them).
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    traversal_time: np.ndarray
    indptr: np.ndarray
    node_cell: np.ndarray | None = None  # cell index of each node, or None
    width: int | None = None
    _reverse: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("src", "dst", "traversal_time", "indptr"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_edges(cls, n_nodes: int, edges, times=None, node_cell=None, width=None):
        """Build from an iterable of (src, dst) pairs; self-loops are added
        where missing and edges are re-sorted by source."""
        edges = [(int(u), int(v)) for u, v in edges]
        if times is None:
            times = [1.0] * len(edges)
        have_loop = {u for u, v in edges if u == v}
        for u in range(n_nodes):
            if u not in have_loop:
                edges.append((u, u))
                times = list(times) + [1.0]
        keyed = sorted(
            range(len(edges)),
            key=lambda i: (edges[i][0], edges[i][0] != edges[i][1], edges[i][1], i),
        )
        src = np.array([edges[i][0] for i in keyed], dtype=np.int64)
        dst = np.array([edges[i][1] for i in keyed], dtype=np.int64)
        tt = np.array([float(times[i]) for i in keyed])
        if np.any((src < 0) | (src >= n_nodes) | (dst < 0) | (dst >= n_nodes)):
            raise ValueError("edge endpoint out of range")
        if np.any(tt <= 0):
            raise ValueError("traversal times must be positive")
        indptr = np.searchsorted(src, np.arange(n_nodes + 1))
        return cls(n_nodes, src, dst, tt, indptr, node_cell, width)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def out_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def out_edges(self, u: int) -> range:
        return range(int(self.indptr[u]), int(self.indptr[u + 1]))

    @property
    def self_loops(self) -> np.ndarray:
        """Edge id of each node's (first) self-loop."""
        return self.indptr[:-1].copy()

    @property
    def reverse(self) -> np.ndarray:
        """Edge id of (dst, src) for every edge, or -1 when absent."""
        if self._reverse is None:
            lookup = {}
            for e, (u, v) in enumerate(zip(self.src.tolist(), self.dst.tolist())):
                lookup.setdefault((u, v), e)
            rev = np.array(
                [lookup.get((v, u), -1) for u, v in zip(self.src.tolist(), self.dst.tolist())],
                dtype=np.int64,
            )
            object.__setattr__(self, "_reverse", rev)
        return self._reverse

    def adjacency(self) -> csr_matrix:
        data = np.ones(self.n_edges)
        return csr_matrix((data, (self.src, self.dst)), shape=(self.n_nodes, self.n_nodes))

    def edge_index(self) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = {}
        for e, (u, v) in enumerate(zip(self.src.tolist(), self.dst.tolist())):
            out.setdefault((u, v), e)
        return out

    def node_of_cell(self, cell: int) -> int:
        if self.node_cell is None:
            return cell
        idx = np.searchsorted(self.node_cell, cell)
        if idx >= self.node_cell.size or self.node_cell[idx] != cell:
            raise KeyError(f"cell {cell} is not an open cell")
        return int(idx)

    def node_rc(self, node: int) -> tuple[int, int]:
        cell = int(self.node_cell[node])
        return divmod(cell, self.width)


@dataclass(frozen=True)
class ConnectivityReport:
    is_strong: bool
    components: list[frozenset[int]]


def build_movement_graph(grid: GridSpec) -> MovementGraph:
    """Derive the movement graph from a validated grid."""
    grid.validate()
    open_mask = ~grid.walls
    if not open_mask.any():
        raise AllWalls("grid has no open cells")
    h, w = grid.height, grid.width
    node_cell = np.flatnonzero(open_mask.ravel())
    cell_node = np.full(h * w, -1, dtype=np.int64)
    cell_node[node_cell] = np.arange(node_cell.size)
    elev = grid.elevation.astype(np.int64)

    srcs, dsts = [np.arange(node_cell.size)], [np.arange(node_cell.size)]
    rows, cols = np.divmod(node_cell, w)
    for dr, dc in NEIGHBOURS:
        r2, c2 = rows + dr, cols + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        r2c, c2c = np.where(ok, r2, 0), np.where(ok, c2, 0)
        ok &= open_mask[r2c, c2c]
        # descend or stay level freely; climb one level at a time
        ok &= elev[r2c, c2c] <= elev[rows, cols] + 1
        u = np.flatnonzero(ok)
        srcs.append(u)
        dsts.append(cell_node[r2c[ok] * w + c2c[ok]])
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    order = np.lexsort((dst, src != dst, src))
    src, dst = src[order], dst[order]
    indptr = np.searchsorted(src, np.arange(node_cell.size + 1))
    return MovementGraph(
        node_cell.size, src, dst, np.ones(src.size), indptr, node_cell, w
    )


def check_strong_connectivity(graph: MovementGraph) -> ConnectivityReport:
    if graph.n_nodes == 0:
        raise EmptyGrid("graph has no nodes")
    n_comp, labels = connected_components(graph.adjacency(), directed=True, connection="strong")
    comps = [frozenset(np.flatnonzero(labels == k).tolist()) for k in range(n_comp)]
    comps.sort(key=lambda c: (-len(c), min(c)))
    return ConnectivityReport(n_comp == 1, comps)


def validate_environment(grid: GridSpec) -> MovementGraph:
    """Full invariant check; returns the derived graph on success."""
    grid.validate()
    graph = build_movement_graph(grid)
    report = check_strong_connectivity(graph)
    if not report.is_strong:
        raise ValidationError(
            "movement graph strongly connected",
            f"{len(report.components)} strongly connected components",
        )
    return graph


# -- reference environments ---------------------------------------------------

def _smooth_field(rng, h, w, n_hills, sigma):
    base = np.zeros((h, w))
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(n_hills):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.6, 1.4) * sigma
        base += rng.uniform(0.5, 1.0) * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * s * s))
    return base


def _quantize(field, levels=3):
    qs = np.quantile(field, [0.45, 0.8])
    return np.digitize(field, qs).astype(np.int64).clip(0, levels - 1)


def _repair_cliffs(elev, walls, rng, grid_factory):
    """Raise cliff-foot cells one level until the movement graph is strongly
    connected.  Some one-way drops usually survive."""
    h, w = elev.shape
    while True:
        grid = grid_factory(elev)
        graph = build_movement_graph(grid)
        report = check_strong_connectivity(graph)
        if report.is_strong:
            return elev
        # cells in any component other than the one holding the most nodes
        stuck = np.zeros(h * w, dtype=bool)
        for comp in report.components[1:]:
            stuck[graph.node_cell[list(comp)]] = True
        stuck = stuck.reshape(h, w)
        cands = []
        for dr, dc in NEIGHBOURS:
            shifted = np.full((h, w), -1)
            src = elev[max(dr, 0):h + min(dr, 0), max(dc, 0):w + min(dc, 0)]
            shifted[max(-dr, 0):h + min(-dr, 0), max(-dc, 0):w + min(-dc, 0)] = np.where(
                walls[max(dr, 0):h + min(dr, 0), max(dc, 0):w + min(dc, 0)], -1, src
            )
            cands.append(shifted >= elev + 2)
        foot = np.logical_or.reduce(cands) & ~walls
        # prefer cliff feet touching the stuck region, fall back to any foot
        touching = foot & (ndimage.binary_dilation(stuck) | stuck)
        pool = np.flatnonzero(touching.ravel()) if touching.any() else np.flatnonzero(foot.ravel())
        if pool.size == 0:
            raise RuntimeError("cannot repair environment connectivity")
        pick = rng.choice(pool, size=max(1, pool.size // 8), replace=False)
        elev.ravel()[pick] += 1


def _small_env(rng) -> GridSpec:
    h = w = 36
    walls = np.zeros((h, w), dtype=bool)
    # long walls with door gaps forming occluding corridors
    for c in (9, 18, 27):
        walls[3:33, c] = True
        for g in rng.choice(np.arange(4, 31), size=2, replace=False):
            walls[g:g + 2, c] = False
    for r in (12, 24):
        walls[r, 1:16] = True
        walls[r, 21:35] = True
        for g in rng.choice(np.arange(2, 33), size=3, replace=False):
            walls[r, g:g + 2] = False
    for _ in range(6):
        r, c = rng.integers(1, h - 3), rng.integers(1, w - 3)
        walls[r:r + 2, c:c + 2] = True
    elev = _quantize(_smooth_field(rng, h, w, 7, 5.0))
    # mesas: level-2 blocks reached by one ramp cell, left by one-way drops
    low = np.argwhere(elev == 0)
    for _ in range(2):
        r, c = low[rng.integers(len(low))]
        r, c = int(np.clip(r, 2, h - 6)), int(np.clip(c, 2, w - 6))
        elev[r:r + 4, c:c + 4] = 2
        elev[r + 4, c + 1] = max(elev[r + 4, c + 1], 1)
    elev[walls] = 0

    # open a wall cell next to the smallest open region until all regions join
    while True:
        lab, n = ndimage.label(~walls)
        if n <= 1:
            break
        sizes = ndimage.sum(np.ones_like(lab), lab, index=range(1, n + 1))
        stray = int(np.argmin(sizes)) + 1
        rim = ndimage.binary_dilation(lab == stray) & walls
        bridge = rim & ndimage.binary_dilation((lab > 0) & (lab != stray))
        pool = np.flatnonzero((bridge if bridge.any() else rim).ravel())
        walls.ravel()[rng.choice(pool)] = False

    def factory(e):
        return GridSpec(w, h, walls, e)

    elev = _repair_cliffs(elev, walls, rng, factory)
    open_cells = np.flatnonzero(~walls.ravel())
    # one corner marker and one on high ground, plus two random open cells
    corner = min(open_cells, key=lambda k: sum(divmod(int(k), w)))
    markers = [int(corner)]
    high = open_cells[elev.ravel()[open_cells] == elev.max()]
    markers.append(int(high[len(high) // 2]))
    rest = np.setdiff1d(open_cells, markers)
    markers.extend(int(k) for k in rng.choice(rest, size=2, replace=False))
    return GridSpec(w, h, walls, elev, tuple(markers))


def smooth_open_env(size: int, seed: int, n_hills: int | None = None) -> GridSpec:
    """Wall-free grid whose neighbouring cells differ by at most one level, so
    every 4-neighbour edge is present."""
    rng = np.random.default_rng(seed)
    n_hills = n_hills or max(3, size // 8)
    field = _smooth_field(rng, size, size, n_hills, size / 8)
    elev = _quantize(field)
    # Lipschitz repair: cap every cell at (neighbour minimum + 1)
    while True:
        padded = np.pad(elev, 1, mode="edge")
        nmin = np.minimum.reduce([
            padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]
        ])
        capped = np.minimum(elev, nmin + 1)
        if np.array_equal(capped, elev):
            break
        elev = capped
    walls = np.zeros((size, size), dtype=bool)
    cells = np.arange(size * size)
    markers = tuple(int(k) for k in rng.choice(cells, size=4, replace=False))
    return GridSpec(size, size, walls, elev, markers)


def generate_reference_env(kind: EnvKind | str, seed: int) -> GridSpec:
    kind = EnvKind(kind)
    if kind is EnvKind.SMALL:
        return _small_env(np.random.default_rng(seed))
    return smooth_open_env(70, seed)


# -- persistence --------------------------------------------------------------

def grid_to_dict(grid: GridSpec) -> dict:
    cells = [
        {"kind": "wall", "elev": 0} if c.kind == CellKind.WALL else {"kind": "open", "elev": c.elevation}
        for c in grid.cells
    ]
    return {
        "version": ENV_VERSION,
        "width": grid.width,
        "height": grid.height,
        "cells": cells,
        "markers": list(grid.markers),
    }


def grid_from_dict(data: dict) -> GridSpec:
    if data.get("version") != ENV_VERSION:
        raise ValidationError("version tag", f"expected {ENV_VERSION!r}, got {data.get('version')!r}")
    try:
        width, height = int(data["width"]), int(data["height"])
        cells = [Cell(CellKind(c["kind"]), int(c.get("elev", 0))) for c in data["cells"]]
        markers = [int(m) for m in data.get("markers", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError("environment schema", str(exc)) from exc
    return GridSpec.from_cells(width, height, cells, markers)


def save_environment(grid: GridSpec, path) -> None:
    text = json.dumps(grid_to_dict(grid), separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_environment(path) -> GridSpec:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(data, dict):
        raise ParseError("top-level value must be an object", 1, 1)
    return grid_from_dict(data)
