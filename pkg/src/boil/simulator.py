"""Discrete-time multi-agent patrolling runs.

Every agent traverses one edge per step.  Visibility along the traversed edge
is realised per node as a Bernoulli draw with the edge's visibility value, or
counted in expectation when ``visibility_mode`` is ``"expectation"``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .agents import StrategyConfig, StrategyKind, Target, VectorPolicy
from .environment import GridSpec, MovementGraph
from .visibility import VisibilityMap

log = logging.getLogger(__name__)

SIM_VERSION = "sim/1"
BLOCK = 1024


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    n_agents: int
    steps: int
    runs: int = 1
    seed: int = 0
    strategy: StrategyConfig = field(default_factory=lambda: StrategyConfig(StrategyKind.RANDOM))
    # "uniform" or an explicit start node per agent
    initial_placement: str | tuple[int, ...] = "uniform"
    visibility_mode: str = "bernoulli"
    record_steps: bool = True

    def __post_init__(self):
        if self.n_agents < 1 or self.steps < 1 or self.runs < 1:
            raise ConfigError("agents, steps and runs must be positive")
        if isinstance(self.initial_placement, str):
            if self.initial_placement != "uniform":
                raise ConfigError(f"unknown placement {self.initial_placement!r}")
        else:
            object.__setattr__(self, "initial_placement", tuple(int(u) for u in self.initial_placement))
            if len(self.initial_placement) != self.n_agents:
                raise ConfigError("fixed placement needs one node per agent")
        if self.visibility_mode not in ("bernoulli", "expectation"):
            raise ConfigError(f"unknown visibility mode {self.visibility_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.to_dict()
        d["initial_placement"] = self.initial_placement if isinstance(self.initial_placement, str) else list(self.initial_placement)
        return {"version": SIM_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        if d.pop("version", None) != SIM_VERSION:
            raise ConfigError("unsupported simulation config version")
        d["strategy"] = StrategyConfig(**d["strategy"])
        if not isinstance(d.get("initial_placement", "uniform"), str):
            d["initial_placement"] = tuple(d["initial_placement"])
        return cls(**d)


def save_config(config: SimulationConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_config(path) -> SimulationConfig:
    return SimulationConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Trace:
    run: int
    n_agents: int
    steps: int
    strategy: str
    starts: np.ndarray
    edge_counts: np.ndarray
    # steps in which at least one agent saw the node (realised, or the
    # expected union in expectation mode)
    node_visibility_counts: np.ndarray
    per_agent_visibility_counts: np.ndarray
    # sum over steps of Y_t = 1 - prod_i (1 - X_t^i), of Y_t (1 - Y_t),
    # and of the pairwise products sum_{i<j} X_t^i X_t^j
    expected_union: np.ndarray
    union_variance: np.ndarray
    cross_term: np.ndarray
    marker_nodes: np.ndarray
    edges: np.ndarray | None = None  # (steps, n_agents) edge ids

    @property
    def marker_counts(self) -> np.ndarray:
        return self.node_visibility_counts[self.marker_nodes]


def agent_rng(seed: int, run: int, agent: int) -> np.random.Generator:
    """Stream for one agent in one run; independent of the team size."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run, agent)))


def marker_nodes(grid: GridSpec | None, graph: MovementGraph) -> np.ndarray:
    if grid is None or not len(grid.markers):
        return np.zeros(0, dtype=np.int64)
    return np.array([graph.node_of_cell(int(c)) for c in grid.markers], dtype=np.int64)


class _Accumulator:
    """Per-step visibility bookkeeping shared by simulation and replay."""

    def __init__(self, graph: MovementGraph, policy: VectorPolicy, n: int, expectation: bool):
        N = graph.n_nodes
        self.N, self.n, self.expectation = N, n, expectation
        self.nodes_of, self.vals_of = policy.supp_nodes, policy.supp_vals
        smax = self.nodes_of.shape[1]
        self.rows = np.broadcast_to(np.arange(n)[:, None], (n, smax))
        self.observed = np.zeros(N + 1)
        self.per_agent = np.zeros((n, N + 1))
        self.ey = np.zeros(N + 1)
        self.vy = np.zeros(N + 1)
        self.cross = np.zeros(N + 1)

    def add(self, e: np.ndarray, draws: np.ndarray | None) -> None:
        """``draws`` holds one U(0,1) per support slot and agent (Bernoulli mode)."""
        N1 = self.N + 1
        nodes = self.nodes_of[e]
        vals = self.vals_of[e]
        flat, fv = nodes.ravel(), vals.ravel()
        s1 = np.bincount(flat, fv, N1)
        s2 = np.bincount(flat, fv * fv, N1)
        with np.errstate(divide="ignore"):
            y = -np.expm1(np.bincount(flat, np.log1p(-fv), N1))
        self.ey += y
        self.vy += y * (1.0 - y)
        self.cross += 0.5 * (s1 * s1 - s2)
        if self.expectation:
            self.observed += y
            self.per_agent[self.rows, nodes] += vals
        else:
            seen = draws < vals
            self.per_agent[self.rows[seen], nodes[seen]] += 1.0
            self.observed += np.bincount(nodes[seen], minlength=N1) > 0

    def trace(self, graph, edges, run, strategy, starts, markers, keep_edges=True) -> Trace:
        N = self.N
        return Trace(
            run=run, n_agents=self.n, steps=int(edges.shape[0]), strategy=strategy, starts=starts,
            edge_counts=np.bincount(edges.ravel(), minlength=graph.n_edges),
            node_visibility_counts=self.observed[:N], per_agent_visibility_counts=self.per_agent[:, :N],
            expected_union=self.ey[:N], union_variance=self.vy[:N], cross_term=self.cross[:N],
            marker_nodes=markers, edges=edges if keep_edges else None,
        )


def _run_one(graph, vis, config: SimulationConfig, target, markers, run: int) -> Trace:
    n, T, N = config.n_agents, config.steps, graph.n_nodes
    policy = VectorPolicy(graph, vis, config.strategy, n, target)
    k = 2 + policy.supp_nodes.shape[1]
    rngs = [agent_rng(config.seed, run, i) for i in range(n)]
    if config.initial_placement == "uniform":
        cur = np.array([r.integers(N) for r in rngs], dtype=np.int64)
    else:
        cur = np.array(config.initial_placement, dtype=np.int64)
        if np.any((cur < 0) | (cur >= N)):
            raise ConfigError("placement node out of range")
    starts = cur.copy()
    C = policy.new_counts() if config.strategy.kind.uses_counts else None
    acc = _Accumulator(graph, policy, n, config.visibility_mode == "expectation")
    edges = np.empty((T, n), dtype=np.int64)
    U = None
    for t in range(T):
        if t % BLOCK == 0:
            U = np.stack([r.random((BLOCK, k)) for r in rngs], axis=1)
        u = U[t % BLOCK]
        e = policy.step(cur, u, C)
        edges[t] = e
        cur = graph.dst[e]
        acc.add(e, u[:, 2:])
        if C is not None:
            policy.update_counts(C, e)
    return acc.trace(graph, edges, run, config.strategy.kind.value, starts, markers, config.record_steps)


def replay_edges(graph: MovementGraph, vis: VisibilityMap, edges, visibility_mode: str = "expectation",
                 seed: int = 0, markers=None) -> Trace:
    """Build a trace from a given (steps x agents) array of edge ids."""
    edges = np.atleast_2d(np.asarray(edges, dtype=np.int64))
    T, n = edges.shape
    policy = VectorPolicy(graph, vis, StrategyConfig(StrategyKind.RANDOM), n)
    acc = _Accumulator(graph, policy, n, visibility_mode == "expectation")
    rng = np.random.default_rng(seed)
    for t in range(T):
        draws = None if acc.expectation else rng.random((n, policy.supp_nodes.shape[1]))
        acc.add(edges[t], draws)
    markers = np.zeros(0, dtype=np.int64) if markers is None else np.asarray(markers, dtype=np.int64)
    return acc.trace(graph, edges, 0, "replay", graph.src[edges[0]], markers)


def _run_star(args):
    return _run_one(*args)


def run_simulation(
    env: GridSpec | None,
    graph: MovementGraph,
    vis: VisibilityMap,
    config: SimulationConfig,
    dist: Target | None = None,
    jobs: int = 1,
) -> list[Trace]:
    """One trace per run; identical inputs give identical traces."""
    if config.strategy.kind.needs_distribution and dist is None:
        raise ConfigError(f"strategy {config.strategy.kind.value} needs a distribution")
    if not np.all(graph.traversal_time == 1.0):
        raise ConfigError("simulation needs unit traversal times")
    if vis.n_edges != graph.n_edges:
        raise ConfigError("visibility map does not match the graph")
    markers = marker_nodes(env, graph)
    work = [(graph, vis, config, dist, markers, r) for r in range(config.runs)]
    if jobs > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(_run_star, work))
    else:
        traces = [_run_one(*w) for w in work]
    log.info("simulated %d runs of %s", config.runs, config.strategy.kind.value)
    return traces


def empirical_edge_distribution(trace: Trace) -> np.ndarray:
    return trace.edge_counts / float(trace.n_agents * trace.steps)


# -- output ------------------------------------------------------------------------

def write_trace(trace: Trace, graph: MovementGraph, out_dir, manifest: str | None = None) -> list[Path]:
    """Per-step CSV plus node and marker summaries for one run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"run{trace.run:03d}"
    head = f"# manifest={manifest}\n" if manifest else ""
    paths = []
    if trace.edges is not None:
        T, n = trace.edges.shape
        e = trace.edges.ravel()
        rec = np.column_stack([np.repeat(np.arange(T), n), np.tile(np.arange(n), T), graph.src[e], graph.dst[e]])
        p = out_dir / f"trace_{tag}.csv"
        with open(p, "w", encoding="utf-8", newline="\n") as f:
            f.write(head + "step,agent,edge_src,edge_dst\n")
            np.savetxt(f, rec, fmt="%d", delimiter=",")
        paths.append(p)
    p = out_dir / f"nodes_{tag}.csv"
    with open(p, "w", encoding="utf-8", newline="\n") as f:
        f.write(head + "node,visibility_count\n")
        for w, c in enumerate(trace.node_visibility_counts.tolist()):
            f.write(f"{w},{c:.17g}\n")
    paths.append(p)
    p = out_dir / f"markers_{tag}.csv"
    with open(p, "w", encoding="utf-8", newline="\n") as f:
        f.write(head + "marker,count\n")
        for i, c in enumerate(trace.marker_counts.tolist()):
            f.write(f"{i},{c:.17g}\n")
    paths.append(p)
    return paths


def save_trace_npz(trace: Trace, path) -> None:
    """Lossless binary form used by the metrics command."""
    arrays = {k: v for k, v in trace.__dict__.items() if isinstance(v, np.ndarray)}
    meta = {k: v for k, v in trace.__dict__.items() if not isinstance(v, np.ndarray) and v is not None}
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_trace_npz(path) -> Trace:
    with np.load(path) as f:
        meta = json.loads(str(f["meta"]))
        arrays = {k: f[k] for k in f.files if k != "meta"}
    arrays.setdefault("edges", None)
    return Trace(**meta, **arrays)
