"""Command-line pipeline: environments, optimisation, simulation, metrics.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, markov
from .agents import StrategyConfig, StrategyKind, Target
from .augment import augment_with_paths, back_project
from .environment import (
    EnvironmentError_, ParseError, ValidationError,
    generate_reference_env, load_environment, save_environment, validate_environment,
)
from .metrics import (
    convergence_series, theorem1_bound_report, visibility_histogram,
    write_bounds, write_histograms, write_markers, write_tv_series,
)
from .optimizer import (
    LossKind, LossSpec, NonFiniteLoss, OptimizerConfig, SplitConfig,
    boil_optimize, reachability_map, split_optimize,
)
from .simulator import (
    ConfigError, SimulationConfig, load_trace_npz, run_simulation, save_config,
    save_trace_npz, write_trace,
)
from .visibility import (
    CacheMismatch, NonContiguousPath, VisibilityParams, build_visibility_map,
    cache_key, load_visibility, save_visibility,
)

log = logging.getLogger("boil")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_VERSION = "manifest/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    env_hash: str | None = None
    vis_params: dict | None = None
    optimizer: dict | None = None
    simulation: dict | None = None
    code_version: str = __version__
    seeds: list[int] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"version": MANIFEST_VERSION, **asdict(self)}

    @property
    def ident(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def write(self, path) -> str:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return self.ident


# -- shared helpers ----------------------------------------------------------------------

def _cache_path(env_path: Path, key: str) -> Path:
    root = os.environ.get("BOIL_CACHE_DIR")
    base = Path(root) if root else env_path.parent
    base.mkdir(parents=True, exist_ok=True)
    return base / f"{env_path.name}.vis-{key}.npz"


def load_world(env_path, no_cache: bool = False, params: VisibilityParams | None = None):
    """Environment, movement graph and (cached) visibility map."""
    env_path = Path(env_path)
    grid = load_environment(env_path)
    graph = validate_environment(grid)
    params = params or VisibilityParams()
    key = cache_key(grid, params)
    path = _cache_path(env_path, key)
    vis = None
    if path.exists() and not no_cache:
        try:
            vis = load_visibility(path, key)
        except (CacheMismatch, OSError, ValueError, KeyError) as exc:
            log.warning("ignoring visibility cache %s: %s", path, exc)
    if vis is None:
        vis = build_visibility_map(grid, graph, params)
        save_visibility(vis, path, key)
    return grid, graph, vis, params


def _parse_nodes(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise UsageError(f"bad node list {text!r}") from exc


def _write_loss_trace(path, trace, accepted, manifest_id) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# manifest={manifest_id}\niteration,loss,accepted_best\n")
        for i, (v, a) in enumerate(zip(trace, accepted)):
            f.write(f"{i},{v!r},{int(a)}\n")


# -- commands ------------------------------------------------------------------------------

def cmd_env(args) -> int:
    if args.env_cmd == "generate":
        grid = generate_reference_env(args.kind, args.seed)
        validate_environment(grid)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_environment(grid, args.out)
        print(f"wrote {args.out} ({grid.width}x{grid.height}, hash {grid.content_hash()[:12]})")
        return EXIT_OK
    grid = load_environment(args.path)
    graph = validate_environment(grid)
    print(f"ok: {grid.width}x{grid.height}, {graph.n_nodes} nodes, {graph.n_edges} edges, strongly connected")
    return EXIT_OK


def cmd_optimize(args) -> int:
    grid, graph, vis, params = load_world(args.env, args.no_cache)
    kind = LossKind(args.loss)
    patrol = None
    if kind is LossKind.PATROLLING:
        if not args.patrol_nodes:
            raise UsageError("--patrol-nodes is required for the patrolling loss")
        patrol = _parse_nodes(args.patrol_nodes)
    target_vis = reachability_map(graph, args.horizon) if kind is LossKind.REACHABILITY else vis

    work_graph, work_vis, augmented = graph, target_vis, None
    if args.augment_paths:
        paths = json.loads(Path(args.augment_paths).read_text(encoding="utf-8"))
        augmented, work_vis = augment_with_paths(graph, target_vis, paths)
        work_graph = augmented.graph
    loss = LossSpec(kind, work_vis, tuple(patrol) if patrol else None)
    config = OptimizerConfig(step_size=args.mu, num_steps=args.steps, perturbation_radius=args.tau,
                             seed=args.seed, oracle_sweeps=args.oracle_sweeps)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    opt = {k: v for k, v in asdict(config).items()}
    opt.update(loss=kind.value, patrol_nodes=patrol, horizon=args.horizon if kind is LossKind.REACHABILITY else None,
               split_p=args.split_p, split_lambda=args.split_lambda, augment_paths=args.augment_paths)
    outputs = [str(out), str(trace_path)]
    if args.split_p is not None:
        outputs += [str(out.with_suffix(".hat.json")), str(out.with_suffix(".bar.json"))]
    manifest = RunManifest("optimize", grid.content_hash(), params.to_dict(), opt, None,
                           seeds=[args.seed], outputs=outputs)
    mid = manifest.write(out.with_suffix(".manifest.json"))

    meta = {"manifest": mid, "loss_kind": kind.value, "iterations": args.steps, "seed": args.seed,
            "env_hash": grid.content_hash()}
    if args.split_p is not None:
        split = SplitConfig(args.split_p, args.split_lambda)
        res = split_optimize(work_graph, loss, config, split)
        P_hat, P_bar = res.P_hat, res.P_bar
        if augmented is not None:
            P_hat, P_bar = back_project(augmented, P_hat), back_project(augmented, P_bar)
        for suffix, P in ((".hat.json", P_hat), (".bar.json", P_bar)):
            pi, p = markov.decompose_edge_distribution(P, graph)
            markov.write_distribution(out.with_suffix(suffix), graph, p, pi, meta)
        P = split.fraction * P_hat + (1 - split.fraction) * P_bar
        trace, accepted, value = res.loss_trace, res.accepted, res.loss
    else:
        res = boil_optimize(work_graph, loss, config)
        P = res.edge_distribution(work_graph)
        if augmented is not None:
            P = back_project(augmented, P)
        trace, accepted, value = res.loss_trace, res.accepted, res.loss
    pi, p = markov.decompose_edge_distribution(P, graph)
    markov.write_distribution(out, graph, p, pi, {**meta, "loss": value})
    _write_loss_trace(trace_path, trace, accepted, mid)
    print(f"loss {trace[0]:.6g} -> {value:.6g}; wrote {out}")
    return EXIT_OK


def _load_target(path, graph) -> Target:
    d = markov.read_distribution(path, graph)
    return Target.from_transitions(graph, d.p_transition, d.pi)


def cmd_simulate(args) -> int:
    kind = StrategyKind(args.strategy)
    if kind.needs_distribution and not args.dist:
        raise UsageError(f"strategy {kind.value} needs --dist")
    grid, graph, vis, params = load_world(args.env, args.no_cache)
    target = _load_target(args.dist, graph) if args.dist else None
    strategy = StrategyConfig(kind, lam=args.lam, distribution=args.dist)
    config = SimulationConfig(args.agents, args.steps, args.runs, args.seed, strategy,
                              visibility_mode=args.visibility)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for r in range(args.runs):
        names += [f"trace_run{r:03d}.csv", f"nodes_run{r:03d}.csv", f"markers_run{r:03d}.csv", f"trace_run{r:03d}.npz"]
    manifest = RunManifest("simulate", grid.content_hash(), params.to_dict(), None, config.to_dict(),
                           seeds=[args.seed], outputs=[str(out / n) for n in names])
    mid = manifest.write(out / "manifest.json")
    save_config(config, out / "sim.json")
    (out / "env.json").write_text(json.dumps({"env": os.path.relpath(Path(args.env).resolve(), out.resolve())}, sort_keys=True) + "\n",
                                  encoding="utf-8")
    traces = run_simulation(grid, graph, vis, config, target, jobs=args.jobs)
    for tr in traces:
        write_trace(tr, graph, out, mid)
        save_trace_npz(tr, out / f"trace_run{tr.run:03d}.npz")
    print(f"wrote {len(traces)} runs to {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_strategy: dict[str, list] = {}
    env_path = args.env
    for d in args.traces:
        d = Path(d)
        files = sorted(d.glob("trace_run*.npz"))
        if not files:
            raise ConfigError(f"no traces in {d}")
        for f in files:
            tr = load_trace_npz(f)
            by_strategy.setdefault(tr.strategy, []).append(tr)
        if env_path is None and (d / "env.json").exists():
            env_path = d / json.loads((d / "env.json").read_text(encoding="utf-8"))["env"]
    if env_path is None:
        raise UsageError("cannot locate the environment; pass --env")
    grid, graph, vis, params = load_world(env_path, args.no_cache)

    manifest = RunManifest("metrics", grid.content_hash(), params.to_dict(),
                           outputs=[str(out / f"{args.report}.csv")])
    manifest.simulation = {"traces": [str(Path(t)) for t in args.traces], "report": args.report, "dist": args.dist}
    mid = manifest.write(out / f"{args.report}.manifest.json")
    report = args.report
    if report == "tv":
        if not args.dist:
            raise UsageError("--dist is required for the tv report")
        target = markov.read_distribution(args.dist, graph).p_edge
        target = target / target.sum()
        series = {(s, t.run): convergence_series(t, target) for s, ts in by_strategy.items() for t in ts}
        write_tv_series(out / "tv_series.csv", series, mid)
    elif report == "hist":
        hi = max(float(t.node_visibility_counts.max()) for ts in by_strategy.values() for t in ts)
        hists = {s: visibility_histogram(ts, args.bins, (0.0, hi or 1.0)) for s, ts in by_strategy.items()}
        write_histograms(out / "hist.csv", hists, mid)
    elif report == "markers":
        write_markers(out / "markers.csv", by_strategy, mid)
    else:
        s, ts = sorted(by_strategy.items())[0]
        rep = theorem1_bound_report(ts[0], vis)
        write_bounds(out / "bounds.csv", rep, mid)
        print(f"{rep.n_violations} bound violations over {int(rep.checked.sum())} checked nodes")
        if rep.n_violations:
            return EXIT_INVALID
    print(f"wrote {report} report to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boil", description="Learn and evaluate patrolling edge distributions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    env = sub.add_parser("env", help="generate or validate environments")
    esub = env.add_subparsers(dest="env_cmd", required=True, parser_class=_Parser)
    gen = esub.add_parser("generate")
    gen.add_argument("--kind", choices=["small", "large"], required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    val = esub.add_parser("validate")
    val.add_argument("path")

    opt = sub.add_parser("optimize", help="learn a transition vector")
    opt.add_argument("--env", required=True)
    opt.add_argument("--loss", choices=[k.value for k in LossKind], default="coverage")
    opt.add_argument("--patrol-nodes")
    opt.add_argument("--horizon", type=float, default=10.0, help="reachability horizon in steps")
    opt.add_argument("--mu", type=float, default=0.1)
    opt.add_argument("--steps", type=int, default=5000)
    opt.add_argument("--tau", type=float, default=0.05)
    opt.add_argument("--seed", type=int, required=True)
    opt.add_argument("--oracle-sweeps", type=int, default=None,
                     help="power sweeps per stationary evaluation (default: exact solve)")
    opt.add_argument("--split-p", type=float, default=None)
    opt.add_argument("--lambda", dest="split_lambda", type=float, default=1.0)
    opt.add_argument("--augment-paths")
    opt.add_argument("--out", required=True)
    opt.add_argument("--trace")
    opt.add_argument("--no-cache", action="store_true")

    sim = sub.add_parser("simulate", help="run patrolling agents")
    sim.add_argument("--env", required=True)
    sim.add_argument("--strategy", choices=[k.value for k in StrategyKind], required=True)
    sim.add_argument("--agents", type=int, default=8)
    sim.add_argument("--steps", type=int, default=100_000)
    sim.add_argument("--runs", type=int, default=10)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--dist")
    sim.add_argument("--lambda", dest="lam", type=float, default=10.0)
    sim.add_argument("--visibility", choices=["bernoulli", "expectation"], default="bernoulli")
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out", required=True)
    sim.add_argument("--no-cache", action="store_true")

    met = sub.add_parser("metrics", help="evaluate traces")
    met.add_argument("--traces", action="append", required=True)
    met.add_argument("--dist")
    met.add_argument("--env")
    met.add_argument("--report", choices=["tv", "hist", "markers", "bounds"], required=True)
    met.add_argument("--bins", type=int, default=50)
    met.add_argument("--out", required=True)
    met.add_argument("--no-cache", action="store_true")
    return p


COMMANDS = {"env": cmd_env, "optimize": cmd_optimize, "simulate": cmd_simulate, "metrics": cmd_metrics}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(f"boil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"boil: invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, EnvironmentError_, ConfigError, CacheMismatch, NonContiguousPath,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(f"boil: invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (markov.NotConverged, NonFiniteLoss, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"boil: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
