"""Evaluation of simulated traces: distances, convergence, histograms and
the union-visibility sandwich bounds."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulator import Trace
from .visibility import VisibilityMap


class SupportMismatch(ValueError):
    pass


def total_variation(mu, nu, tol: float = 1e-9) -> float:
    """Half the L1 distance between two distributions on the same index set."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != nu.shape:
        raise SupportMismatch(f"supports differ: {mu.shape} vs {nu.shape}")
    for name, d in (("first", mu), ("second", nu)):
        if abs(d.sum() - 1.0) > tol or np.any(d < 0):
            raise ValueError(f"{name} argument is not a probability distribution")
    return float(min(1.0, 0.5 * np.abs(mu - nu).sum()))


@dataclass(frozen=True)
class ConvergenceSeries:
    checkpoints: list[tuple[int, float]]

    @property
    def steps(self) -> np.ndarray:
        return np.array([s for s, _ in self.checkpoints])

    @property
    def tv(self) -> np.ndarray:
        return np.array([v for _, v in self.checkpoints])

    @property
    def final(self) -> float:
        return self.checkpoints[-1][1]


def checkpoint_steps(total: int, stride: float = 1.1, geometric: bool = True) -> np.ndarray:
    """Strictly increasing checkpoints ending at ``total``."""
    if geometric:
        if stride <= 1:
            raise ValueError("geometric stride must exceed 1")
        out, t = [], 1
        while t < total:
            out.append(t)
            t = max(t + 1, int(np.ceil(t * stride)))
    else:
        out = list(range(int(stride), total, int(stride)))
    out.append(total)
    return np.array(out, dtype=np.int64)


def convergence_series(trace_prefixes, target, checkpoint_stride: float = 1.1, geometric: bool = True) -> ConvergenceSeries:
    """TV between the empirical edge distribution of the first t steps (all
    agents pooled) and ``target``, at each checkpoint t."""
    edges = trace_prefixes.edges if isinstance(trace_prefixes, Trace) else trace_prefixes
    if edges is None:
        raise ValueError("trace has no per-step record")
    edges = np.atleast_2d(np.asarray(edges))
    if edges.shape[0] == 1 and not isinstance(trace_prefixes, Trace) and np.ndim(trace_prefixes) == 1:
        edges = edges.T
    target = np.asarray(target, dtype=float)
    T, n = edges.shape
    counts = np.zeros(target.size)
    prev = 0
    out = []
    for t in checkpoint_steps(T, checkpoint_stride, geometric):
        counts += np.bincount(edges[prev:t].ravel(), minlength=target.size)
        prev = t
        out.append((int(t), total_variation(counts / (t * n), target)))
    return ConvergenceSeries(out)


@dataclass(frozen=True)
class VisibilityHistogram:
    bin_edges: np.ndarray
    per_run: np.ndarray  # (runs, bins) node counts

    @property
    def mean(self) -> np.ndarray:
        return self.per_run.mean(axis=0)

    @property
    def var(self) -> np.ndarray:
        return self.per_run.var(axis=0)

    @property
    def low(self) -> np.ndarray:
        return self.per_run.min(axis=0)

    @property
    def high(self) -> np.ndarray:
        return self.per_run.max(axis=0)


def visibility_histogram(traces: list[Trace], bins: int = 50, value_range=None) -> VisibilityHistogram:
    """Histogram of per-node visibility counts, one row per run, shared bins."""
    values = [np.asarray(t.node_visibility_counts, dtype=float) for t in traces]
    if value_range is None:
        hi = max(float(v.max()) for v in values)
        value_range = (0.0, hi if hi > 0 else 1.0)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    per_run = np.array([np.histogram(v, bins=edges)[0] for v in values])
    return VisibilityHistogram(edges, per_run)


def spread(counts) -> float:
    """Interquartile range over median."""
    q1, med, q3 = np.percentile(np.asarray(counts, dtype=float), [25, 50, 75])
    return float((q3 - q1) / med) if med > 0 else float("inf")


@dataclass(frozen=True)
class BoundReport:
    lower: np.ndarray
    observed: np.ndarray
    upper: np.ndarray
    n_cross_term: np.ndarray
    expected: np.ndarray  # expected union count given the trajectories
    sigma: np.ndarray
    checked: np.ndarray  # nodes with enough expected visits to judge
    violations: np.ndarray  # checked nodes failing any inequality

    @property
    def n_violations(self) -> int:
        return int(self.violations.sum())


def theorem1_bound_report(trace: Trace, vis: VisibilityMap, sigmas: float = 4.0, min_expected: float = 10.0) -> BoundReport:
    """Per-node sandwich of the union visibility count.

    With S(w) = sum_e count(e) V(e)(w), the summed per-agent expected
    visibility, the union count lies between S/n and S, and S is at most the
    union plus the pairwise co-visibility term.  Observed counts are judged
    against these with a ``sigmas``-wide binomial band.
    """
    S = np.asarray(vis.matrix.T @ trace.edge_counts.astype(float)).ravel()
    lower = S / trace.n_agents
    upper = S
    obs = np.asarray(trace.node_visibility_counts, dtype=float)
    sigma = np.sqrt(np.maximum(trace.union_variance, 0.0))
    slack = sigmas * sigma + 1e-9 * np.maximum(1.0, upper)
    checked = trace.expected_union >= min_expected
    bad = (obs < lower - slack) | (obs > upper + slack) | (S > obs + trace.cross_term + slack)
    return BoundReport(lower, obs, upper, trace.cross_term.copy(), trace.expected_union.copy(),
                       sigma, checked, bad & checked)


# -- CSV output -------------------------------------------------------------------

def _writer(path, header, manifest=None):
    f = open(path, "w", encoding="utf-8", newline="")
    if manifest:
        f.write(f"# manifest={manifest}\n")
    w = csv.writer(f, lineterminator="\n")
    w.writerow(header)
    return f, w


def write_tv_series(path, series: dict[tuple[str, int], ConvergenceSeries], manifest=None) -> None:
    f, w = _writer(path, ["step", "tv", "strategy", "run"], manifest)
    with f:
        for (strategy, run), s in sorted(series.items()):
            for step, tv in s.checkpoints:
                w.writerow([step, repr(tv), strategy, run])


def write_histograms(path, hists: dict[str, VisibilityHistogram], manifest=None) -> None:
    f, w = _writer(path, ["strategy", "bin_lo", "bin_hi", "mean", "min", "max"], manifest)
    with f:
        for strategy, h in sorted(hists.items()):
            for i in range(h.per_run.shape[1]):
                w.writerow([strategy, repr(float(h.bin_edges[i])), repr(float(h.bin_edges[i + 1])),
                            repr(float(h.mean[i])), int(h.low[i]), int(h.high[i])])


def write_markers(path, traces: dict[str, list[Trace]], manifest=None) -> None:
    f, w = _writer(path, ["strategy", "marker", "mean", "var"], manifest)
    with f:
        for strategy, ts in sorted(traces.items()):
            counts = np.array([t.marker_counts for t in ts], dtype=float)
            for i in range(counts.shape[1]):
                w.writerow([strategy, i, repr(float(counts[:, i].mean())), repr(float(counts[:, i].var()))])


def write_bounds(path, report: BoundReport, manifest=None) -> None:
    f, w = _writer(path, ["node", "lower", "observed", "upper"], manifest)
    with f:
        for i, (lo, ob, up) in enumerate(zip(report.lower, report.observed, report.upper)):
            w.writerow([i, repr(float(lo)), repr(float(ob)), repr(float(up))])


def read_csv_rows(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


__all__ = [
    "SupportMismatch", "total_variation", "ConvergenceSeries", "checkpoint_steps", "convergence_series",
    "VisibilityHistogram", "visibility_histogram", "spread", "BoundReport", "theorem1_bound_report",
    "write_tv_series", "write_histograms", "write_markers", "write_bounds", "read_csv_rows",
]
