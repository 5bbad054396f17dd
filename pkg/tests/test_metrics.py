import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boil.agents import StrategyConfig
from boil.environment import MovementGraph
from boil.metrics import (
    SupportMismatch, checkpoint_steps, convergence_series, read_csv_rows, spread,
    theorem1_bound_report, total_variation, visibility_histogram, write_bounds,
    write_histograms, write_markers, write_tv_series,
)
from boil.sampler import sample_edge_unconstrained
from boil.simulator import SimulationConfig, replay_edges, run_simulation

from conftest import toy_visibility


def pair_world():
    # edges (0,0) (0,1) (1,1) (1,0); each edge sees exactly its destination
    g = MovementGraph.from_edges(2, [(0, 1), (1, 0)])
    V = np.zeros((4, 2))
    V[np.arange(4), g.dst] = 1.0
    return g, toy_visibility(g, V)


def test_tv_examples():
    assert total_variation([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert total_variation([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert total_variation([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.25)


def test_tv_errors():
    with pytest.raises(SupportMismatch):
        total_variation([1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        total_variation([0.5, 0.6], [0.5, 0.5])


dists = st.integers(2, 12).flatmap(
    lambda k: st.tuples(*[st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k)] * 3))


def normalise(x):
    x = np.asarray(x) + 1e-3
    return x / x.sum()


@settings(max_examples=150, deadline=None)
@given(dists)
def test_tv_is_a_metric(triple):
    a, b, c = (normalise(x) for x in triple)
    ab = total_variation(a, b)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(total_variation(b, a))
    assert total_variation(a, a) == 0.0
    assert total_variation(a, c) <= ab + total_variation(b, c) + 1e-12


def test_checkpoints_strictly_increase():
    for total in (1, 2, 17, 100_000):
        steps = checkpoint_steps(total)
        assert steps[-1] == total
        assert np.all(np.diff(steps) > 0)
    lin = checkpoint_steps(100, stride=10, geometric=False)
    np.testing.assert_array_equal(lin, np.arange(10, 101, 10))


def test_point_mass_series_tends_to_limit():
    m = 40
    edges = np.zeros((500, 1), dtype=np.int64)
    s = convergence_series(edges, np.full(m, 1 / m))
    assert s.final == pytest.approx(1 - 1 / m)
    assert np.all(np.diff(s.steps) > 0)


def test_iid_series_converges(small_env, boil_small):
    _, graph, _ = small_env
    P = boil_small.edge_distribution(graph)
    P = P / P.sum()
    rng = np.random.default_rng(0)
    edges = sample_edge_unconstrained(P, rng, size=(100_000, 10))
    s = convergence_series(edges, P)
    # 10^6 pooled draws; the noise floor at 10^5 is still near 0.08 for ~5300 edges
    assert s.final < 0.05
    assert s.tv[0] > 0.9
    tv = dict(s.checkpoints)
    first_big = s.steps[s.steps >= 10_000][0]
    assert tv[first_big] > s.final


def test_single_spike_histogram():
    g, vis = pair_world()
    edges = np.tile([[0, 2]], (10, 1))  # agent 0 loops at 0, agent 1 at 1
    tr = replay_edges(g, vis, edges, visibility_mode="bernoulli")
    np.testing.assert_array_equal(tr.node_visibility_counts, [10, 10])
    h = visibility_histogram([tr], bins=5, value_range=(0, 20))
    np.testing.assert_array_equal(h.mean, [0, 0, 2, 0, 0])


def test_identical_runs_have_zero_band(small_env):
    grid, graph, vis = small_env
    cfg = SimulationConfig(2, 200, seed=1)
    a = run_simulation(grid, graph, vis, cfg)[0]
    b = run_simulation(grid, graph, vis, cfg)[0]
    h = visibility_histogram([a, b])
    np.testing.assert_array_equal(h.low, h.high)
    assert np.all(h.var == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 60), st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_histogram_mass_is_node_count(runs, steps, seed, bins):
    g, vis = pair_world()
    rng = np.random.default_rng(seed)
    traces = [replay_edges(g, vis, rng.integers(4, size=(steps, 2))) for _ in range(runs)]
    h = visibility_histogram(traces, bins=bins)
    np.testing.assert_array_equal(h.per_run.sum(axis=1), np.full(runs, g.n_nodes))


def test_spread():
    assert spread([1, 2, 3, 4, 5]) == pytest.approx(2 / 3)
    assert spread([0, 0, 0, 1]) == float("inf")


def test_hand_built_bounds():
    g, vis = pair_world()
    # agent A walks 0 ->0, 0->1, 1->1, 1->0; agent B loops, moves, loops
    edges = np.array([[0, 0], [1, 0], [2, 1], [3, 2]])
    tr = replay_edges(g, vis, edges, visibility_mode="bernoulli")
    # union per step: {0}, {0,1}, {1}, {0,1}
    np.testing.assert_array_equal(tr.node_visibility_counts, [3, 3])
    rep = theorem1_bound_report(tr, vis, min_expected=0)
    np.testing.assert_array_equal(rep.upper, [4, 4])
    np.testing.assert_array_equal(rep.lower, [2, 2])
    np.testing.assert_array_equal(rep.n_cross_term, [1, 1])
    # with 0/1 visibility the cross-term bound is tight here: 4 = 3 + 1
    np.testing.assert_array_equal(rep.upper, rep.observed + rep.n_cross_term)
    assert rep.n_violations == 0


def test_single_agent_bounds_coincide(small_env):
    grid, graph, vis = small_env
    (tr,) = run_simulation(grid, graph, vis, SimulationConfig(1, 2000, seed=3))
    rep = theorem1_bound_report(tr, vis)
    np.testing.assert_allclose(rep.lower, rep.upper)
    np.testing.assert_allclose(rep.expected, rep.upper)
    assert np.all(rep.n_cross_term == 0)
    assert rep.n_violations == 0


@pytest.mark.parametrize("kind", ["random", "frontier", "optrandom"])
def test_bounds_hold_on_simulations(small_env, kind):
    grid, graph, vis = small_env
    cfg = SimulationConfig(4, 2000, seed=5, strategy=StrategyConfig(kind))
    (tr,) = run_simulation(grid, graph, vis, cfg)
    rep = theorem1_bound_report(tr, vis)
    assert np.all(rep.lower <= rep.upper)
    assert rep.checked.sum() > 100
    assert rep.n_violations == 0


def test_bound_report_flags_tampering(small_env):
    grid, graph, vis = small_env
    (tr,) = run_simulation(grid, graph, vis, SimulationConfig(4, 2000, seed=6))
    tr.node_visibility_counts = tr.node_visibility_counts * 0.3
    assert theorem1_bound_report(tr, vis).n_violations > 0


def test_csv_writers(tmp_path, small_env):
    grid, graph, vis = small_env
    traces = run_simulation(grid, graph, vis, SimulationConfig(2, 100, runs=2, seed=7))
    target = np.full(graph.n_edges, 1 / graph.n_edges)
    write_tv_series(tmp_path / "tv.csv", {("random", t.run): convergence_series(t, target) for t in traces}, "m1")
    rows = read_csv_rows(tmp_path / "tv.csv")
    assert set(rows[0]) == {"step", "tv", "strategy", "run"}
    assert {r["run"] for r in rows} == {"0", "1"}
    write_histograms(tmp_path / "hist.csv", {"random": visibility_histogram(traces, bins=7)})
    assert len(read_csv_rows(tmp_path / "hist.csv")) == 7
    write_markers(tmp_path / "markers.csv", {"random": traces})
    rows = read_csv_rows(tmp_path / "markers.csv")
    assert len(rows) == len(grid.markers)
    assert set(rows[0]) == {"strategy", "marker", "mean", "var"}
    write_bounds(tmp_path / "bounds.csv", theorem1_bound_report(traces[0], vis))
    rows = read_csv_rows(tmp_path / "bounds.csv")
    assert len(rows) == graph.n_nodes
    assert all(float(r["lower"]) <= float(r["upper"]) for r in rows)
    assert (tmp_path / "tv.csv").read_text().startswith("# manifest=m1\n")
