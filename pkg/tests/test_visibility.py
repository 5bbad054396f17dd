import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boil.environment import MovementGraph, build_movement_graph, smooth_open_env
from boil.visibility import (
    CacheMismatch, NonContiguousPath, OutOfBounds, VisibilityParams,
    build_visibility_map, cache_key, compose, edge_visibility, line_of_sight,
    load_visibility, path_visibility, save_visibility, supercover,
)

from conftest import grid_from_rows, toy_visibility

P = VisibilityParams()


def test_own_cell_always_visible():
    grid = grid_from_rows(["000", "000"])
    assert line_of_sight(grid, (1.0, 1.0), (1, 1), P)
    assert line_of_sight(grid, (1.0, 1.0), (1, 1), P, heading=(1, 0))


def test_beyond_radius():
    grid = grid_from_rows(["000000"])
    assert not line_of_sight(grid, (0.0, 0.0), (0, 5), P)
    assert line_of_sight(grid, (0.0, 0.0), (0, 3), P)


def test_ridge_blocks_low_observer_only():
    grid = grid_from_rows(["020"])
    assert not line_of_sight(grid, (0.0, 0.0), (0, 2), P)
    assert line_of_sight(grid, (0.0, 0.0), (0, 2), P, observer_elevation=2)


def test_wall_blocks():
    grid = grid_from_rows(["0#0"])
    assert not line_of_sight(grid, (0.0, 0.0), (0, 2), P)
    assert not line_of_sight(grid, (0.0, 0.0), (0, 1), P)


def test_forward_half_plane():
    grid = grid_from_rows(["00000"])
    assert not line_of_sight(grid, (2.0, 0.0), (0, 0), P, heading=(1, 0))
    assert line_of_sight(grid, (2.0, 0.0), (0, 4), P, heading=(1, 0))
    omni = VisibilityParams(fov="omni")
    assert line_of_sight(grid, (2.0, 0.0), (0, 0), omni, heading=(1, 0))


def test_observer_errors():
    grid = grid_from_rows(["0#"])
    with pytest.raises(OutOfBounds):
        line_of_sight(grid, (5.0, 0.0), (0, 0), P)
    with pytest.raises(OutOfBounds):
        line_of_sight(grid, (1.0, 0.0), (0, 0), P)


def test_supercover_includes_corner_cells():
    cells = set(supercover(0.0, 0.0, 1.0, 1.0))
    assert {(0, 0), (1, 1), (0, 1), (1, 0)} <= cells


def test_edge_visibility_values():
    grid = grid_from_rows(["000000"])
    g = build_movement_graph(grid)
    row = edge_visibility(grid, g, (0, 1), P)
    # samples at x = 0.125 .. 0.875; node 4 enters the radius halfway along
    assert row[1] == 1.0 and row[3] == 1.0
    assert row[4] == 0.5
    assert 5 not in row
    # moving right never sees the cell behind the start
    back = edge_visibility(grid, g, (1, 2), P)
    assert 0 not in back


def test_wall_occludes_fully():
    grid = grid_from_rows(["00#00"])
    g = build_movement_graph(grid)
    row = edge_visibility(grid, g, (0, 1), P)
    # the start cell is behind the heading; the cells past the wall are hidden
    assert set(row) == {1}


def test_map_matches_per_edge_oracle(small_env):
    grid, graph, vis = small_env
    rng = np.random.default_rng(0)
    for e in rng.choice(graph.n_edges, size=60, replace=False):
        u, v = int(graph.src[e]), int(graph.dst[e])
        expect = edge_visibility(grid, graph, (u, v), P)
        got = vis.row(int(e))
        assert set(got) == set(expect)
        for w, val in expect.items():
            assert got[w] == pytest.approx(val, abs=1e-12)


def test_map_values_in_unit_interval(small_env):
    _, graph, vis = small_env
    assert vis.matrix.shape == (graph.n_edges, graph.n_nodes)
    assert vis.matrix.data.min() > 0 and vis.matrix.data.max() <= 1.0
    assert np.all(vis.support_sizes() >= 1)


def pair_map(values):
    """Two-node flat graph; edges ordered (0,0), (0,1), (1,1), (1,0)."""
    g = MovementGraph.from_edges(2, [(0, 0), (0, 1), (1, 0), (1, 1)])
    vals = np.zeros((4, 2))
    vals[:, 0] = values
    return toy_visibility(g, vals)


def test_single_edge_path_is_identity():
    vis = pair_map([1.0, 0.5, 0.0, 0.25])
    assert path_visibility(vis, [1]) == vis.row(1)


def test_two_unit_edges_average():
    vis = pair_map([0.0, 1.0, 0.0, 0.0])
    # edge 0->1 sees node 0 fully, edge 1->0 does not
    assert path_visibility(vis, [1, 3])[0] == pytest.approx(0.5)


def test_three_edge_weighted_path():
    vis = pair_map([1.0, 0.5, 0.25, 0.0])
    # self-loop, 0->1, 1->0 with times (1, 2, 1): (1 + 2 * 0.5 + 0) / 4
    assert path_visibility(vis, [0, 1, 3], times=[1, 2, 1])[0] == pytest.approx(0.5)


def test_path_errors():
    vis = pair_map([1.0, 0.5, 0.0, 0.25])
    with pytest.raises(NonContiguousPath):
        path_visibility(vis, [0, 2])
    with pytest.raises(NonContiguousPath):
        path_visibility(vis, [])
    with pytest.raises(ValueError):
        path_visibility(vis, [0, 1], times=[1])


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(0, 9), st.floats(0, 1), max_size=6),
       st.dictionaries(st.integers(0, 9), st.floats(0, 1), max_size=6),
       st.floats(0.1, 5), st.floats(0.1, 5))
def test_compose_is_time_weighted_mean(a, b, ta, tb):
    out = compose(a, ta, b, tb)
    for w in set(a) | set(b):
        expect = (ta * a.get(w, 0) + tb * b.get(w, 0)) / (ta + tb)
        assert out[w] == pytest.approx(expect)
        assert -1e-12 <= out[w] <= 1 + 1e-12


def test_compose_associative_with_path_visibility(small_env):
    _, graph, vis = small_env
    rng = np.random.default_rng(1)
    u = 0
    path = []
    for _ in range(5):
        e = int(rng.integers(graph.indptr[u], graph.indptr[u + 1]))
        path.append(e)
        u = int(graph.dst[e])
    acc, t = vis.row(path[0]), 1.0
    for e in path[1:]:
        acc, t = compose(acc, t, vis.row(e), 1.0), t + 1.0
    direct = path_visibility(vis, path)
    assert set(k for k, v in acc.items() if v > 0) == set(direct)
    for w, v in direct.items():
        assert acc[w] == pytest.approx(v, abs=1e-12)


def test_expected_visibility_linear(small_env):
    _, graph, vis = small_env
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(graph.n_edges))
    A = vis.expected_visibility(P)
    assert A.shape == (graph.n_nodes,)
    assert np.allclose(A, vis.matrix.toarray().T @ P)


def test_cache_round_trip(tmp_path):
    grid = smooth_open_env(8, 0)
    graph = build_movement_graph(grid)
    vis = build_visibility_map(grid, graph)
    key = cache_key(grid, P)
    save_visibility(vis, tmp_path / "v.npz", key)
    assert load_visibility(tmp_path / "v.npz", key) == vis
    with pytest.raises(CacheMismatch):
        load_visibility(tmp_path / "v.npz", cache_key(grid, VisibilityParams(radius=2.0)))


def test_padded_layout(small_env):
    _, graph, vis = small_env
    nodes, vals = vis.padded()
    assert nodes.shape == vals.shape
    assert nodes.shape[0] == graph.n_edges
    np.testing.assert_allclose(vals.sum(axis=1), np.asarray(vis.matrix.sum(axis=1)).ravel())
