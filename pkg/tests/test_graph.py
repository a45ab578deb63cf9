import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetgcn.graph import (
    GraphBatch,
    GraphConfig,
    GraphConfigError,
    assemble_dynamic_graph,
    build_agent_agent_edges,
    build_lane_agent_edges,
    build_lane_graph,
    dfs_depth,
    dfs_reachable,
    graph_to_dict,
    slice_snapshots,
)
from hetgcn.scenario import (
    AgentTrack,
    LanePolyline,
    Scenario,
    State,
    SyntheticSpec,
    generate_synthetic_scenario,
    normalize_scenario,
)


# ---------------------------------------------------------------- oracles


def reachable_by_path_enumeration(succ, sources, max_depth):
    """Every node at the end of some simple path of at most ``max_depth`` edges."""
    found = set()

    def walk(path):
        found.add(path[-1])
        if len(path) - 1 == max_depth:
            return
        for nxt in succ[path[-1]]:
            if nxt not in path:
                walk(path + [nxt])

    for s in sources:
        walk([s])
    return sorted(found)


def naive_agent_agent(coords, delta):
    out = []
    for i in range(len(coords)):
        for j in range(len(coords)):
            if i != j and abs(coords[i][0] - coords[j][0]) + abs(coords[i][1] - coords[j][1]) < delta:
                out.append([i, j])
    return out


def random_digraph(rng, n, p):
    return [[j for j in range(n) if j != i and rng.random() < p] for i in range(n)]


# ---------------------------------------------------------------- lane graph


def lane(id_, pts, succ=(), inter=False):
    return LanePolyline(id_, tuple(map(tuple, pts)), tuple(succ), inter)


def test_straight_lane_two_nodes():
    g = build_lane_graph([lane("a", [(0, 0), (10, 0)])], 5.0)
    assert g.n_nodes == 2
    assert g.edges.tolist() == [[0, 1]]
    np.testing.assert_array_equal(g.node_dirs, [[1, 0], [1, 0]])
    np.testing.assert_array_equal(g.raw_features, [[2.5, 0, 5, 0], [7.5, 0, 5, 0]])


def test_successor_links_last_to_first():
    g = build_lane_graph([lane("A", [(0, 0), (10, 0)], ["B"]), lane("B", [(10, 0), (20, 0)])], 5.0)
    assert [1, 2] in g.edges.tolist()
    assert g.edges.tolist() == [[0, 1], [2, 3], [1, 2]]
    assert g.avg_gap == pytest.approx(5.0)


def test_y_split_out_degree_two():
    g = build_lane_graph([
        lane("A", [(0, 0), (10, 0)], ["L", "R"]),
        lane("L", [(10, 0), (15, 5)]),
        lane("R", [(10, 0), (15, -5)]),
    ], 5.0)
    last_of_a = 1
    assert sorted(b for a, b in g.edges.tolist() if a == last_of_a) == [2, 3]
    np.testing.assert_allclose(np.linalg.norm(g.node_dirs, axis=1), 1.0)


def test_empty_lane_list_rejected():
    with pytest.raises(GraphConfigError):
        build_lane_graph([], 5.0)


# ---------------------------------------------------------------- dfs


def test_dfs_chain():
    assert dfs_reachable([[1], [2], [3], []], {0}, 2) == [0, 1, 2]


def test_dfs_cycle_terminates():
    assert dfs_reachable([[1], [0]], {0}, 10) == [0, 1]


def test_dfs_uses_minimum_depth():
    # 0 -> 1 -> 2 -> 3 and a shortcut 0 -> 2; depth 2 must reach 3 via the shortcut
    succ = [[1, 2], [2], [3], []]
    assert dfs_reachable(succ, [0], 2) == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(20))
def test_dfs_matches_enumeration_on_random_graphs(seed):
    rng = np.random.default_rng(seed)
    succ = random_digraph(rng, int(rng.integers(5, 31)), 0.08)
    sources = rng.choice(len(succ), size=int(rng.integers(1, 4)), replace=False)
    depth = int(rng.integers(0, 6))
    assert dfs_reachable(succ, sources, depth) == reachable_by_path_enumeration(succ, sources, depth)


# ---------------------------------------------------------------- snapshots


def test_snapshot_two_covers_expected_frames():
    t_hist, tau, P = 20, 5, 4
    frames = np.arange(-t_hist + 1, 1)
    pos = np.stack([frames, frames ** 2], axis=1)[None].astype(float)
    out = slice_snapshots(pos, np.zeros((1, t_hist)), tau, P)
    # snapshot 2 spans t = -14..-10; its state is the one at t = -10
    np.testing.assert_array_equal(out["coords"][1, 0], [-10, 100])
    disp = out["features"][1, 0, 4:].reshape(tau, 2)
    expected = [[1, t ** 2 - (t - 1) ** 2] for t in range(-14, -9)]
    np.testing.assert_array_equal(disp, expected)


def test_tau_one_single_frame_snapshots():
    pos = np.random.default_rng(0).normal(size=(2, 6, 2))
    out = slice_snapshots(pos, np.zeros((2, 6)), 1, 6)
    assert out["features"].shape == (6, 2, 6)
    np.testing.assert_array_equal(out["features"][0, :, 4:], 0.0)
    np.testing.assert_array_equal(out["features"][3, :, 4:], pos[:, 3] - pos[:, 2])


def test_stationary_agent_features():
    pos = np.tile([2.0, 3.0], (1, 20, 1))
    out = slice_snapshots(pos, np.full((1, 20), 0.3), 5, 4)
    for p in range(4):
        np.testing.assert_allclose(out["features"][p, 0], [2, 3, math.cos(0.3), math.sin(0.3)] + [0] * 10)
    np.testing.assert_array_equal(out["speeds"], 0.0)


def test_history_not_divisible_rejected():
    with pytest.raises(GraphConfigError):
        slice_snapshots(np.zeros((1, 20, 2)), np.zeros((1, 20)), 3, 6)


# ---------------------------------------------------------------- lane-agent edges


def test_depth_formula():
    assert dfs_depth(0.0, 3.0, 5.0) == 1
    assert dfs_depth(10.0, 3.0, 5.0) == 7


def chain_lane_graph():
    # 8 nodes along +x, 5 m apart, starting at x = 2.5
    return build_lane_graph([lane("a", [(0, 0), (40, 0)])], 5.0)


def test_stationary_agent_reaches_direct_successors_only():
    g = chain_lane_graph()
    e1, e2 = build_lane_agent_edges([[2.5, 1.0]], [0.0], [0.0], g, k=1, forecast_horizon=3.0)
    assert e1.tolist() == [[0, 0], [0, 1]]
    assert e2.tolist() == [[0, 0], [1, 0]]


def test_opposing_candidate_discarded():
    g = build_lane_graph([lane("fwd", [(0, 0), (10, 0)]), lane("back", [(10, 3), (0, 3)])], 5.0)
    # agent heading +x sits right next to the backward lane's nodes
    e1, _ = build_lane_agent_edges([[2.5, 2.9]], [0.0], [0.0], g, k=2, forecast_horizon=3.0)
    lanes_hit = {g.node_lane[j] for _, j in e1.tolist()}
    assert lanes_hit == {0}


def test_intersection_keeps_opposing_candidate():
    g = build_lane_graph([lane("fwd", [(0, 0), (10, 0)]), lane("back", [(10, 3), (0, 3)], inter=True)], 5.0)
    e1, _ = build_lane_agent_edges([[2.5, 2.9]], [0.0], [0.0], g, k=2, forecast_horizon=3.0)
    # nearest two nodes: the backward lane's node at (2.5, 3) and the forward lane's first node
    assert {g.node_lane[j] for _, j in e1.tolist()} == {0, 1}


def test_all_candidates_opposing_keeps_nearest():
    g = build_lane_graph([lane("back", [(10, 0), (0, 0)])], 5.0)
    e1, _ = build_lane_agent_edges([[7.0, 0.5]], [0.0], [0.0], g, k=2, forecast_horizon=3.0)
    assert len(e1) >= 1 and e1[0].tolist() == [0, 0]


def test_speed_extends_search():
    g = chain_lane_graph()
    slow, _ = build_lane_agent_edges([[2.5, 0]], [0.0], [0.0], g, 1, 3.0)
    fast, _ = build_lane_agent_edges([[2.5, 0]], [0.0], [5.0], g, 1, 3.0)
    assert len(slow) == 2 and len(fast) == dfs_depth(5.0, 3.0, 5.0) + 1


# ---------------------------------------------------------------- agent-agent edges


def test_agent_agent_threshold_strict():
    assert build_agent_agent_edges([[0, 0], [3, 4]], 10.0).tolist() == [[0, 1], [1, 0]]
    assert build_agent_agent_edges([[0, 0], [6, 5]], 10.0).tolist() == []
    assert build_agent_agent_edges([[0, 0], [6, 4]], 10.0).tolist() == []
    assert build_agent_agent_edges([[1, 1]], 10.0).shape == (0, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_agent_agent_matches_oracle_and_relabeling(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    coords = rng.uniform(-20, 20, size=(n, 2))
    e = build_agent_agent_edges(coords, 15.0)
    assert e.tolist() == naive_agent_agent(coords.tolist(), 15.0)
    perm = rng.permutation(n)
    e_perm = build_agent_agent_edges(coords[perm], 15.0)
    # new index i holds old agent perm[i]
    assert sorted((int(perm[a]), int(perm[b])) for a, b in e_perm) == sorted(map(tuple, e.tolist()))


# ---------------------------------------------------------------- full graph


def straight_scene(agents):
    return Scenario(tuple(agents), (LanePolyline("l", ((-60.0, 0.0), (60.0, 0.0))),),
                    agents[0].id, 20, 30)


def track(id_, fn, heading=0.0):
    return AgentTrack(id_, "vehicle", tuple(State(t, *fn(t), heading, True) for t in range(-19, 31)))


def test_stationary_scene_has_identical_snapshots():
    s = straight_scene([track("a", lambda t: (0.0, 0.0))])
    g = assemble_dynamic_graph(normalize_scenario(s), GraphConfig())
    first = g.snapshots[0]
    for sn in g.snapshots[1:]:
        for name in ("lane_agent", "agent_lane", "agent_agent"):
            assert getattr(sn, name).tolist() == getattr(first, name).tolist()


def test_agent_agent_edges_appear_when_agents_approach():
    s = straight_scene([track("a", lambda t: (2.0 * t, 0.0)), track("b", lambda t: (12.0, 0.0))])
    g = assemble_dynamic_graph(normalize_scenario(s), GraphConfig(delta_aa=25.0))
    sizes = [len(sn.agent_agent) for sn in g.snapshots]
    assert sizes == [0, 0, 2, 2]


def test_coords_are_exact_states():
    s = normalize_scenario(generate_synthetic_scenario(3, SyntheticSpec("t_intersection", 3)))
    cfg = GraphConfig()
    g = assemble_dynamic_graph(s, cfg)
    for p, sn in enumerate(g.snapshots, 1):
        t = cfg.tau * p - s.t_hist
        for i, a in enumerate(s.agents):
            st_ = a.state_at(t)
            assert sn.agent_coords[i].tolist() == [st_.x, st_.y]


@pytest.mark.parametrize("seed", range(6))
def test_structural_invariants_on_synthetic_graphs(seed):
    layout = ("straight", "curve", "t_intersection")[seed % 3]
    s = normalize_scenario(generate_synthetic_scenario(seed, SyntheticSpec(layout, 3)))
    g = assemble_dynamic_graph(s)
    assert g.n_snapshots == 4
    for sn in g.snapshots:
        assert sn.agent_lane.tolist() == sn.lane_agent[:, ::-1].tolist()
        pairs = set(map(tuple, sn.agent_agent.tolist()))
        assert all((j, i) in pairs for i, j in pairs)
        assert sn.lane_agent[:, 1].max() < g.lane_graph.n_nodes
        assert set(sn.lane_agent[:, 0].tolist()) == set(range(g.n_agents))
    again = assemble_dynamic_graph(s)
    assert graph_to_dict(again) == graph_to_dict(g)


def test_t_hist_mismatch_rejected():
    s = generate_synthetic_scenario(1, SyntheticSpec("straight", 1))
    with pytest.raises(GraphConfigError):
        assemble_dynamic_graph(normalize_scenario(s), GraphConfig(tau=5, n_snapshots=3))


def test_batch_offsets():
    gs = [assemble_dynamic_graph(normalize_scenario(generate_synthetic_scenario(i, SyntheticSpec("t_intersection", 2))))
          for i in range(3)]
    b = GraphBatch.from_graphs(gs)
    assert b.n_agents == sum(g.n_agents for g in gs)
    assert b.focal_rows.tolist() == [0, 2, 4]
    e1 = b.snapshot_edges[0][1]
    assert e1[:, 0].max() < b.n_agents and e1[:, 1].max() < b.n_lanes
    n_l = gs[0].lane_graph.n_nodes
    assert (b.lane_edges[len(gs[0].lane_graph.edges):, 0] >= n_l).all()
