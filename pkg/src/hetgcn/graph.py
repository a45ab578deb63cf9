"""Dynamic heterogeneous scene graphs.

Two node types (0 = agent, 1 = lane segment) and four edge types, each
stored as an ``(n_edges, 2)`` integer array of ``(source, target)`` rows
whose indices refer to the node set of the matching type:

    0  lane  -> lane   successor topology, static
    1  agent -> lane   explored lanes per agent, per snapshot
    2  lane  -> agent  exact reversal of type 1
    3  agent -> agent  l1 proximity, symmetric
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scenario import FRAME_RATE_HZ, LanePolyline, Scenario, ScenarioError

EDGE_TYPES = ("lane_lane", "lane_agent", "agent_lane", "agent_agent")
# (source node type, target node type) per edge type
EDGE_ENDPOINTS = ((1, 1), (0, 1), (1, 0), (0, 0))
LANE_FEATURES = 4


class GraphConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    tau: int = 5
    n_snapshots: int = 4
    k_nearest: int = 6
    delta_aa: float = 50.0
    segment_len: float = 5.0
    opposing_angle_deg: float = 120.0

    def __post_init__(self):
        if self.tau < 1 or self.n_snapshots < 1:
            raise GraphConfigError("tau and n_snapshots must be >= 1")
        if self.k_nearest < 1:
            raise GraphConfigError("k_nearest must be >= 1")
        if self.delta_aa <= 0 or self.segment_len <= 0:
            raise GraphConfigError("delta_aa and segment_len must be > 0")

    @property
    def t_hist(self) -> int:
        return self.tau * self.n_snapshots

    def agent_feature_width(self) -> int:
        return 4 + 2 * self.tau


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _edges(pairs) -> np.ndarray:
    return _frozen(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))


@dataclass(frozen=True, eq=False)
class LaneGraph:
    node_coords: np.ndarray       # (m, 2) segment midpoints
    node_dirs: np.ndarray         # (m, 2) unit direction
    raw_features: np.ndarray      # (m, 4) midpoint, end - start
    edges: np.ndarray             # (e, 2) lane -> lane
    avg_gap: float
    node_lane: np.ndarray         # (m,) index of the source polyline
    node_intersection: np.ndarray  # (m,) bool
    lane_ids: tuple[str, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def successors(self) -> list[list[int]]:
        succ: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            succ[int(a)].append(int(b))
        return succ


@dataclass(frozen=True, eq=False)
class Snapshot:
    index: int                    # 1..P
    agent_features: np.ndarray    # (n, 4 + 2 tau)
    agent_coords: np.ndarray      # (n, 2)
    agent_headings: np.ndarray    # (n,)
    agent_speeds: np.ndarray      # (n,) mean speed over the group, m/s
    lane_agent: np.ndarray        # E1, agent -> lane
    agent_lane: np.ndarray        # E2, lane -> agent
    agent_agent: np.ndarray       # E3

    def edges_by_type(self, lane_lane: np.ndarray) -> tuple[np.ndarray, ...]:
        return (lane_lane, self.lane_agent, self.agent_lane, self.agent_agent)


@dataclass(frozen=True, eq=False)
class DynamicHeteroGraph:
    lane_graph: LaneGraph
    snapshots: tuple[Snapshot, ...]
    tau: int
    focal_index: int
    agent_ids: tuple[str, ...]
    future: np.ndarray            # (n, T, 2) ground truth, zeros where unknown
    future_mask: np.ndarray       # (n, T) bool
    scenario_id: str = ""

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def n_snapshots(self) -> int:
        return len(self.snapshots)


# ---------------------------------------------------------------------------- lanes


def _resample(points: np.ndarray, step: float) -> np.ndarray:
    seg = np.hypot(*np.diff(points, axis=0).T)
    arclen = np.concatenate([[0.0], np.cumsum(seg)])
    n_seg = max(1, int(round(arclen[-1] / step)))
    s = np.linspace(0.0, arclen[-1], n_seg + 1)
    return np.column_stack([np.interp(s, arclen, points[:, 0]), np.interp(s, arclen, points[:, 1])])


def build_lane_graph(lanes: Sequence[LanePolyline], segment_len: float = 5.0) -> LaneGraph:
    """Resample centerlines into segments of about ``segment_len`` meters.

    Each segment is a node; consecutive segments of a lane are linked, and
    the last segment of a lane links to the first segment of each successor.
    """
    if not lanes:
        raise GraphConfigError("lane list is empty")
    if segment_len <= 0:
        raise GraphConfigError("segment_len must be > 0")
    starts, ends, node_lane, inter = [], [], [], []
    first_last: dict[str, tuple[int, int]] = {}
    edges = []
    for li, lane in enumerate(lanes):
        pts = _resample(np.asarray(lane.centerline, dtype=float), segment_len)
        base = len(starts)
        for a, b in zip(pts[:-1], pts[1:]):
            starts.append(a)
            ends.append(b)
            node_lane.append(li)
            inter.append(lane.is_intersection)
        n = len(pts) - 1
        edges.extend((base + i, base + i + 1) for i in range(n - 1))
        first_last[lane.id] = (base, base + n - 1)
    for lane in lanes:
        _, last = first_last[lane.id]
        for succ in lane.successor_ids:
            edges.append((last, first_last[succ][0]))
    starts, ends = np.asarray(starts), np.asarray(ends)
    mid = 0.5 * (starts + ends)
    disp = ends - starts
    dirs = disp / np.linalg.norm(disp, axis=1, keepdims=True)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e):
        avg_gap = float(np.mean(np.linalg.norm(mid[e[:, 1]] - mid[e[:, 0]], axis=1)))
    else:
        avg_gap = float(np.mean(np.linalg.norm(disp, axis=1)))
    return LaneGraph(
        node_coords=_frozen(mid),
        node_dirs=_frozen(dirs),
        raw_features=_frozen(np.hstack([mid, disp])),
        edges=_edges(e),
        avg_gap=avg_gap,
        node_lane=_frozen(np.asarray(node_lane, dtype=np.int64)),
        node_intersection=_frozen(np.asarray(inter, dtype=bool)),
        lane_ids=tuple(l.id for l in lanes),
    )


def dfs_reachable(graph, sources, max_depth: int) -> list[int]:
    """Nodes reachable from ``sources`` within ``max_depth`` successor hops.

    ``graph`` is a :class:`LaneGraph` or a list of successor lists. Sources
    count as depth 0. A node first reached along a long path is expanded
    again when a shorter path shows up, so every node ends at its minimum
    depth and the result does not depend on visiting order.
    """
    succ = graph.successors if isinstance(graph, LaneGraph) else graph
    best: dict[int, int] = {}
    stack = [(int(s), 0) for s in sorted(set(int(s) for s in sources), reverse=True)]
    while stack:
        node, depth = stack.pop()
        if node in best and best[node] <= depth:
            continue
        best[node] = depth
        if depth < max_depth:
            for nxt in reversed(succ[node]):
                if nxt not in best or best[nxt] > depth + 1:
                    stack.append((nxt, depth + 1))
    return sorted(best)


# ---------------------------------------------------------------------------- agents


def slice_snapshots(positions: np.ndarray, headings: np.ndarray, tau: int, n_snapshots: int):
    """Group ``T' = tau * P`` history frames into snapshot features.

    ``positions`` is ``(n, T', 2)`` and ``headings`` ``(n, T')`` with index
    ``i`` holding frame ``t = i - T' + 1``. Returns a dict of per-snapshot
    arrays: ``features (P, n, 4 + 2 tau)`` = [x, y, cos h, sin h, the tau
    displacements of the group], ``coords (P, n, 2)``, ``headings (P, n)``
    and ``speeds (P, n)``. The first displacement of a group bridges from
    the last frame of the previous group; frame ``-T'+1`` has none (zero).
    """
    positions = np.asarray(positions, dtype=float)
    n, t_hist = positions.shape[:2]
    if tau < 1 or t_hist % tau:
        raise GraphConfigError(f"history length {t_hist} is not divisible by tau={tau}")
    if t_hist != tau * n_snapshots:
        raise GraphConfigError(f"history length {t_hist} != tau*P = {tau * n_snapshots}")
    disp = np.zeros_like(positions)
    disp[:, 1:] = positions[:, 1:] - positions[:, :-1]
    feats, coords, heads, speeds = [], [], [], []
    for p in range(1, n_snapshots + 1):
        lo, hi = tau * (p - 1), tau * p          # frames t = tau(p-1)-T'+1 .. tau p - T'
        last = hi - 1
        h = headings[:, last]
        state = np.column_stack([positions[:, last], np.cos(h), np.sin(h)])
        group = disp[:, lo:hi]
        feats.append(np.hstack([state, group.reshape(n, 2 * tau)]))
        coords.append(positions[:, last])
        heads.append(h)
        speeds.append(np.linalg.norm(group, axis=2).mean(axis=1) * FRAME_RATE_HZ)
    return {
        "features": np.stack(feats),
        "coords": np.stack(coords),
        "headings": np.stack(heads),
        "speeds": np.stack(speeds),
    }


def dfs_depth(speed: float, horizon: float, avg_gap: float) -> int:
    return int(math.ceil(speed * horizon / avg_gap)) + 1


def build_lane_agent_edges(coords, headings, speeds, graph: LaneGraph, k: int,
                           forecast_horizon: float, opposing_angle_deg: float = 120.0):
    """Agent -> lane edges (E1) and their reversal (E2) for one snapshot."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if graph.n_nodes == 0:
        raise GraphConfigError("lane graph is empty")
    k = min(k, graph.n_nodes)
    succ = graph.successors
    cos_thr = math.cos(math.radians(opposing_angle_deg))
    pairs = []
    for i, (c, h, v) in enumerate(zip(coords, headings, speeds)):
        dist = np.linalg.norm(graph.node_coords - c, axis=1)
        cand = np.argsort(dist, kind="stable")[:k]
        heading = np.array([math.cos(h), math.sin(h)])
        # angle > threshold  <=>  cos(angle) < cos(threshold)
        cos_angle = graph.node_dirs[cand] @ heading
        keep = (cos_angle >= cos_thr) | graph.node_intersection[cand]
        sources = cand[keep] if keep.any() else cand[:1]
        depth = dfs_depth(float(v), forecast_horizon, graph.avg_gap)
        pairs.extend((i, j) for j in dfs_reachable(succ, sources, depth))
    e1 = _edges(pairs)
    return e1, _edges(e1[:, ::-1])


def build_agent_agent_edges(coords, delta_aa: float) -> np.ndarray:
    """Directed edges both ways between agents closer than ``delta_aa`` in l1."""
    if delta_aa <= 0:
        raise GraphConfigError("delta_aa must be > 0")
    c = np.asarray(coords, dtype=float).reshape(-1, 2)
    d = np.abs(c[:, None, :] - c[None, :, :]).sum(axis=2)
    close = d < delta_aa
    np.fill_diagonal(close, False)
    return _edges(np.argwhere(close))


def assemble_dynamic_graph(s: Scenario, cfg: GraphConfig = GraphConfig()) -> DynamicHeteroGraph:
    """Build all P snapshots for a (normalized) scenario.

    Agents without any observed history frame are left out. Agent rows keep
    the scenario's agent order in every snapshot.
    """
    if s.t_hist != cfg.t_hist:
        raise GraphConfigError(
            f"scenario has t_hist={s.t_hist} but tau*P = {cfg.tau}*{cfg.n_snapshots} = {cfg.t_hist}")
    lane_graph = build_lane_graph(s.lanes, cfg.segment_len)
    agents, hist = [], []
    for a in s.agents:
        try:
            hist.append(s.history(a))
        except ScenarioError:
            if a.id == s.focal_agent_id:
                raise
            continue
        agents.append(a)
    positions = np.stack([h.positions for h in hist])
    headings = np.stack([h.headings for h in hist])
    sl = slice_snapshots(positions, headings, cfg.tau, cfg.n_snapshots)
    horizon = s.t_future / FRAME_RATE_HZ
    snaps = []
    for p in range(cfg.n_snapshots):
        e1, e2 = build_lane_agent_edges(sl["coords"][p], sl["headings"][p], sl["speeds"][p],
                                        lane_graph, cfg.k_nearest, horizon, cfg.opposing_angle_deg)
        snaps.append(Snapshot(
            index=p + 1,
            agent_features=_frozen(sl["features"][p]),
            agent_coords=_frozen(sl["coords"][p]),
            agent_headings=_frozen(sl["headings"][p]),
            agent_speeds=_frozen(sl["speeds"][p]),
            lane_agent=e1,
            agent_lane=e2,
            agent_agent=build_agent_agent_edges(sl["coords"][p], cfg.delta_aa),
        ))
    fut, mask = zip(*(s.future(a) for a in agents))
    ids = tuple(a.id for a in agents)
    return DynamicHeteroGraph(
        lane_graph=lane_graph,
        snapshots=tuple(snaps),
        tau=cfg.tau,
        focal_index=ids.index(s.focal_agent_id),
        agent_ids=ids,
        future=_frozen(np.stack(fut)),
        future_mask=_frozen(np.stack(mask)),
        scenario_id=s.scenario_id,
    )


def graph_to_dict(g: DynamicHeteroGraph) -> dict:
    """JSON-ready dump used by the ``build-graph`` command."""
    lg = g.lane_graph
    return {
        "scenario_id": g.scenario_id,
        "tau": g.tau,
        "focal_index": g.focal_index,
        "agent_ids": list(g.agent_ids),
        "lane_graph": {
            "node_coords": lg.node_coords.tolist(),
            "node_dirs": lg.node_dirs.tolist(),
            "raw_features": lg.raw_features.tolist(),
            "edges": lg.edges.tolist(),
            "avg_gap": lg.avg_gap,
            "node_intersection": lg.node_intersection.tolist(),
        },
        "snapshots": [
            {
                "index": sn.index,
                "agent_features": sn.agent_features.tolist(),
                "agent_coords": sn.agent_coords.tolist(),
                "edges_by_type": {
                    name: e.tolist() for name, e in zip(EDGE_TYPES, sn.edges_by_type(lg.edges))
                },
            }
            for sn in g.snapshots
        ],
    }


# ---------------------------------------------------------------------------- batching


@dataclass(eq=False)
class GraphBatch:
    """Several graphs merged into one disconnected graph.

    Node indices are shifted so that each component keeps its own block;
    message passing never crosses components.
    """

    n_agents: int
    n_lanes: int
    lane_features: np.ndarray
    lane_coords: np.ndarray
    lane_edges: np.ndarray
    agent_features: list[np.ndarray]       # per snapshot (n_agents, f)
    agent_coords: list[np.ndarray]         # per snapshot (n_agents, 2)
    snapshot_edges: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    focal_rows: np.ndarray                 # one agent row per graph
    agent_offsets: np.ndarray
    future: np.ndarray                     # (n_agents, T, 2)
    future_mask: np.ndarray
    scenario_ids: list[str] = field(default_factory=list)

    @property
    def n_snapshots(self) -> int:
        return len(self.agent_features)

    @classmethod
    def from_graphs(cls, graphs: Sequence[DynamicHeteroGraph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty batch")
        P = graphs[0].n_snapshots
        if any(g.n_snapshots != P for g in graphs):
            raise ValueError("all graphs in a batch need the same number of snapshots")
        a_off = np.cumsum([0] + [g.n_agents for g in graphs])
        l_off = np.cumsum([0] + [g.lane_graph.n_nodes for g in graphs])
        shift = {0: a_off, 1: l_off}

        def merge(per_graph: list[np.ndarray], etype: int) -> np.ndarray:
            src_t, dst_t = EDGE_ENDPOINTS[etype]
            parts = [e + np.array([shift[src_t][b], shift[dst_t][b]]) for b, e in enumerate(per_graph)]
            return np.concatenate(parts).astype(np.int64).reshape(-1, 2)

        lane_edges = merge([g.lane_graph.edges for g in graphs], 0)
        snapshot_edges, feats, coords = [], [], []
        for p in range(P):
            sn = [g.snapshots[p] for g in graphs]
            snapshot_edges.append((
                lane_edges,
                merge([x.lane_agent for x in sn], 1),
                merge([x.agent_lane for x in sn], 2),
                merge([x.agent_agent for x in sn], 3),
            ))
            feats.append(np.concatenate([x.agent_features for x in sn]))
            coords.append(np.concatenate([x.agent_coords for x in sn]))
        return cls(
            n_agents=int(a_off[-1]),
            n_lanes=int(l_off[-1]),
            lane_features=np.concatenate([g.lane_graph.raw_features for g in graphs]),
            lane_coords=np.concatenate([g.lane_graph.node_coords for g in graphs]),
            lane_edges=lane_edges,
            agent_features=feats,
            agent_coords=coords,
            snapshot_edges=snapshot_edges,
            focal_rows=np.array([a_off[b] + g.focal_index for b, g in enumerate(graphs)]),
            agent_offsets=a_off,
            future=np.concatenate([g.future for g in graphs]),
            future_mask=np.concatenate([g.future_mask for g in graphs]),
            scenario_ids=[g.scenario_id for g in graphs],
        )
