"""Scenario data model, JSON ingestion, normalization and a synthetic generator.

Frame indices follow the observation/forecast convention: history frames
are ``t = -T'+1 .. 0`` and future frames ``t = 1 .. T`` at 10 Hz.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

FRAME_RATE_HZ = 10.0
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist", "other")
MIN_HEADING_DISPLACEMENT = 1e-6


class ScenarioError(ValueError):
    """Validation failure; ``field`` names the offending part of the input."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ScenarioParseError(ScenarioError):
    pass


@dataclass(frozen=True)
class State:
    t: int
    x: float
    y: float
    heading: float | None = None
    observed: bool = True

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class AgentTrack:
    id: str
    kind: str
    states: tuple[State, ...]

    def state_at(self, t: int) -> State | None:
        for s in self.states:
            if s.t == t:
                return s
        return None


@dataclass(frozen=True)
class LanePolyline:
    id: str
    centerline: tuple[tuple[float, float], ...]
    successor_ids: tuple[str, ...] = ()
    is_intersection: bool = False


@dataclass(frozen=True)
class Scenario:
    agents: tuple[AgentTrack, ...]
    lanes: tuple[LanePolyline, ...]
    focal_agent_id: str
    t_hist: int
    t_future: int
    scenario_id: str = ""

    def __post_init__(self):
        validate_scenario(self)

    @property
    def focal(self) -> AgentTrack:
        return next(a for a in self.agents if a.id == self.focal_agent_id)

    def n_snapshots(self, tau: int) -> int:
        if tau <= 0 or self.t_hist % tau:
            raise ScenarioError(f"t_hist={self.t_hist} is not a multiple of tau={tau}", "t_hist")
        return self.t_hist // tau

    def history(self, agent: AgentTrack) -> "History":
        return agent_history(agent, self.t_hist)

    def future(self, agent: AgentTrack) -> tuple[np.ndarray, np.ndarray]:
        """Future positions ``(T, 2)`` and a mask of frames that were observed."""
        pos = np.zeros((self.t_future, 2))
        mask = np.zeros(self.t_future, dtype=bool)
        for s in agent.states:
            if 1 <= s.t <= self.t_future and s.observed:
                pos[s.t - 1] = (s.x, s.y)
                mask[s.t - 1] = True
        return pos, mask


@dataclass(frozen=True)
class History:
    """Dense historical track, index ``i`` holds frame ``t = i - T' + 1``."""

    positions: np.ndarray
    headings: np.ndarray
    observed: np.ndarray


def agent_history(agent: AgentTrack, t_hist: int) -> History:
    """Dense history with forward-filled gaps.

    Frames before the first observation are back-filled from it. Filled
    frames are flagged unobserved and carry the filled position, so their
    displacement is zero. Missing headings are taken from the displacement
    to the previous frame, or carried over when the agent did not move.
    """
    pos = np.full((t_hist, 2), np.nan)
    head = np.full(t_hist, np.nan)
    obs = np.zeros(t_hist, dtype=bool)
    for s in agent.states:
        i = s.t + t_hist - 1
        if 0 <= i < t_hist and s.observed:
            pos[i] = (s.x, s.y)
            obs[i] = True
            if s.heading is not None:
                head[i] = s.heading
    if not obs.any():
        raise ScenarioError(f"agent {agent.id!r} has no observed historical state", "agents.states")
    first = int(np.argmax(obs))
    pos[:first] = pos[first]
    for i in range(first + 1, t_hist):
        if not obs[i]:
            pos[i] = pos[i - 1]
    for i in range(t_hist):
        if not np.isnan(head[i]) and obs[i]:
            continue
        d = pos[i] - pos[i - 1] if i > 0 else np.zeros(2)
        if obs[i] and i > 0 and np.hypot(*d) > MIN_HEADING_DISPLACEMENT:
            head[i] = math.atan2(d[1], d[0])
        elif i > 0 and not np.isnan(head[i - 1]):
            head[i] = head[i - 1]
        else:
            head[i] = np.nan
    # frames that precede any known heading take the first known one
    known = ~np.isnan(head)
    if known.any():
        head[: int(np.argmax(known))] = head[int(np.argmax(known))]
    else:
        head[:] = 0.0
    return History(pos, head, obs)


def validate_scenario(s: Scenario) -> None:
    if s.t_hist < 1:
        raise ScenarioError("must be >= 1", "t_hist")
    if s.t_future < 2:
        raise ScenarioError("must be >= 2", "t_future")
    ids = [a.id for a in s.agents]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ScenarioError(f"duplicate agent id {dup!r}", "agents.id")
    if s.focal_agent_id not in ids:
        raise ScenarioError(f"focal agent {s.focal_agent_id!r} not among agents", "focal_agent_id")
    for a in s.agents:
        if a.kind not in AGENT_KINDS:
            raise ScenarioError(f"agent {a.id!r} has unknown kind {a.kind!r}", "agents.kind")
        ts = [st.t for st in a.states]
        if any(t1 >= t2 for t1, t2 in zip(ts, ts[1:])):
            raise ScenarioError(f"agent {a.id!r} states not strictly sorted by t", "agents.states.t")
        for st in a.states:
            if st.observed and not (math.isfinite(st.x) and math.isfinite(st.y)):
                raise ScenarioError(f"agent {a.id!r} has non-finite position at t={st.t}",
                                    "agents.states.x")
            if st.heading is not None and not math.isfinite(st.heading):
                raise ScenarioError(f"agent {a.id!r} has non-finite heading at t={st.t}",
                                    "agents.states.heading")
    focal = next(a for a in s.agents if a.id == s.focal_agent_id)
    n_obs = sum(1 for st in focal.states if st.observed and -s.t_hist < st.t <= 0)
    if n_obs < 2:
        raise ScenarioError("focal agent needs at least 2 observed historical states",
                            "agents.states")
    lane_ids = [ln.id for ln in s.lanes]
    if len(set(lane_ids)) != len(lane_ids):
        dup = next(i for i in lane_ids if lane_ids.count(i) > 1)
        raise ScenarioError(f"duplicate lane id {dup!r}", "lanes.id")
    known = set(lane_ids)
    for ln in s.lanes:
        if len(ln.centerline) < 2:
            raise ScenarioError(f"lane {ln.id!r} centerline needs >= 2 points", "lanes.centerline")
        for p, q in zip(ln.centerline, ln.centerline[1:]):
            if p == q:
                raise ScenarioError(f"lane {ln.id!r} has repeated consecutive point {p}",
                                    "lanes.centerline")
        for succ in ln.successor_ids:
            if succ not in known:
                raise ScenarioError(f"lane {ln.id!r} references missing successor {succ!r}",
                                    "lanes.successors")


# ---------------------------------------------------------------------------- JSON


def scenario_to_dict(s: Scenario) -> dict:
    d = {
        "focal_agent_id": s.focal_agent_id,
        "t_hist": s.t_hist,
        "t_future": s.t_future,
        "agents": [
            {
                "id": a.id,
                "kind": a.kind,
                "states": [
                    {"t": st.t, "x": st.x, "y": st.y, "heading": st.heading, "observed": st.observed}
                    for st in a.states
                ],
            }
            for a in s.agents
        ],
        "lanes": [
            {
                "id": ln.id,
                "centerline": [list(p) for p in ln.centerline],
                "successors": list(ln.successor_ids),
                "is_intersection": ln.is_intersection,
            }
            for ln in s.lanes
        ],
    }
    if s.scenario_id:
        d["scenario_id"] = s.scenario_id
    return d


def _req(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioError("missing required field", f"{where}.{key}" if where else key)
    return obj[key]


def scenario_from_dict(d: dict, tau: int | None = None) -> Scenario:
    try:
        agents = []
        for i, a in enumerate(_req(d, "agents", "")):
            states = []
            for j, st in enumerate(_req(a, "states", f"agents[{i}]")):
                where = f"agents[{i}].states[{j}]"
                heading = st.get("heading")
                x, y = _req(st, "x", where), _req(st, "y", where)
                states.append(State(
                    t=int(_req(st, "t", where)),
                    x=float("nan") if x is None else float(x),
                    y=float("nan") if y is None else float(y),
                    heading=None if heading is None else float(heading),
                    observed=bool(st.get("observed", True)),
                ))
            agents.append(AgentTrack(str(_req(a, "id", f"agents[{i}]")),
                                     str(a.get("kind", "vehicle")), tuple(states)))
        lanes = []
        for i, ln in enumerate(_req(d, "lanes", "")):
            pts = tuple((float(p[0]), float(p[1])) for p in _req(ln, "centerline", f"lanes[{i}]"))
            lanes.append(LanePolyline(str(_req(ln, "id", f"lanes[{i}]")), pts,
                                      tuple(str(x) for x in ln.get("successors", [])),
                                      bool(ln.get("is_intersection", False))))
        s = Scenario(tuple(agents), tuple(lanes), str(_req(d, "focal_agent_id", "")),
                     int(_req(d, "t_hist", "")), int(_req(d, "t_future", "")),
                     str(d.get("scenario_id", "")))
    except (TypeError, IndexError) as exc:
        raise ScenarioParseError(f"malformed scenario structure ({exc})") from exc
    if tau is not None:
        s.n_snapshots(tau)
    return s


def load_scenario(path: str | Path, tau: int | None = None) -> Scenario:
    """Read and validate a scenario JSON file.

    When ``tau`` is given, the history length must be a multiple of it.
    """
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: invalid JSON ({exc})") from exc
    s = scenario_from_dict(d, tau)
    if not s.scenario_id:
        s = replace(s, scenario_id=path.stem)
    return s


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------- normalization


def _wrap_angle(a: float) -> float:
    # identity on (-pi, pi] so re-normalizing is exact
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def focal_pose(s: Scenario) -> tuple[float, float, float]:
    """Position and heading of the focal agent at ``t = 0``."""
    focal = s.focal
    st = focal.state_at(0)
    if st is None or not st.observed:
        raise ScenarioError("focal agent has no observed state at t=0", "agents.states")
    if st.heading is not None:
        return st.x, st.y, st.heading
    prev = [x for x in focal.states if x.observed and x.t < 0]
    if not prev:
        raise ScenarioError("focal heading undefined at t=0", "agents.states.heading")
    p = prev[-1]
    dx, dy = st.x - p.x, st.y - p.y
    if math.hypot(dx, dy) < MIN_HEADING_DISPLACEMENT:
        raise ScenarioError("focal heading undefined at t=0 (no heading, zero displacement)",
                            "agents.states.heading")
    return st.x, st.y, math.atan2(dy, dx)


def transform_scenario(s: Scenario, origin: tuple[float, float], theta: float) -> Scenario:
    """Rigidly map coordinates into the frame at ``origin`` with x-axis along ``theta``."""
    ox, oy = origin
    c, sn = math.cos(theta), math.sin(theta)

    def tf(x: float, y: float) -> tuple[float, float]:
        dx, dy = x - ox, y - oy
        return (c * dx + sn * dy, -sn * dx + c * dy)

    agents = []
    for a in s.agents:
        states = []
        for st in a.states:
            x, y = tf(st.x, st.y)
            h = None if st.heading is None else _wrap_angle(st.heading - theta)
            states.append(State(st.t, x, y, h, st.observed))
        agents.append(AgentTrack(a.id, a.kind, tuple(states)))
    lanes = [replace(ln, centerline=tuple(tf(*p) for p in ln.centerline)) for ln in s.lanes]
    return replace(s, agents=tuple(agents), lanes=tuple(lanes))


def normalize_scenario(s: Scenario) -> Scenario:
    """Express every coordinate in the focal agent's frame at ``t = 0``.

    The focal state at ``t = 0`` lands on the origin with heading exactly 0.
    """
    x0, y0, theta = focal_pose(s)
    out = transform_scenario(s, (x0, y0), theta)
    agents = []
    for a in out.agents:
        if a.id == s.focal_agent_id:
            a = AgentTrack(a.id, a.kind, tuple(
                State(st.t, 0.0, 0.0, 0.0, st.observed) if st.t == 0 else st for st in a.states))
        agents.append(a)
    return replace(out, agents=tuple(agents))


# ---------------------------------------------------------------------------- synthetic data

LAYOUTS = ("straight", "curve", "t_intersection")


@dataclass(frozen=True)
class SyntheticSpec:
    layout: str = "straight"
    n_agents: int = 1
    noise: float = 0.05
    t_hist: int = 20
    t_future: int = 30
    speed_range: tuple[float, float] = (4.0, 10.0)

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _polyline_length(pts: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _arc(center, radius, a0, a1, n) -> list[tuple[float, float]]:
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a))
            for a in np.linspace(a0, a1, n)]


def _line(p, q, n=2) -> list[tuple[float, float]]:
    return [(p[0] + (q[0] - p[0]) * u, p[1] + (q[1] - p[1]) * u) for u in np.linspace(0, 1, n)]


def _bezier(p0, p1, p2, n=8) -> list[tuple[float, float]]:
    out = []
    for u in np.linspace(0, 1, n):
        out.append(((1 - u) ** 2 * p0[0] + 2 * (1 - u) * u * p1[0] + u * u * p2[0],
                    (1 - u) ** 2 * p0[1] + 2 * (1 - u) * u * p1[1] + u * u * p2[1]))
    return out


def _layout(name: str) -> tuple[list[LanePolyline], dict[str, list[list[str]]]]:
    """Lanes plus, per entry lane, the routes an agent may follow."""
    if name == "straight":
        lanes = [
            LanePolyline("east", tuple(_line((-120.0, -1.75), (120.0, -1.75)))),
            LanePolyline("west", tuple(_line((120.0, 1.75), (-120.0, 1.75)))),
        ]
        return lanes, {"east": [["east"]], "west": [["west"]]}
    if name == "curve":
        lanes = [
            LanePolyline("approach", tuple(_line((-120.0, 0.0), (0.0, 0.0))), ("bend",)),
            LanePolyline("bend", tuple(_arc((0.0, 50.0), 50.0, -math.pi / 2, 0.0, 12)), ("exit",)),
            LanePolyline("exit", tuple(_line((50.0, 50.0), (50.0, 150.0)))),
        ]
        return lanes, {"approach": [["approach", "bend", "exit"]]}
    w = 1.75
    lanes = [
        LanePolyline("west_in", tuple(_line((-120.0, -w), (-8.0, -w))), ("w2e", "w2n")),
        LanePolyline("w2e", tuple(_line((-8.0, -w), (8.0, -w))), ("east_out",), True),
        LanePolyline("w2n", tuple(_bezier((-8.0, -w), (w, -w), (w, 8.0))), ("north_out",), True),
        LanePolyline("east_out", tuple(_line((8.0, -w), (120.0, -w)))),
        LanePolyline("north_out", tuple(_line((w, 8.0), (w, 120.0)))),
        LanePolyline("east_in", tuple(_line((120.0, w), (8.0, w))), ("e2w",)),
        LanePolyline("e2w", tuple(_line((8.0, w), (-8.0, w))), ("west_out",), True),
        LanePolyline("west_out", tuple(_line((-8.0, w), (-120.0, w)))),
        LanePolyline("north_in", tuple(_line((-w, 120.0), (-w, 8.0))), ("n2w",)),
        LanePolyline("n2w", tuple(_bezier((-w, 8.0), (-w, w), (-8.0, w))), ("west_out",), True),
    ]
    routes = {
        "west_in": [["west_in", "w2e", "east_out"], ["west_in", "w2n", "north_out"]],
        "east_in": [["east_in", "e2w", "west_out"]],
        "north_in": [["north_in", "n2w", "west_out"]],
    }
    return lanes, routes


def _route_polyline(lanes: dict[str, LanePolyline], route: list[str]) -> np.ndarray:
    pts: list[tuple[float, float]] = []
    for lid in route:
        cl = list(lanes[lid].centerline)
        pts.extend(cl if not pts else cl[1:])
    return np.asarray(pts)


def _entry_length(lanes: dict[str, LanePolyline], route: list[str]) -> float:
    cl = np.asarray(lanes[route[0]].centerline)
    return float(_polyline_length(cl)[-1])


def _sample_route(poly: np.ndarray, arclen: np.ndarray, s: np.ndarray):
    """Positions and tangent headings at arclengths ``s`` (extrapolated linearly past the ends)."""
    seg = np.clip(np.searchsorted(arclen, s, side="right") - 1, 0, len(poly) - 2)
    d = poly[seg + 1] - poly[seg]
    seg_len = arclen[seg + 1] - arclen[seg]
    u = (s - arclen[seg]) / seg_len
    pos = poly[seg] + u[:, None] * d
    heading = np.arctan2(d[:, 1], d[:, 0])
    return pos, heading


def generate_synthetic_scenario(seed: int, spec: SyntheticSpec = SyntheticSpec()) -> Scenario:
    """Deterministic synthetic scene: agents drive along lane routes.

    Speeds are constant up to a small seeded acceleration; positions carry
    Gaussian noise clipped to three standard deviations. The focal agent is
    placed so its forecast window covers the interesting part of the
    layout (the bend or the junction). Additional agents follow the focal
    agent on its route, or drive on other entry lanes.
    """
    rng = np.random.default_rng(seed)
    lane_list, routes = _layout(spec.layout)
    lanes = {ln.id: ln for ln in lane_list}
    dt = 1.0 / FRAME_RATE_HZ
    frames = np.arange(-spec.t_hist + 1, spec.t_future + 1)
    entries = sorted(routes)
    focal_entry = "east" if spec.layout == "straight" else entries[0]
    if spec.layout == "t_intersection":
        focal_entry = "west_in"

    agents = []
    focal_route = None
    for i in range(spec.n_agents):
        if i == 0:
            entry = focal_entry
            route = routes[entry][int(rng.integers(len(routes[entry])))]
            focal_route = route
        elif i % 2 == 1 or len(entries) == 1:
            route = focal_route
        else:
            others = [e for e in entries if e != focal_entry]
            entry = others[int(rng.integers(len(others)))]
            route = routes[entry][int(rng.integers(len(routes[entry])))]
        poly = _route_polyline(lanes, route)
        arclen = _polyline_length(poly)
        speed = float(rng.uniform(*spec.speed_range))
        accel = float(rng.uniform(-0.3, 0.3))
        junction = _entry_length(lanes, route)
        if i == 0:
            # reach the junction/bend within the forecast window
            s0 = junction - float(rng.uniform(2.0, 12.0))
        elif route is focal_route:
            s0 = agents[0][1] - float(rng.uniform(8.0, 20.0)) * (i + 1) / 2
        else:
            s0 = junction - float(rng.uniform(10.0, 30.0))
        t = frames * dt
        s = s0 + speed * t + 0.5 * accel * t * t
        pos, heading = _sample_route(poly, arclen, s)
        if spec.noise > 0:
            eps = np.clip(rng.normal(0.0, spec.noise, size=pos.shape), -3 * spec.noise, 3 * spec.noise)
            pos = pos + eps
        states = tuple(
            State(int(f), float(p[0]), float(p[1]), float(h), True)
            for f, p, h in zip(frames, pos, heading)
        )
        agents.append((AgentTrack(f"agent_{i}", "vehicle", states), s0))

    return Scenario(
        agents=tuple(a for a, _ in agents),
        lanes=tuple(lane_list),
        focal_agent_id="agent_0",
        t_hist=spec.t_hist,
        t_future=spec.t_future,
        scenario_id=f"synthetic_{spec.layout}_{seed}",
    )


def generate_dataset(seeds: Iterable[int], specs: Iterable[SyntheticSpec]) -> list[Scenario]:
    return [generate_synthetic_scenario(seed, spec) for seed, spec in zip(seeds, specs)]
