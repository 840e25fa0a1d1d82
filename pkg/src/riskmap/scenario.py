"""Driving-context data model, JSON persistence and synthetic scenario generation.

Layouts (per row):

* ego history: ``[x, y, heading, speed, yaw_rate]``
* agent history: ``[x, y, heading, speed, length, width]``
* agent future: ``[x, y, heading]``
* demo: ``[x, y, heading, speed]``

Distances are metres, angles radians, speeds m/s.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from riskmap.frenet import ReferenceLine, frenet_rollout, kinematics_from_positions, wrap_angle

SCHEMA_VERSION = 1
HISTORY_STEPS = 15
HORIZON_STEPS = 30
DT = 0.1
EGO_LENGTH = 4.8
EGO_WIDTH = 1.8
LANE_WIDTH = 3.5
LIGHT_STATES = ("red", "yellow", "green")
KINDS = ("straight", "curve", "cut_in", "blocked_lane", "red_light")


class ScenarioError(ValueError):
    """Invalid scenario content. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class AgentTrack:
    id: str
    history: np.ndarray
    future: np.ndarray | None = None

    @property
    def length(self) -> float:
        return float(self.history[-1, 4])

    @property
    def width(self) -> float:
        return float(self.history[-1, 5])


@dataclass
class TrafficLight:
    line: np.ndarray  # [2, 2] stop-line segment
    state: str


@dataclass
class MapContext:
    lanes: list[np.ndarray]
    obstacles: list[np.ndarray] = field(default_factory=list)
    lights: list[TrafficLight] = field(default_factory=list)

    @cached_property
    def reference_lines(self) -> list[ReferenceLine]:
        return [ReferenceLine(lane) for lane in self.lanes]

    def nearest_lane(self, xy) -> tuple[int, float]:
        """Index of the lane closest to ``xy`` and the polyline distance to it."""
        if not self.lanes:
            raise ScenarioError("map.lanes", "no reference lane")
        dists = [float(r.polyline_distance(np.asarray(xy, dtype=float)[None])[0])
                 for r in self.reference_lines]
        k = int(np.argmin(dists))
        return k, dists[k]


@dataclass
class Scenario:
    ego_history: np.ndarray
    agents: list[AgentTrack]
    map: MapContext
    demo: np.ndarray
    dt: float = DT
    kind: str | None = None
    ego_size: tuple[float, float] = (EGO_LENGTH, EGO_WIDTH)

    @property
    def ego_state(self) -> np.ndarray:
        return self.ego_history[-1]

    @property
    def horizon(self) -> int:
        return len(self.demo)


# --------------------------------------------------------------------------- validation

def _check_heading(name: str, values) -> None:
    v = np.asarray(values, dtype=float)
    if np.any(v <= -math.pi) or np.any(v > math.pi):
        raise ScenarioError(name, "headings must lie in (-pi, pi]")


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def validate(scenario: Scenario, history_steps: int = HISTORY_STEPS,
             horizon_steps: int = HORIZON_STEPS) -> Scenario:
    if not scenario.dt > 0:
        raise ScenarioError("dt", "must be positive")
    eh = scenario.ego_history
    if eh.ndim != 2 or eh.shape != (history_steps, 5):
        raise ScenarioError("ego_history", f"expected shape ({history_steps}, 5), got {eh.shape}")
    _check_heading("ego_history", eh[:, 2])
    demo = scenario.demo
    if demo.ndim != 2 or demo.shape != (horizon_steps, 4):
        raise ScenarioError("demo", f"expected shape ({horizon_steps}, 4), got {demo.shape}")
    _check_heading("demo", demo[:, 2])
    for i, a in enumerate(scenario.agents):
        name = f"agents[{i}]"
        if a.history.shape != (history_steps, 6):
            raise ScenarioError(f"{name}.history", f"expected shape ({history_steps}, 6), got {a.history.shape}")
        if np.any(a.history[:, 4] <= 0) or np.any(a.history[:, 5] <= 0):
            raise ScenarioError(f"{name}.history", "length and width must be positive")
        _check_heading(f"{name}.history", a.history[:, 2])
        if a.future is not None:
            if a.future.shape != (horizon_steps, 3):
                raise ScenarioError(f"{name}.future", f"expected shape ({horizon_steps}, 3), got {a.future.shape}")
            _check_heading(f"{name}.future", a.future[:, 2])
    if not scenario.map.lanes:
        raise ScenarioError("map.lanes", "at least one reference lane is required")
    for i, lane in enumerate(scenario.map.lanes):
        if lane.ndim != 2 or lane.shape[1] != 2 or len(lane) < 2:
            raise ScenarioError(f"map.lanes[{i}]", "polyline needs >= 2 points")
    for i, poly in enumerate(scenario.map.obstacles):
        name = f"map.obstacles[{i}]"
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise ScenarioError(name, "polygon needs >= 3 vertices")
        if _signed_area(poly) <= 0:
            raise ScenarioError(name, "polygon must be counter-clockwise")
        e = np.roll(poly, -1, axis=0) - poly
        turns = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(turns < -1e-9):
            raise ScenarioError(name, "polygon must be convex")
    for i, light in enumerate(scenario.map.lights):
        if light.state not in LIGHT_STATES:
            raise ScenarioError(f"map.lights[{i}].state", f"unknown state {light.state!r}")
        if light.line.shape != (2, 2):
            raise ScenarioError(f"map.lights[{i}].line", "stop line needs two points")
    for name, arr in (("ego_history", eh), ("demo", demo)):
        if not np.all(np.isfinite(arr)):
            raise ScenarioError(name, "non-finite value")
    return scenario


# --------------------------------------------------------------------------- JSON

def scenario_to_dict(scenario: Scenario) -> dict:
    out = {
        "schema": SCHEMA_VERSION,
        "dt": scenario.dt,
        "ego_history": scenario.ego_history.tolist(),
        "agents": [
            {"id": a.id, "history": a.history.tolist(),
             "future": None if a.future is None else a.future.tolist()}
            for a in scenario.agents
        ],
        "map": {
            "lanes": [lane.tolist() for lane in scenario.map.lanes],
            "obstacles": [p.tolist() for p in scenario.map.obstacles],
            "lights": [{"line": l.line.tolist(), "state": l.state} for l in scenario.map.lights],
        },
        "demo": scenario.demo.tolist(),
        "ego_size": list(scenario.ego_size),
    }
    if scenario.kind is not None:
        out["kind"] = scenario.kind
    return out


def _array(obj, name, ndim):
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(name, f"not a numeric array ({exc})") from None
    if arr.ndim != ndim:
        raise ScenarioError(name, f"expected a {ndim}-d array")
    return arr


def scenario_from_dict(data: dict, history_steps: int = HISTORY_STEPS,
                       horizon_steps: int = HORIZON_STEPS) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "expected a JSON object")
    if data.get("schema") != SCHEMA_VERSION:
        raise ScenarioError("schema", f"unsupported schema {data.get('schema')!r}")
    for key in ("dt", "ego_history", "agents", "map", "demo"):
        if key not in data:
            raise ScenarioError(key, "missing")
    agents = []
    for i, a in enumerate(data["agents"]):
        if "history" not in a:
            raise ScenarioError(f"agents[{i}].history", "missing")
        fut = a.get("future")
        agents.append(AgentTrack(
            id=str(a.get("id", i)),
            history=_array(a["history"], f"agents[{i}].history", 2),
            future=None if fut is None else _array(fut, f"agents[{i}].future", 2),
        ))
    m = data["map"]
    lanes = [_array(l, f"map.lanes[{i}]", 2) for i, l in enumerate(m.get("lanes", []))]
    obstacles = [_array(p, f"map.obstacles[{i}]", 2) for i, p in enumerate(m.get("obstacles", []))]
    lights = []
    for i, l in enumerate(m.get("lights", [])):
        lights.append(TrafficLight(line=_array(l.get("line"), f"map.lights[{i}].line", 2),
                                   state=l.get("state")))
    try:
        dt = float(data["dt"])
    except (TypeError, ValueError):
        raise ScenarioError("dt", "not a number") from None
    scenario = Scenario(
        ego_history=_array(data["ego_history"], "ego_history", 2),
        agents=agents,
        map=MapContext(lanes=lanes, obstacles=obstacles, lights=lights),
        demo=_array(data["demo"], "demo", 2),
        dt=dt,
        kind=data.get("kind"),
        ego_size=tuple(float(v) for v in data.get("ego_size", (EGO_LENGTH, EGO_WIDTH))),
    )
    return validate(scenario, history_steps, horizon_steps)


def dumps_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), sort_keys=True, indent=1) + "\n"


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(scenario))


def load_scenario(path, history_steps: int = HISTORY_STEPS,
                  horizon_steps: int = HORIZON_STEPS) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("<json>", f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return scenario_from_dict(data, history_steps, horizon_steps)
    except ScenarioError as exc:
        raise ScenarioError(exc.field, f"{path}: {exc.args[0]}") from None


# --------------------------------------------------------------------------- generation

def box_polygon(cx, cy, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    local = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]) * [length, width]
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + [cx, cy]


def _arc_lane(start_straight, radius, turn, spacing=4.0, total=220.0, back=60.0):
    """Straight run from ``-back`` to ``start_straight`` then a circular arc; turn=+1 left."""
    s = np.arange(-back, total - back + 1e-9, spacing)
    pts = np.zeros((len(s), 2))
    straight = s <= start_straight
    pts[straight, 0] = s[straight]
    arc = s[~straight] - start_straight
    phi = arc / radius
    pts[~straight, 0] = start_straight + radius * np.sin(phi)
    pts[~straight, 1] = turn * radius * (1.0 - np.cos(phi))
    return pts


def _offset_polyline(pts, offset):
    """Parallel polyline at lateral ``offset`` (left positive)."""
    t = np.gradient(pts, axis=0)
    t /= np.hypot(t[:, 0], t[:, 1])[:, None]
    n = np.stack([-t[:, 1], t[:, 0]], axis=1)
    return pts + offset * n


def _frenet_track(ref: ReferenceLine, times, s0, v0, accel, d_of_t, dd_of_t):
    """Sample a Frenet motion; speed is held >= 0 under deceleration."""
    v = np.maximum(v0 + accel * times, 0.0)
    if accel < 0:
        t_stop = v0 / -accel
        tt = np.minimum(times, t_stop)
        s = s0 + v0 * tt + 0.5 * accel * tt**2
    else:
        s = s0 + v0 * times + 0.5 * accel * times**2
    d = d_of_t(times)
    dd = dd_of_t(times)
    xy = ref.to_cartesian(s, d)
    heading = wrap_angle(ref.heading(s) + np.arctan2(dd, np.maximum(v, 1e-6)))
    speed = np.hypot(v, dd)
    return xy, heading, speed


def _make_agent(ref, agent_id, s0, v0, accel, d_of_t, dd_of_t, length, width, dt):
    hist_t = dt * np.arange(-HISTORY_STEPS + 1, 1)
    fut_t = dt * np.arange(1, HORIZON_STEPS + 1)
    hxy, hh, hv = _frenet_track(ref, hist_t, s0, v0, accel, d_of_t, dd_of_t)
    fxy, fh, _ = _frenet_track(ref, fut_t, s0, v0, accel, d_of_t, dd_of_t)
    history = np.column_stack([hxy, hh, hv, np.full(HISTORY_STEPS, length), np.full(HISTORY_STEPS, width)])
    future = np.column_stack([fxy, fh])
    return AgentTrack(id=str(agent_id), history=history, future=future)


def _const(value):
    return lambda t: np.full_like(t, value, dtype=float)


def _lane_change(d_from, d_to, t_start, duration):
    """Quintic lateral blend between two offsets starting at ``t_start``."""
    def d(t):
        tau = np.clip((t - t_start) / duration, 0.0, 1.0)
        return d_from + (d_to - d_from) * (10 * tau**3 - 15 * tau**4 + 6 * tau**5)

    def dd(t):
        tau = np.clip((t - t_start) / duration, 0.0, 1.0)
        return (d_to - d_from) * (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / duration
    return d, dd


def _ego_history(ref, s0, d0, v0, dt):
    t = dt * np.arange(-HISTORY_STEPS + 1, 1)
    xy, heading, speed = _frenet_track(ref, t, s0, v0, 0.0, _const(d0), _const(0.0))
    yaw = np.zeros(HISTORY_STEPS)
    yaw[1:] = wrap_angle(np.diff(heading)) / dt
    yaw[0] = yaw[1]
    return np.column_stack([xy, heading, speed, yaw])


def demo_from_positions(xy, ego_state, dt) -> np.ndarray:
    x0, y0, h0, v0 = ego_state[:4]
    heading, speed, _, _ = kinematics_from_positions(xy, x0, y0, h0, v0, dt)
    return np.column_stack([xy, heading, speed])


def _expert(ref, ego, target_speed, target_offset, dt):
    xy = frenet_rollout(ref, ego[0], ego[1], ego[2], ego[3], [target_speed], [target_offset],
                        HORIZON_STEPS, dt)[0]
    return demo_from_positions(xy, ego, dt)


def _circles_clear(demo_xy, headings, polygons, length=EGO_LENGTH, width=EGO_WIDTH) -> bool:
    from riskmap.geometry import ego_circles, signed_distance_polygons
    if not polygons:
        return True
    poses = np.column_stack([demo_xy, headings])
    circles = ego_circles(poses, length, width)
    sd = signed_distance_polygons(circles.centers.reshape(-1, 2), polygons)
    return bool(np.all(sd - circles.radius > 0.05))


def _random_transform(rng):
    theta = rng.uniform(-math.pi, math.pi)
    offset = rng.uniform(-100.0, 100.0, size=2)
    return theta, offset


def transform_scenario(scenario: Scenario, theta: float, offset) -> Scenario:
    """Rigidly rotate by ``theta`` about the origin, then translate by ``offset``."""
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    off = np.asarray(offset, dtype=float)

    def pts(a):
        return a @ rot.T + off

    def states(a):
        a = a.copy()
        a[:, :2] = pts(a[:, :2])
        a[:, 2] = wrap_angle(a[:, 2] + theta)
        return a

    agents = [AgentTrack(a.id, states(a.history), None if a.future is None else states(a.future))
              for a in scenario.agents]
    mp = MapContext(
        lanes=[pts(l) for l in scenario.map.lanes],
        obstacles=[pts(p) for p in scenario.map.obstacles],
        lights=[TrafficLight(pts(l.line), l.state) for l in scenario.map.lights],
    )
    return Scenario(states(scenario.ego_history), agents, mp, states(scenario.demo),
                    scenario.dt, scenario.kind, scenario.ego_size)


def _background_agents(rng, refs, ego_s, ego_v, n, dt, start_id, keep_clear=None):
    """Agents that stay out of the ego's way: adjacent lanes anywhere, ego lane far ahead/behind."""
    agents = []
    for k in range(n):
        lane = int(rng.integers(len(refs)))
        ref = refs[lane]
        if lane == 0:
            if rng.random() < 0.5:
                s0 = ego_s + rng.uniform(45.0, 80.0)
                v = ego_v + rng.uniform(0.5, 3.0)
            else:
                s0 = ego_s - rng.uniform(20.0, 40.0)
                v = max(ego_v - rng.uniform(0.5, 3.0), 0.0)
        else:
            s0 = ego_s + rng.uniform(-30.0, 60.0)
            v = rng.uniform(3.0, 14.0)
            if keep_clear is not None and keep_clear[0] - 15.0 < s0 < keep_clear[1] + 15.0:
                s0 = keep_clear[1] + rng.uniform(20.0, 40.0)
                v = max(v, ego_v + 2.0)
        accel = rng.choice([0.0, 0.0, rng.uniform(-1.5, 1.0)])
        agents.append(_make_agent(ref, start_id + k, s0, v, accel, _const(rng.uniform(-0.3, 0.3)),
                                  _const(0.0), rng.uniform(4.0, 5.2), rng.uniform(1.7, 2.1), dt))
    return agents


def _generate_one(kind: str, rng: np.random.Generator, dt: float = DT) -> Scenario:
    lights: list[TrafficLight] = []
    obstacles: list[np.ndarray] = []
    agents: list[AgentTrack] = []
    d0 = rng.uniform(-0.3, 0.3)
    if kind == "curve":
        radius = rng.uniform(50.0, 150.0)
        turn = rng.choice([-1.0, 1.0])
        base = _arc_lane(rng.uniform(0.0, 15.0), radius, turn)
        lanes = [base]
        if rng.random() < 0.5:
            lanes.append(_offset_polyline(base, LANE_WIDTH))
        v0 = rng.uniform(6.0, 13.0)
    else:
        base = np.array([[-60.0, 0.0], [160.0, 0.0]])
        lanes = [base]
        if kind in ("cut_in", "blocked_lane") or rng.random() < 0.5:
            lanes.append(base + [0.0, LANE_WIDTH])
        v0 = rng.uniform(5.0, 12.0)
    refs = [ReferenceLine(l) for l in lanes]
    ego_ref = refs[0]
    ego_s = 60.0
    ego_history = _ego_history(ego_ref, ego_s, d0, v0, dt)
    ego = ego_history[-1]
    next_id = 0

    if kind == "straight":
        target_v = float(np.clip(v0 + rng.normal(0.0, 0.5), 0.0, 15.0))
        demo = _expert(ego_ref, ego, target_v, 0.0, dt)
        if rng.random() < 0.3:
            s_line = ego_s + rng.uniform(15.0, 60.0)
            lights.append(_stop_line(ego_ref, s_line, len(lanes), "green"))
        agents = _background_agents(rng, refs, ego_s, v0, int(rng.integers(0, 5)), dt, next_id)
    elif kind == "curve":
        target_v = float(min(v0, math.sqrt(2.0 * radius)) + rng.normal(0.0, 0.3))
        demo = _expert(ego_ref, ego, max(target_v, 0.0), 0.0, dt)
        agents = _background_agents(rng, refs, ego_s, v0, int(rng.integers(0, 4)), dt, next_id)
    elif kind == "cut_in":
        va = max(v0 - rng.uniform(1.0, 3.0), 2.0)
        gap = rng.uniform(12.0, 20.0)
        d_fn, dd_fn = _lane_change(LANE_WIDTH, 0.0, -0.5, 3.0)
        agents.append(_make_agent(refs[1], next_id, ego_s + gap, va, 0.0, d_fn, dd_fn,
                                  rng.uniform(4.2, 5.0), rng.uniform(1.7, 2.0), dt))
        next_id += 1
        demo = _expert(ego_ref, ego, max(va - 1.0, 0.0), 0.0, dt)
        agents += _background_agents(rng, refs[:1], ego_s, v0, int(rng.integers(0, 3)), dt, next_id)
    elif kind == "blocked_lane":
        for _ in range(20):
            s_obs = ego_s + 2.0 * v0 + rng.uniform(6.0, 15.0)
            p, t, _ = ego_ref.evaluate(np.array([s_obs]))
            heading = math.atan2(t[0, 1], t[0, 0])
            poly = box_polygon(p[0, 0], p[0, 1], heading, rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.2))
            demo = _expert(ego_ref, ego, v0, LANE_WIDTH, dt)
            if _circles_clear(demo[:, :2], demo[:, 2], [poly]):
                break
            v0 = max(v0 - 0.5, 3.0)
            ego_history = _ego_history(ego_ref, ego_s, d0, v0, dt)
            ego = ego_history[-1]
        obstacles.append(poly)
        agents = _background_agents(rng, refs, ego_s, v0, int(rng.integers(0, 3)), dt, next_id,
                                    keep_clear=(ego_s, s_obs))
    elif kind == "red_light":
        state = "red" if rng.random() < 0.8 else "yellow"
        stop_center = ego_s + 1.5 * v0
        s_line = stop_center + EGO_LENGTH / 2 + rng.uniform(1.0, 4.0)
        lights.append(_stop_line(ego_ref, s_line, len(lanes), state))
        demo = _expert(ego_ref, ego, 0.0, 0.0, dt)
        agents = _background_agents(rng, refs, ego_s, v0, int(rng.integers(0, 3)), dt, next_id)
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")

    scenario = Scenario(ego_history, agents, MapContext(lanes, obstacles, lights), demo, dt, kind)
    theta, offset = _random_transform(rng)
    return validate(transform_scenario(scenario, theta, offset))


def _stop_line(ref: ReferenceLine, s_line: float, n_lanes: int, state: str) -> TrafficLight:
    p, t, _ = ref.evaluate(np.array([s_line]))
    n = np.array([-t[0, 1], t[0, 0]])
    right = p[0] - n * (LANE_WIDTH / 2)
    left = p[0] + n * (LANE_WIDTH / 2 + LANE_WIDTH * (n_lanes - 1))
    return TrafficLight(np.array([right, left]), state)


def generate_scenarios(kind: str, count: int, seed: int) -> list[Scenario]:
    """Deterministic synthetic scenarios with expert demonstrations."""
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    code = KINDS.index(kind)
    return [_generate_one(kind, np.random.default_rng([seed, code, i])) for i in range(count)]


def generate_mixed(count_per_kind: int, seed: int, kinds=KINDS) -> list[Scenario]:
    out = []
    for kind in kinds:
        out += generate_scenarios(kind, count_per_kind, seed)
    return out
