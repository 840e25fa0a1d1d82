"""Planning metrics: displacement errors, collision rate and jerk."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from riskmap.geometry import ego_circles, signed_distance_polygon
from riskmap.scenario import box_polygon

COLUMNS = ("ade", "fde_lat", "fde_lon", "col_1s", "col_2s", "col_3s", "jerk")
HORIZONS = (1.0, 2.0, 3.0)


def _pair(plan, demo):
    plan = np.asarray(plan, dtype=float)[..., :2]
    demo = np.asarray(demo, dtype=float)[..., :2]
    if plan.shape != demo.shape:
        raise ValueError(f"plan {plan.shape} and demo {demo.shape} lengths differ")
    return plan, demo


def ade(plan, demo) -> float:
    plan, demo = _pair(plan, demo)
    return float(np.mean(np.hypot(*(plan - demo).T)))


def fde_lat_lon(plan, demo, demo_heading=None) -> tuple[float, float]:
    """|lateral|, |longitudinal| final offset in the demo's final heading frame.

    The heading comes from column 2 of ``demo`` when present, otherwise from
    its last displacement (or ``demo_heading``).
    """
    full = np.asarray(demo, dtype=float)
    plan, demo = _pair(plan, demo)
    if demo_heading is None:
        if full.shape[-1] > 2:
            demo_heading = full[-1, 2]
        else:
            d = demo[-1] - demo[-2]
            demo_heading = math.atan2(d[1], d[0])
    off = plan[-1] - demo[-1]
    c, s = math.cos(demo_heading), math.sin(demo_heading)
    lon = off[0] * c + off[1] * s
    lat = -off[0] * s + off[1] * c
    return abs(float(lat)), abs(float(lon))


def jerk(speeds, dt) -> float:
    """Mean |second difference of speed| / dt^2."""
    v = np.asarray(speeds, dtype=float)
    if v.shape[-1] < 4:
        raise ValueError(f"jerk needs at least 4 samples, got {v.shape[-1]}")
    return float(np.mean(np.abs(np.diff(v, n=2, axis=-1))) / dt**2)


def min_clearance(poses, scenario, steps=None) -> np.ndarray:
    """Per-step minimum (signed distance - circle radius) to true agent boxes and obstacles.

    ``poses`` is [T, 3]; agent boxes come from ground-truth futures at the
    same step. Returns +inf where nothing is present.
    """
    poses = np.asarray(poses, dtype=float)[:, :3]
    if steps is not None:
        poses = poses[:steps]
    length, width = scenario.ego_size
    circles = ego_circles(poses, length, width)
    T = len(poses)
    best = np.full(T, np.inf)
    for poly in scenario.map.obstacles:
        sd = signed_distance_polygon(circles.centers, poly).min(axis=-1)
        best = np.minimum(best, sd - circles.radius)
    for agent in scenario.agents:
        if agent.future is None:
            continue
        fut = agent.future[:T]
        for t in range(len(fut)):
            box = box_polygon(fut[t, 0], fut[t, 1], fut[t, 2], agent.length, agent.width)
            sd = signed_distance_polygon(circles.centers[t], box).min()
            best[t] = min(best[t], sd - circles.radius)
    return best


def collides(poses, scenario, horizon: float) -> bool:
    steps = int(math.floor(horizon / scenario.dt + 1e-9))
    return bool(np.any(min_clearance(poses, scenario, steps) < 0.0))


def collision_rate(plans, scenarios, horizon: float) -> float:
    """Fraction of scenarios whose plan touches a true agent footprint or obstacle within ``horizon`` s."""
    plans = list(plans)
    scenarios = list(scenarios)
    if not scenarios:
        return 0.0
    hits = [collides(p, s, horizon) for p, s in zip(plans, scenarios)]
    return float(np.mean(hits))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    count: int | None = None

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {c: 0.0 for c in COLUMNS}
        return {c: float(np.mean([r[c] for r in self.rows])) for c in COLUMNS}

    def to_json(self) -> str:
        return json.dumps({"count": self.count, "aggregate": self.aggregate, "rows": self.rows},
                          sort_keys=True, indent=1) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("scenario",) + COLUMNS)
            for r in self.rows:
                w.writerow([r["scenario"]] + [repr(float(r[c])) for c in COLUMNS])
            agg = self.aggregate
            w.writerow(["mean"] + [repr(agg[c]) for c in COLUMNS])


def evaluate_row(name, states, scenario) -> dict:
    """Metrics of one planned trajectory ``states`` [T, >=4] against the scenario demo."""
    states = np.asarray(states, dtype=float)
    demo = scenario.demo
    lat, lon = fde_lat_lon(states[:, :2], demo[:, :2], demo[-1, 2])
    row = {"scenario": name, "ade": ade(states, demo), "fde_lat": lat, "fde_lon": lon}
    clear = min_clearance(states[:, :3], scenario)
    for h in HORIZONS:
        steps = int(math.floor(h / scenario.dt + 1e-9))
        row[f"col_{int(h)}s"] = float(np.any(clear[:steps] < 0.0))
    row["jerk"] = jerk(states[:, 3], scenario.dt)
    return row
