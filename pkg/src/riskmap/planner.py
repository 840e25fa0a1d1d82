"""Lattice sampling planner with a learned risk/cost model."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from riskmap.encoder import RiskHeads, RiskParams, extract_features, forward_heads
from riskmap.frenet import ReferenceLine, frenet_rollout, kinematics_from_positions
from riskmap.predictor import PredictorModel, SeqMvnPrediction, predict
from riskmap.riskfield import map_risk, riskmap_inputs

V_MAX = 15.0
LATERAL_RANGE = 3.0
OFF_MAP_DISTANCE = 50.0


class PlannerError(ValueError):
    pass


@dataclass
class TrajectorySample:
    """T future states (x, y, heading, speed, accel, yaw_rate) after ``origin``."""
    states: np.ndarray               # [T, 6]
    origin: np.ndarray               # ego state (x, y, heading, speed)
    target_speed: float = float("nan")
    lateral_offset: float = float("nan")

    @property
    def xy(self):
        return self.states[:, :2]

    @property
    def poses(self):
        return self.states[:, :3]

    @property
    def speed(self):
        return self.states[:, 3]

    @property
    def accel(self):
        return self.states[:, 4]

    @property
    def yaw_rate(self):
        return self.states[:, 5]


class TrajectoryBatch:
    """Column-oriented set of samples sharing the horizon; indexes to TrajectorySample."""

    def __init__(self, states, origin, target_speeds=None, lateral_offsets=None):
        self.states = np.asarray(states, dtype=float)    # [N, T, 6]
        self.origin = np.asarray(origin, dtype=float)
        n = len(self.states)
        self.target_speeds = np.full(n, np.nan) if target_speeds is None else np.asarray(target_speeds, float)
        self.lateral_offsets = np.full(n, np.nan) if lateral_offsets is None else np.asarray(lateral_offsets, float)

    @classmethod
    def from_positions(cls, xy, origin, dt, target_speeds=None, lateral_offsets=None):
        x0, y0, h0, v0 = origin[:4]
        heading, speed, accel, yaw = kinematics_from_positions(xy, x0, y0, h0, v0, dt)
        states = np.concatenate([xy, np.stack([heading, speed, accel, yaw], axis=-1)], axis=-1)
        return cls(states, origin[:4], target_speeds, lateral_offsets)

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        return cls(np.stack([s.states for s in samples]), samples[0].origin,
                   [s.target_speed for s in samples], [s.lateral_offset for s in samples])

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return TrajectoryBatch(self.states[i], self.origin, self.target_speeds[i], self.lateral_offsets[i])
        return TrajectorySample(self.states[i], self.origin, float(self.target_speeds[i]),
                                float(self.lateral_offsets[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def xy(self):
        return self.states[..., :2]

    @property
    def poses(self):
        return self.states[..., :3]

    @property
    def speed(self):
        return self.states[..., 3]


@dataclass
class CostBreakdown:
    risk_ref: float
    risk_sdf: float
    risk_tl: float
    risk_col: float
    c_smooth: np.ndarray   # (w_a * a, w_s * s)
    d_v: float             # w_d * velocity term
    total: float


@dataclass
class CostTable:
    """Per-trajectory cost parts, arrays of length N."""
    risk: np.ndarray       # [N, 4] time-summed (and channel-weighted) risk
    c_smooth: np.ndarray   # [N, 2]
    d_v: np.ndarray        # [N]

    @property
    def total(self) -> np.ndarray:
        return self.risk.sum(axis=1) + self.c_smooth.sum(axis=1) + self.d_v

    def __len__(self):
        return len(self.d_v)

    def __getitem__(self, i) -> CostBreakdown:
        r = self.risk[i]
        total = r.sum() + self.c_smooth[i].sum() + self.d_v[i]
        return CostBreakdown(float(r[0]), float(r[1]), float(r[2]), float(r[3]), self.c_smooth[i].copy(),
                             float(self.d_v[i]), float(total))

    def rows(self) -> list[CostBreakdown]:
        total = self.total.tolist()
        risk, smooth, dv = self.risk.tolist(), self.c_smooth, self.d_v.tolist()
        return [CostBreakdown(*risk[i], smooth[i].copy(), dv[i], total[i]) for i in range(len(self))]


def lattice_axes(count: int):
    n = math.isqrt(count)
    if count < 1 or n * n != count:
        raise PlannerError(f"non-square count {count}: the lattice is a speed x offset grid")
    if n == 1:
        return np.array([V_MAX / 2]), np.array([0.0])
    return np.linspace(0.0, V_MAX, n), np.linspace(-LATERAL_RANGE, LATERAL_RANGE, n)


def reference_for(ego_state, map_context) -> ReferenceLine:
    k, dist = map_context.nearest_lane(ego_state[:2])
    if dist > OFF_MAP_DISTANCE:
        raise PlannerError(f"off_map: ego is {dist:.1f} m from the nearest lane")
    return map_context.reference_lines[k]


def sample_lattice(ego_state, reference, count: int, horizon: int = 30, dt: float = 0.1,
                   speeds=None, offsets=None) -> TrajectoryBatch:
    """Speed x lateral-offset grid of Frenet polynomial rollouts from the ego state.

    ``reference`` is a ReferenceLine or a polyline. ``speeds``/``offsets``
    override the uniform grid axes (used for nested-grid comparisons).
    """
    if not isinstance(reference, ReferenceLine):
        reference = ReferenceLine(reference)
    if speeds is None or offsets is None:
        speeds, offsets = lattice_axes(count)
    _, dist = reference.project([ego_state[:2]])
    if abs(dist[0]) > OFF_MAP_DISTANCE:
        raise PlannerError(f"off_map: ego is {abs(dist[0]):.1f} m from the reference lane")
    x, y, h, v = ego_state[:4]
    xy = frenet_rollout(reference, x, y, h, v, speeds, offsets, horizon, dt)
    return TrajectoryBatch.from_positions(xy, np.asarray(ego_state[:4], float), dt,
                                          np.repeat(speeds, len(offsets)), np.tile(offsets, len(speeds)))


def smoothness_features(traj) -> np.ndarray:
    """(mean accel^2, mean yaw_rate^2) per trajectory; shape [..., 2]."""
    states = traj.states
    return np.stack([np.mean(states[..., 4] ** 2, axis=-1), np.mean(states[..., 5] ** 2, axis=-1)], axis=-1)


def smoothness_cost(traj) -> tuple[float, float]:
    a, s = smoothness_features(traj)
    return float(a), float(s)


def velocity_term(traj, v_bar) -> float:
    speed = traj.speed if hasattr(traj, "speed") else np.asarray(traj, dtype=float)
    v_bar = np.asarray(v_bar, dtype=float)
    if v_bar.shape[-1] != speed.shape[-1]:
        raise PlannerError("v_bar length must equal the horizon")
    return np.mean((v_bar - speed) ** 2, axis=-1)


def cost_table(riskmap, smooth, speeds, params: RiskParams) -> CostTable:
    """Vectorised costs from risk [N,T,4], smoothness [N,2] and speeds [N,T]."""
    risk = riskmap.sum(axis=-2)
    if params.w_channels is not None:
        risk = risk * params.w_channels
    c_smooth = smooth * params.w_smooth
    d_v = params.w_d * velocity_term(speeds, params.v_bar)
    return CostTable(risk, c_smooth, np.asarray(d_v, dtype=float))


def trajectory_cost(traj: TrajectorySample, riskmap_row, params: RiskParams) -> CostBreakdown:
    smooth = smoothness_features(traj)[None]
    table = cost_table(np.asarray(riskmap_row)[None], smooth, traj.speed[None], params)
    return table[0]


def select(costs) -> int:
    """Index of the minimum total cost; ties go to the lowest index."""
    if isinstance(costs, CostTable):
        totals = costs.total
    else:
        costs = list(costs)
        if not costs:
            raise PlannerError("select: empty cost list")
        totals = np.array([c.total if isinstance(c, CostBreakdown) else float(c) for c in costs])
    if len(totals) == 0:
        raise PlannerError("select: empty cost list")
    return int(np.argmin(totals))


@dataclass
class PlanResult:
    trajectory: TrajectorySample
    index: int
    costs: CostTable
    samples: TrajectoryBatch
    riskmap: np.ndarray
    prediction: SeqMvnPrediction
    params: RiskParams
    wall_time_ms: float


def plan(scenario, predictor: PredictorModel, heads: RiskHeads, count: int = 400,
         col_mode: str = "integrated") -> PlanResult:
    """predict -> sample_lattice -> risk map -> costs -> argmin."""
    start = time.perf_counter()
    prediction = predict(scenario, predictor)
    params = forward_heads(extract_features(scenario), heads)
    ego = scenario.ego_state
    ref = reference_for(ego, scenario.map)
    samples = sample_lattice(ego, ref, count, scenario.horizon, scenario.dt)
    D, col = riskmap_inputs(samples, scenario, prediction, col_mode)
    riskmap = np.concatenate([map_risk(D, params.beta, params.lam), col[..., None]], axis=-1)
    table = cost_table(riskmap, smoothness_features(samples), samples.speed, params)
    index = select(table)
    elapsed = (time.perf_counter() - start) * 1e3
    return PlanResult(samples[index], index, table, samples, riskmap, prediction, params, elapsed)
