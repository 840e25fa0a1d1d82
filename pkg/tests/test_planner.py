import math
import time

import numpy as np
import pytest

from riskmap.encoder import RiskHeads, RiskParams
from riskmap.frenet import kinematics_from_positions
from riskmap.planner import (
    CostBreakdown, PlannerError, TrajectoryBatch, TrajectorySample, cost_table, plan, reference_for,
    sample_lattice, select, smoothness_cost, trajectory_cost, velocity_term,
)
from riskmap.predictor import PredictorModel
from riskmap.scenario import generate_scenarios

from conftest import agent_along_x, straight_scenario

T = 30
DT = 0.1


def sample_from_xy(xy, origin):
    b = TrajectoryBatch.from_positions(xy[None], np.asarray(origin, float), DT)
    return b[0]


def params(beta=1.0, lam=0.0, w_smooth=(1.0, 1.0), w_d=1.0, v_bar=10.0):
    return RiskParams(np.full((3, 1), beta), np.full((3, 1), lam), np.asarray(w_smooth, float), w_d,
                      np.full(T, v_bar))


@pytest.mark.parametrize("count", [100, 400, 900])
def test_lattice_sizes(count):
    s = straight_scenario()
    b = sample_lattice(s.ego_state, reference_for(s.ego_state, s.map), count)
    assert len(b) == count and b.states.shape == (count, T, 6)


def test_non_square_count_rejected():
    s = straight_scenario()
    with pytest.raises(PlannerError, match="non-square"):
        sample_lattice(s.ego_state, s.map.lanes[0], 401)


def test_off_map_rejected():
    s = straight_scenario()
    with pytest.raises(PlannerError, match="off_map"):
        sample_lattice(np.array([0.0, 80.0, 0.0, 5.0]), s.map.lanes[0], 100)


def test_stationary_sample():
    s = straight_scenario()
    ego = np.array([3.0, 0.0, 0.0, 0.0])
    b = sample_lattice(ego, s.map.lanes[0], 1, speeds=[0.0], offsets=[0.0])
    assert np.allclose(b.xy[0], [3.0, 0.0]) and np.allclose(b.speed[0], 0.0)


@pytest.mark.parametrize("kind", ["straight", "curve", "blocked_lane"])
def test_samples_are_kinematically_consistent(kind):
    s = generate_scenarios(kind, 1, 0)[0]
    ego = s.ego_state
    b = sample_lattice(ego, reference_for(ego, s.map), 100)
    assert np.allclose(b.xy[:, 0], b.xy[0, 0], atol=2.0)
    h, v, a, w = kinematics_from_positions(b.xy, *ego[:4], DT)
    assert np.max(np.abs(v - b.speed)) < 1e-6
    assert np.max(np.abs(a - b.states[..., 4])) < 1e-6
    assert np.max(np.abs(w - b.states[..., 5])) < 1e-6
    # first step moves from the ego position at the ego speed scale
    step0 = np.hypot(*(b.xy[:, 0] - ego[:2]).T)
    assert np.all(step0 < (ego[3] + 2.0) * DT)


def test_smoothness_examples():
    t = np.arange(1, T + 1) * DT
    assert smoothness_cost(sample_from_xy(np.column_stack([8 * t, 0 * t]), [0, 0, 0, 8])) == pytest.approx((0, 0))
    # positions s(t) = 5t + t^2/2: backward-difference speeds grow by exactly dt per step
    xy = np.column_stack([5 * t + 0.5 * t * t, 0 * t])
    v0 = 5.0 - 0.5 * DT
    a, s = smoothness_cost(sample_from_xy(xy, [0, 0, 0, v0]))
    assert a == pytest.approx(1.0) and s == pytest.approx(0.0, abs=1e-20)
    v, R = 10.0, 50.0
    ang = v * t / R
    xy = np.column_stack([R * np.sin(ang), R * (1 - np.cos(ang))])
    traj = sample_from_xy(xy, [0, 0, -v * DT / (2 * R), 2 * R * math.sin(v * DT / (2 * R)) / DT])
    assert traj.yaw_rate == pytest.approx(np.full(T, v / R), rel=1e-9)
    assert smoothness_cost(traj)[1] == pytest.approx((v / R) ** 2, rel=1e-6)


def test_velocity_term_examples():
    assert velocity_term(np.full(T, 10.0), np.full(T, 10.0)) == 0.0
    assert velocity_term(np.full(T, 8.0), np.full(T, 10.0)) == pytest.approx(4.0)
    a, b = np.linspace(0, 5, T), np.linspace(3, 1, T)
    assert velocity_term(a, b) == velocity_term(b, a)
    with pytest.raises(PlannerError):
        velocity_term(np.zeros(T), np.zeros(T - 1))


def const_sample(v=10.0):
    t = np.arange(1, T + 1) * DT
    return sample_from_xy(np.column_stack([v * t, 0 * t]), [0, 0, 0, v])


def test_trajectory_cost_examples():
    traj = const_sample()
    zero = np.zeros((T, 4))
    c = trajectory_cost(traj, zero, params())
    assert c.total == pytest.approx(0.0, abs=1e-20)
    rng = np.random.default_rng(0)
    row = rng.uniform(0, 1, (T, 4))
    p = params(w_d=0.7, v_bar=12.0)
    c1 = trajectory_cost(traj, row, p)
    p.w_d = 1.4
    c2 = trajectory_cost(traj, row, p)
    assert c2.d_v == pytest.approx(2 * c1.d_v)
    assert c2.total - c1.total == pytest.approx(c1.d_v)
    assert c1.total == pytest.approx(row.sum() + 0.7 * 4.0)
    assert c1.total == pytest.approx(c1.risk_ref + c1.risk_sdf + c1.risk_tl + c1.risk_col + c1.c_smooth.sum() + c1.d_v)


def test_cost_table_recomposition():
    rng = np.random.default_rng(3)
    rm = rng.uniform(0, 2, (7, T, 4))
    sm = rng.uniform(0, 1, (7, 2))
    sp = rng.uniform(0, 15, (7, T))
    p = params(w_smooth=(0.3, 2.0), w_d=0.5, v_bar=9.0)
    tab = cost_table(rm, sm, sp, p)
    want = rm.sum(axis=(1, 2)) + sm @ p.w_smooth + 0.5 * np.mean((9.0 - sp) ** 2, axis=1)
    assert np.allclose(tab.total, want)


def test_select_examples():
    assert select([3.0, 1.0, 2.0]) == 1
    assert select([2.0, 2.0, 2.0]) == 0
    totals = np.random.default_rng(0).normal(size=20)
    k = select(totals)
    assert select(totals + 5.0) == k
    assert select(np.exp(totals)) == k and select(np.arctan(3 * totals)) == k
    with pytest.raises(PlannerError):
        select([])


@pytest.fixture(scope="module")
def models():
    return PredictorModel.init(np.random.default_rng(0)), RiskHeads.init(np.random.default_rng(1))


def test_plan_is_deterministic(models):
    s = generate_scenarios("cut_in", 1, 2)[0]
    a = plan(s, *models, 100)
    b = plan(s, *models, 100)
    assert a.index == b.index and np.array_equal(a.costs.total, b.costs.total)
    assert a.trajectory.states.shape == (T, 6)


def test_nested_grid_never_costlier(models):
    s = generate_scenarios("blocked_lane", 1, 3)[0]
    from riskmap.encoder import extract_features, forward_heads
    from riskmap.planner import smoothness_features
    from riskmap.predictor import predict
    from riskmap.riskfield import build_riskmap
    pred = predict(s, models[0])
    p = forward_heads(extract_features(s), models[1])
    ref = reference_for(s.ego_state, s.map)

    def best(speeds, offsets):
        b = sample_lattice(s.ego_state, ref, len(speeds) * len(offsets), speeds=speeds, offsets=offsets)
        tab = cost_table(build_riskmap(b, s, pred, p), smoothness_features(b), b.speed, p)
        return tab.total[select(tab)]
    coarse = best(np.linspace(0, 15, 6), np.linspace(-3, 3, 6))
    fine = best(np.linspace(0, 15, 11), np.linspace(-3, 3, 11))
    assert fine <= coarse


def test_no_agents_zero_collision_channel(models):
    r = plan(straight_scenario(), *models, 100)
    assert np.all(r.riskmap[..., 3] == 0.0)


def test_plan_runtime_envelope(models):
    s = straight_scenario(agents=[agent_along_x(f"a{i}", 10.0 * i - 15, 3.5 * (i % 2), 9.0) for i in range(5)])
    s.map.lanes.append(s.map.lanes[0] + [0.0, 3.5])
    plan(s, *models, 400)
    times = [plan(s, *models, 400).wall_time_ms for _ in range(15)]
    assert np.median(times) < 48.0
