import numpy as np
import pytest

from riskmap.scenario import (
    DT, EGO_LENGTH, EGO_WIDTH, AgentTrack, MapContext, Scenario, TrafficLight, box_polygon,
    generate_mixed,
)


def straight_scenario(speed=10.0, y0=0.0, agents=(), obstacles=(), lights=(), demo_speed=None):
    """Ego driving along +x on a single straight lane through the origin."""
    lane = np.column_stack([np.linspace(-100.0, 300.0, 101), np.zeros(101)])
    th = np.arange(-14, 1) * DT
    hist = np.column_stack([speed * th, np.full(15, y0), np.zeros(15), np.full(15, speed), np.zeros(15)])
    v = speed if demo_speed is None else demo_speed
    t = np.arange(1, 31) * DT
    demo = np.column_stack([v * t, np.full(30, y0), np.zeros(30), np.full(30, v)])
    return Scenario(hist, list(agents), MapContext([lane], list(obstacles), list(lights)), demo, DT,
                    "straight", (EGO_LENGTH, EGO_WIDTH))


def agent_along_x(aid, x0, y0, speed, length=4.5, width=1.9, heading=0.0):
    th = np.arange(-14, 1) * DT
    c, s = np.cos(heading), np.sin(heading)
    hist = np.column_stack([x0 + c * speed * th, y0 + s * speed * th, np.full(15, heading),
                            np.full(15, speed), np.full(15, length), np.full(15, width)])
    t = np.arange(1, 31) * DT
    fut = np.column_stack([x0 + c * speed * t, y0 + s * speed * t, np.full(30, heading)])
    return AgentTrack(aid, hist, fut)


def parked_box(x, y, length=4.5, width=2.0):
    return box_polygon(x, y, 0.0, length, width)


def red_line(x, state="red"):
    return TrafficLight(np.array([[x, -5.0], [x, 5.0]]), state)


@pytest.fixture(scope="session")
def small_set():
    return generate_mixed(2, 11)


def toy_stage2(seed, hidden=4):
    """Two-trajectory lattice on a generated scene, with randomised small heads."""
    from riskmap.encoder import RiskHeads
    from riskmap.predictor import PredictorModel
    from riskmap.scenario import generate_scenarios
    from riskmap.training import build_stage2_sample

    rng = np.random.default_rng(seed)
    kind = ("blocked_lane", "red_light", "cut_in")[seed % 3]
    s = generate_scenarios(kind, 1, seed)[0]
    for light in s.map.lights:
        light.state = "red"
    v0 = s.ego_state[3]
    sample = build_stage2_sample(s, PredictorModel.init(rng), speeds=[v0 * 0.5, v0 * 1.1],
                                 offsets=[rng.uniform(-1.0, 1.0)])
    heads = RiskHeads.init(rng, hidden=hidden, tv=bool(seed % 2 == 0))
    for name, p in heads.parameters().items():
        if name.split(".")[1] in ("W2", "b2"):
            p += rng.normal(0.0, 0.05, size=p.shape)
    return sample, heads
