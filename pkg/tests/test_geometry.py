import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskmap.geometry import (
    SENTINEL, EgoCircles, GeometryError, distance_to_reference, distance_to_traffic_light, ego_circles,
    measure, sdf_static, signed_distance_polygon,
)
from riskmap.scenario import MapContext, TrafficLight, generate_scenarios, transform_scenario

from conftest import parked_box

BOX = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])


def circle(x, y, r):
    return EgoCircles(np.array([[[x, y]]]), r)


def test_square_footprint_is_one_centred_circle():
    c = ego_circles(np.array([2.0, 3.0, 0.7]), 2.0, 2.0)
    assert c.centers.shape == (1, 2)
    assert np.allclose(c.centers[0], [2.0, 3.0])


def test_default_ego_has_three_covering_circles():
    pose = np.array([1.0, -2.0, 0.4])
    L, W = 4.8, 1.8
    c = ego_circles(pose, L, W)
    assert c.centers.shape == (3, 2)
    ch, sh = math.cos(pose[2]), math.sin(pose[2])
    for sx in (-1, 1):
        for sy in (-1, 1):
            lx, ly = sx * L / 2, sy * W / 2
            corner = pose[:2] + [lx * ch - ly * sh, lx * sh + ly * ch]
            assert np.min(np.hypot(*(c.centers - corner).T)) <= c.radius + 1e-12


@given(st.floats(0.5, 8.0), st.floats(0.5, 3.0))
def test_circles_cover_any_rectangle(L, W):
    c = ego_circles(np.zeros(3), L, W)
    xs = np.linspace(-L / 2, L / 2, 21)
    ys = np.linspace(-W / 2, W / 2, 7)
    pts = np.array([[x, y] for x in xs for y in ys])
    d = np.hypot(pts[:, None, 0] - c.centers[None, :, 0], pts[:, None, 1] - c.centers[None, :, 1])
    assert np.all(d.min(axis=1) <= c.radius + 1e-9)


def test_circles_move_rigidly():
    a = ego_circles(np.array([0.0, 0.0, 0.0]), 4.8, 1.8)
    b = ego_circles(np.array([0.0, 0.0, 0.9]), 4.8, 1.8)
    rot = np.array([[math.cos(0.9), -math.sin(0.9)], [math.sin(0.9), math.cos(0.9)]])
    assert np.allclose(a.centers @ rot.T, b.centers)


def test_bad_dimensions_rejected():
    with pytest.raises(GeometryError):
        ego_circles(np.zeros(3), 0.0, 1.0)


def test_reference_distance_examples():
    lane = np.array([[0.0, 0.0], [10.0, 0.0]])
    assert distance_to_reference(circle(1.0, 2.0, 1.0), [lane])[0] == pytest.approx(1.0)
    assert distance_to_reference(circle(5.0, 0.0, 0.7), [lane])[0] == pytest.approx(-0.7)
    far = np.array([[0.0, 5.0], [10.0, 5.0]])
    assert distance_to_reference(circle(1.0, 2.0, 1.0), [far, lane])[0] == pytest.approx(1.0)
    with pytest.raises(GeometryError, match="no_reference"):
        distance_to_reference(circle(0, 0, 1), [])


def test_sdf_examples():
    assert sdf_static(circle(7.0, 2.0, 0.5), [BOX])[0] == pytest.approx(2.5)
    assert sdf_static(circle(1.0, 2.0, 0.5), [BOX])[0] == pytest.approx(-1.5)
    assert sdf_static(circle(1.0, 2.0, 0.5), [])[0] == SENTINEL


def test_sdf_boundary_value_is_minus_radius():
    for p in ([4.0, 2.0], [2.0, 0.0], [0.0, 0.0]):
        assert sdf_static(circle(*p, 0.3), [BOX])[0] == pytest.approx(-0.3)
    eps = 1e-7
    assert signed_distance_polygon(np.array([4.0 + eps, 2.0]), BOX) > 0
    assert signed_distance_polygon(np.array([4.0 - eps, 2.0]), BOX) < 0


def test_traffic_light_examples():
    line = np.array([[10.0, -3.0], [10.0, 3.0]])
    c = circle(0.0, 0.0, 1.0)
    assert distance_to_traffic_light(c, np.zeros(1), [TrafficLight(line, "red")])[0] == pytest.approx(9.0)
    assert distance_to_traffic_light(c, np.zeros(1), [TrafficLight(line, "green")])[0] == SENTINEL
    past = circle(11.0, 0.0, 1.0)
    assert distance_to_traffic_light(past, np.zeros(1), [TrafficLight(line, "yellow")])[0] == pytest.approx(-2.0)


def test_measure_composition_and_shape():
    lane = np.array([[0.0, 0.0], [100.0, 0.0]])
    m = MapContext([lane])
    poses = np.zeros((1, 30, 3))
    poses[0, :, 0] = np.linspace(5, 40, 30)
    poses[0, :, 1] = 0.5
    D = measure(poses, m, 4.8, 1.8)
    assert D.shape == (1, 30, 3)
    assert np.allclose(D[0, :, 0], 0.5 - 0.9 * math.sqrt(2))
    assert np.all(D[0, :, 1:] == SENTINEL)
    big = np.repeat(poses, 400, axis=0)
    assert measure(big, m, 4.8, 1.8).shape == (400, 30, 3)


def test_measure_rows_follow_permutation():
    s = generate_scenarios("blocked_lane", 1, 4)[0]
    rng = np.random.default_rng(0)
    poses = np.concatenate([s.demo[None, :, :3] + rng.normal(0, 1, (1, 30, 3)) for _ in range(6)])
    perm = rng.permutation(6)
    D = measure(poses, s.map, 4.8, 1.8)
    assert np.array_equal(measure(poses[perm], s.map, 4.8, 1.8), D[perm])


def test_measure_invariant_under_rigid_transform():
    s = generate_scenarios("red_light", 1, 2)[0]
    s.map.lights[0].state = "red"
    s.map.obstacles.append(parked_box(*(s.demo[20, :2] + [0.0, 6.0])))
    theta, off = 0.8, np.array([12.0, -40.0])
    t = transform_scenario(s, theta, off)
    D = measure(s.demo[None, :, :3], s.map, 4.8, 1.8)
    Dt = measure(t.demo[None, :, :3], t.map, 4.8, 1.8)
    assert np.max(np.abs(D - Dt)) < 1e-9


@settings(max_examples=50)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-1, 1), st.floats(-1, 1))
def test_distances_are_one_lipschitz(x, y, dx, dy):
    lane = np.array([[0.0, 0.0], [3.0, 1.0], [8.0, 0.0]])
    line = np.array([[6.0, -9.0], [6.0, 9.0]])
    for f in (lambda c: distance_to_reference(c, [lane]), lambda c: sdf_static(c, [BOX]),
              lambda c: np.minimum(distance_to_traffic_light(c, np.zeros(1), [TrafficLight(line, "red")]), 1e3)):
        a, b = f(circle(x, y, 0.5))[0], f(circle(x + dx, y + dy, 0.5))[0]
        assert abs(a - b) <= math.hypot(dx, dy) + 1e-9
