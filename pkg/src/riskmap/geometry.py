"""Raw driving-context distances for sampled ego poses.

Every distance is taken from the centre of an ego circle and has the circle
radius subtracted, so a value <= 0 means the footprint touches the feature.
Channels are ordered (reference lane, static obstacle SDF, traffic light).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from riskmap.frenet import cross2, polyline_distance

SENTINEL = 1e4
CHANNELS = ("ref", "sdf", "tl")


class GeometryError(ValueError):
    pass


@dataclass
class EgoCircles:
    centers: np.ndarray  # [..., n, 2]
    radius: float


def ego_circles(pose, length: float, width: float) -> EgoCircles:
    """Circles of radius ``width / sqrt(2)`` evenly spaced along the heading axis.

    ``pose`` is ``[..., 3]`` = (x, y, heading) of the footprint centre.
    """
    if length <= 0 or width <= 0:
        raise GeometryError("length and width must be positive")
    pose = np.asarray(pose, dtype=float)
    n = max(1, math.ceil(length / width - 1e-12))
    offsets = -length / 2 + (np.arange(n) + 0.5) * length / n
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    centers = np.stack([
        pose[..., 0, None] + offsets * c[..., None],
        pose[..., 1, None] + offsets * s[..., None],
    ], axis=-1)
    return EgoCircles(centers=centers, radius=width / 2 * math.sqrt(2.0))


def distance_to_reference(circles: EgoCircles, lanes) -> np.ndarray:
    """min over lanes and circles of (centre-to-polyline distance - radius), per pose."""
    if len(lanes) == 0:
        raise GeometryError("no_reference")
    best = None
    for lane in lanes:
        d = polyline_distance(circles.centers, np.asarray(lane, dtype=float))
        best = d if best is None else np.minimum(best, d)
    return best.min(axis=-1) - circles.radius


def signed_distance_polygon(points, poly) -> np.ndarray:
    """Signed distance from points [..., 2] to a convex CCW polygon (negative inside)."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(poly, dtype=float)
    closed = np.vstack([poly, poly[:1]])
    dist = polyline_distance(points, closed)
    inside = np.ones(points.shape[:-1], dtype=bool)
    for a, b in zip(closed[:-1], closed[1:]):
        inside &= cross2(b - a, points - a) >= 0.0
    return np.where(inside, -dist, dist)


def signed_distance_polygons(points, polygons) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if len(polygons) == 0:
        return np.full(points.shape[:-1], SENTINEL)
    return np.min([signed_distance_polygon(points, p) for p in polygons], axis=0)


def sdf_static(circles: EgoCircles, obstacles) -> np.ndarray:
    if len(obstacles) == 0:
        return np.full(circles.centers.shape[:-2], SENTINEL)
    sd = signed_distance_polygons(circles.centers, obstacles)
    return sd.min(axis=-1) - circles.radius


def _line_hits(centers, headings, line):
    """Signed distance along ``headings`` from ``centers`` to the stop-line segment.

    +inf where the travel line misses the segment or runs parallel to it.
    """
    a = np.asarray(line[0], dtype=float)
    e = np.asarray(line[1], dtype=float) - a
    h = np.stack([np.cos(headings), np.sin(headings)], axis=-1)
    h = np.broadcast_to(h[..., None, :], centers.shape)
    den = cross2(h, np.broadcast_to(e, h.shape))
    rel = a - centers
    with np.errstate(divide="ignore", invalid="ignore"):
        s = cross2(rel, np.broadcast_to(e, rel.shape)) / den
        u = cross2(rel, h) / den
    ok = (np.abs(den) > 1e-9) & (u >= 0.0) & (u <= 1.0)
    return np.where(ok, s, np.inf)


def distance_to_traffic_light(circles: EgoCircles, headings, lights) -> np.ndarray:
    """Longitudinal distance to the nearest red/yellow stop line minus radius.

    Green or missing lights give the sentinel; poses past the line are negative.
    """
    headings = np.asarray(headings, dtype=float)
    best = np.full(circles.centers.shape[:-2], np.inf)
    for light in lights:
        if light.state == "green":
            continue
        s = _line_hits(circles.centers, headings, light.line)
        best = np.minimum(best, s.min(axis=-1) - circles.radius)
    return np.where(np.isfinite(best), best, SENTINEL)


def measure(trajectories, map_context, ego_length: float, ego_width: float) -> np.ndarray:
    """DistanceMatrix [N, T, 3] for trajectory poses [N, T, >=3] (x, y, heading)."""
    poses = _poses(trajectories)
    circles = ego_circles(poses, ego_length, ego_width)
    out = np.empty(poses.shape[:-1] + (3,))
    out[..., 0] = distance_to_reference(circles, map_context.lanes)
    out[..., 1] = sdf_static(circles, map_context.obstacles)
    out[..., 2] = distance_to_traffic_light(circles, poses[..., 2], map_context.lights)
    return out


def _poses(trajectories) -> np.ndarray:
    if hasattr(trajectories, "poses"):
        return trajectories.poses
    if isinstance(trajectories, np.ndarray):
        return trajectories[..., :3]
    return np.stack([t.poses for t in trajectories])
