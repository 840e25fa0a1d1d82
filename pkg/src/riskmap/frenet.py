"""Reference lines, Frenet projection and polynomial rollouts.

Lanes are stored as polylines but evaluated through a natural cubic spline
parametrised by chord length, so offsets along curved lanes stay smooth.
Outside ``[0, length]`` the line is extended along the end tangents.
"""
from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class ReferenceLine:
    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("reference line needs >= 2 points of shape (n, 2)")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        pts = pts[np.concatenate([[True], seg > 1e-9])]
        if len(pts) < 2:
            raise ValueError("reference line is degenerate")
        self.points = pts
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        self.length = float(self.s[-1])
        if len(pts) > 2:
            self._spline = CubicSpline(self.s, pts, axis=0, bc_type="natural")
            self._d1 = self._spline.derivative(1)
            self._d2 = self._spline.derivative(2)
        else:
            self._spline = None
            self._dir = (pts[1] - pts[0]) / self.length

    def _raw(self, s):
        if self._spline is None:
            p = self.points[0] + s[..., None] * self._dir
            dp = np.broadcast_to(self._dir, p.shape)
            return p, dp, np.zeros_like(p)
        return self._spline(s), self._d1(s), self._d2(s)

    def evaluate(self, s):
        """Return (position, unit tangent, signed curvature) at parameter ``s``."""
        s = np.asarray(s, dtype=float)
        sc = np.clip(s, 0.0, self.length)
        p, dp, ddp = self._raw(sc)
        speed = np.hypot(dp[..., 0], dp[..., 1])
        tangent = dp / speed[..., None]
        kappa = cross2(dp, ddp) / speed**3
        inside = s == sc
        p = p + (s - sc)[..., None] * tangent
        return p, tangent, np.where(inside, kappa, 0.0)

    def to_cartesian(self, s, d):
        p, t, _ = self.evaluate(s)
        n = np.stack([-t[..., 1], t[..., 0]], axis=-1)
        return p + np.asarray(d, dtype=float)[..., None] * n

    def heading(self, s):
        _, t, _ = self.evaluate(s)
        return np.arctan2(t[..., 1], t[..., 0])

    def polyline_distance(self, xy):
        """Unsigned distance from points to the stored polyline (no extension)."""
        return polyline_distance(np.asarray(xy, dtype=float), self.points)

    def project(self, xy):
        """Frenet coordinates (s, d) of points; d is positive to the left."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        a = self.points[:-1]
        e = self.points[1:] - a
        ee = np.einsum("ij,ij->i", e, e)
        rel = xy[:, None, :] - a[None]
        u = np.einsum("pij,ij->pi", rel, e) / ee
        lo = np.zeros_like(u)
        hi = np.ones_like(u)
        lo[:, 0] = -np.inf
        hi[:, -1] = np.inf
        u = np.clip(u, lo, hi)
        dist = np.hypot(*(rel - u[..., None] * e[None]).transpose(2, 0, 1))
        k = np.argmin(dist, axis=1)
        rows = np.arange(len(xy))
        s = self.s[k] + u[rows, k] * np.sqrt(ee[k])
        if self._spline is not None:
            inner = (s > 0.0) & (s < self.length)
            for _ in range(4):
                sc = np.clip(s, 0.0, self.length)
                p, dp, ddp = self._raw(sc)
                r = p - xy
                f = np.einsum("ij,ij->i", r, dp)
                fp = np.einsum("ij,ij->i", dp, dp) + np.einsum("ij,ij->i", r, ddp)
                s = np.where(inner, np.clip(s - f / fp, 0.0, self.length), s)
        p, t, _ = self.evaluate(s)
        n = np.stack([-t[:, 1], t[:, 0]], axis=-1)
        d = np.einsum("ij,ij->i", xy - p, n)
        return s, d


def _segment_sqdist(px, py, poly):
    best = np.full(px.shape, np.inf)
    for (ax, ay), (bx, by) in zip(poly[:-1], poly[1:]):
        ex, ey = bx - ax, by - ay
        ee = ex * ex + ey * ey
        rx, ry = px - ax, py - ay
        if ee > 0.0:
            u = np.clip((rx * ex + ry * ey) / ee, 0.0, 1.0)
            rx = rx - u * ex
            ry = ry - u * ey
        np.minimum(best, rx * rx + ry * ry, out=best)
    return best


def polyline_distance(points, poly, margin=10.0):
    """Distance from each point in ``points`` [..., 2] to polyline ``poly`` [K, 2].

    Segments whose bounding box lies more than ``margin`` outside the points'
    bounding box cannot be nearest for any point closer than ``margin``; they
    are skipped, and points left farther than ``margin`` are recomputed
    against the full polyline, so the result is exact.
    """
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    px = points[..., 0].ravel()
    py = points[..., 1].ravel()
    if len(poly) <= 3 or px.size == 0:
        return np.sqrt(_segment_sqdist(px, py, poly)).reshape(shape)
    lo = np.array([px.min(), py.min()]) - margin
    hi = np.array([px.max(), py.max()]) + margin
    seg_lo = np.minimum(poly[:-1], poly[1:])
    seg_hi = np.maximum(poly[:-1], poly[1:])
    keep = np.all((seg_hi >= lo) & (seg_lo <= hi), axis=1)
    idx = np.flatnonzero(keep)
    best = np.full(px.shape, np.inf)
    # contiguous runs of kept segments form sub-polylines
    if idx.size:
        breaks = np.flatnonzero(np.diff(idx) > 1) + 1
        for run in np.split(idx, breaks):
            np.minimum(best, _segment_sqdist(px, py, poly[run[0]: run[-1] + 2]), out=best)
    far = best > margin * margin
    if np.any(far):
        best[far] = _segment_sqdist(px[far], py[far], poly)
    return np.sqrt(best).reshape(shape)


def quartic_coefficients(s0, v0, a0, v1, horizon):
    """Longitudinal quartic with s(0)=s0, s'(0)=v0, s''(0)=a0, s'(H)=v1, s''(H)=0."""
    v1 = np.asarray(v1, dtype=float)
    h = horizon
    m = np.array([[3 * h**2, 4 * h**3], [6 * h, 12 * h**2]])
    rhs = np.stack([v1 - v0 - a0 * h, np.full_like(v1, -a0)], axis=-1)
    c34 = np.linalg.solve(m, rhs[..., None])[..., 0]
    c = np.zeros(v1.shape + (5,))
    c[..., 0] = s0
    c[..., 1] = v0
    c[..., 2] = 0.5 * a0
    c[..., 3:] = c34
    return c


def quintic_coefficients(d0, dd0, ddd0, d1, horizon):
    """Lateral quintic from (d0, d0', d0'') to (d1, 0, 0) over ``horizon``."""
    d1 = np.asarray(d1, dtype=float)
    h = horizon
    m = np.array([
        [h**3, h**4, h**5],
        [3 * h**2, 4 * h**3, 5 * h**4],
        [6 * h, 12 * h**2, 20 * h**3],
    ])
    rhs = np.stack([
        d1 - d0 - dd0 * h - 0.5 * ddd0 * h**2,
        np.full_like(d1, -dd0 - ddd0 * h),
        np.full_like(d1, -ddd0),
    ], axis=-1)
    c345 = np.linalg.solve(m, rhs[..., None])[..., 0]
    c = np.zeros(d1.shape + (6,))
    c[..., 0] = d0
    c[..., 1] = dd0
    c[..., 2] = 0.5 * ddd0
    c[..., 3:] = c345
    return c


def polyval(coeffs, t):
    """Evaluate polynomials (lowest order first) ``coeffs`` [..., k] at times ``t`` [T]."""
    powers = np.asarray(t, dtype=float)[:, None] ** np.arange(coeffs.shape[-1])
    return coeffs @ powers.T


def frenet_rollout(ref: ReferenceLine, x, y, heading, speed, target_speeds, target_offsets,
                   steps, dt, accel=0.0):
    """Roll out a speed x offset grid of Frenet trajectories from a Cartesian state.

    Returns positions [len(speeds) * len(offsets), steps, 2] ordered speed-major,
    sampled at t = dt, 2 dt, ..., steps * dt.
    """
    target_speeds = np.atleast_1d(np.asarray(target_speeds, dtype=float))
    target_offsets = np.atleast_1d(np.asarray(target_offsets, dtype=float))
    s0, d0 = ref.project([[x, y]])
    s0, d0 = float(s0[0]), float(d0[0])
    rel = float(wrap_angle(heading - ref.heading(s0)))
    vs, vd = speed * np.cos(rel), speed * np.sin(rel)
    horizon = steps * dt
    t = dt * np.arange(1, steps + 1)
    s = polyval(quartic_coefficients(s0, vs, accel, target_speeds, horizon), t)
    d = polyval(quintic_coefficients(d0, vd, 0.0, target_offsets, horizon), t)
    s = np.repeat(s, len(target_offsets), axis=0)
    d = np.tile(d, (len(target_speeds), 1))
    return ref.to_cartesian(s, d)


def kinematics_from_positions(xy, x0, y0, heading0, speed0, dt):
    """Finite-difference heading, speed, accel and yaw rate for positions [..., T, 2].

    The first step differences against the origin state. Where the vehicle does
    not move, the previous heading is carried forward.
    """
    xy = np.asarray(xy, dtype=float)
    prev = np.concatenate([np.broadcast_to([x0, y0], xy.shape[:-2] + (1, 2)), xy[..., :-1, :]], axis=-2)
    disp = xy - prev
    dist = np.hypot(disp[..., 0], disp[..., 1])
    speed = dist / dt
    moving = dist > 1e-9
    raw = np.arctan2(disp[..., 1], disp[..., 0])
    steps = xy.shape[-2]
    idx = np.where(moving, np.arange(1, steps + 1), 0)
    idx = np.maximum.accumulate(idx, axis=-1)
    padded = np.concatenate([np.full(xy.shape[:-2] + (1,), float(heading0)), raw], axis=-1)
    heading = np.take_along_axis(padded, idx, axis=-1)
    heading = wrap_angle(heading)
    prev_speed = np.concatenate([np.full(xy.shape[:-2] + (1,), float(speed0)), speed[..., :-1]], axis=-1)
    accel = (speed - prev_speed) / dt
    prev_heading = np.concatenate([np.full(xy.shape[:-2] + (1,), float(heading0)), heading[..., :-1]], axis=-1)
    yaw_rate = wrap_angle(heading - prev_heading) / dt
    return heading, speed, accel, yaw_rate
