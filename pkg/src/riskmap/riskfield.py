"""Risk values on sampled trajectory points.

Static channels map raw distances through ``beta * exp(lambda * D)``; the
dynamic channel scores overlap of the ego footprint with the predicted
Gaussian mixtures.
"""
from __future__ import annotations

import math

import numpy as np

from riskmap.geometry import EgoCircles, ego_circles, measure
from riskmap.predictor import LOG_2PI, SeqMvnPrediction

EXP_CLAMP = 50.0
COL_MODES = ("density", "integrated", "max")


def _per_time(p, T):
    """[3, T'] parameter -> [T, 3] broadcastable against D [..., T, 3]."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[1] not in (1, T):
        raise ValueError(f"parameter time dimension {p.shape[1]} does not match horizon {T}")
    return p.T


def map_risk(D, beta, lam) -> np.ndarray:
    """beta * exp(min(lambda * D, 50)) per channel; D is [..., T, 3]."""
    D = np.asarray(D, dtype=float)
    T = D.shape[-2]
    b = _per_time(beta, T)
    l = _per_time(lam, T)
    return b * np.exp(np.minimum(l * D, EXP_CLAMP))


def map_risk_vjp(D, beta, lam, upstream):
    """Gradients of ``sum(upstream * map_risk(D, beta, lam))`` wrt beta and lambda.

    Returned shapes match ``beta``/``lam``; the clamped region has zero lambda gradient.
    """
    D = np.asarray(D, dtype=float)
    T = D.shape[-2]
    beta = np.asarray(beta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    b = _per_time(beta, T)
    l = _per_time(lam, T)
    z = l * D
    e = np.exp(np.minimum(z, EXP_CLAMP))
    ue = np.asarray(upstream, dtype=float) * e
    lead = tuple(range(D.ndim - 2))
    g_b = ue.sum(axis=lead)
    g_l = (ue * b * D * (z < EXP_CLAMP)).sum(axis=lead)
    if beta.ndim == 1 or beta.shape[-1] == 1:
        g_b = g_b.sum(axis=0, keepdims=True)
    if lam.ndim == 1 or lam.shape[-1] == 1:
        g_l = g_l.sum(axis=0, keepdims=True)
    return g_b.T.reshape(beta.shape), g_l.T.reshape(lam.shape)


def _world_components(prediction: SeqMvnPrediction, T: int):
    """World-frame means, precision coefficients and log weights per (agent, mode, t)."""
    c, s = np.cos(prediction.heading), np.sin(prediction.heading)
    mu = prediction.world_means()[:, :, :T]
    sx = prediction.sigma[:, :, :T, 0]
    sy = prediction.sigma[:, :, :T, 1]
    rho = prediction.rho[:, :, :T]
    # local covariance, rotated into the world frame
    vxx, vyy, vxy = sx * sx, sy * sy, rho * sx * sy
    cc, ss = c[:, None, None], s[:, None, None]
    wxx = cc * cc * vxx - 2 * cc * ss * vxy + ss * ss * vyy
    wyy = ss * ss * vxx + 2 * cc * ss * vxy + cc * cc * vyy
    wxy = cc * ss * (vxx - vyy) + (cc * cc - ss * ss) * vxy
    det = wxx * wyy - wxy * wxy
    pxx, pyy, pxy = wyy / det, wxx / det, -wxy / det
    logw = np.log(prediction.cls)[:, :, None] - LOG_2PI - 0.5 * np.log(det)
    return mu, pxx, pyy, pxy, logw


def _mixture_density(centers, prediction: SeqMvnPrediction):
    """sum_{agents, modes} cls * N(center; tuple at t) for centers [..., T, C, 2]."""
    shape = centers.shape[:-1]
    if prediction.n_agents == 0:
        return np.zeros(shape)
    T = centers.shape[-3]
    mu, pxx, pyy, pxy, logw = _world_components(prediction, T)
    X = centers[..., 0]
    Y = centers[..., 1]
    total = np.zeros(shape)
    for a in range(prediction.n_agents):
        for m in range(prediction.n_modes):
            dx = X - mu[a, m, :, None, 0]
            dy = Y - mu[a, m, :, None, 1]
            q = pxx[a, m, :, None] * dx * dx
            q += 2.0 * pxy[a, m, :, None] * dx * dy
            q += pyy[a, m, :, None] * dy * dy
            q *= -0.5
            q += logw[a, m, :, None]
            total += np.exp(q)
    return total


def collision_risk_batch(circles: EgoCircles, prediction: SeqMvnPrediction, mode: str = "integrated"):
    """Dynamic-collision risk in [0, 1] for circle centres [..., T, C, 2] -> [..., T]."""
    if mode not in COL_MODES:
        raise ValueError(f"unknown col_mode {mode!r}; expected one of {COL_MODES}")
    if prediction.n_agents == 0:
        return np.zeros(circles.centers.shape[:-2])
    dens = _mixture_density(circles.centers, prediction)
    area = math.pi * circles.radius**2
    if mode == "integrated":
        risk = dens.sum(axis=-1) * area
    elif mode == "max":
        risk = dens.max(axis=-1) * area
    else:
        risk = dens.max(axis=-1)
    return np.clip(risk, 0.0, 1.0)


def collision_risk(point, t: int, prediction: SeqMvnPrediction, footprint: EgoCircles,
                   mode: str = "integrated") -> float:
    """Risk for one pose at step ``t``; ``footprint`` holds that pose's circles [C, 2].

    ``point`` is kept for interface symmetry; the footprint carries the geometry.
    """
    if prediction.n_agents and not 0 <= t < prediction.horizon:
        raise IndexError(f"t={t} outside horizon {prediction.horizon}")
    centers = np.asarray(footprint.centers, dtype=float).reshape(-1, 2)
    # place the pose at time t in a [t+1, C, 2] stack so the time index lines up
    stack = np.zeros((t + 1,) + centers.shape)
    stack[t] = centers
    risk = collision_risk_batch(EgoCircles(stack, footprint.radius), prediction, mode)
    return float(risk[t])


def riskmap_inputs(trajectories, scenario, prediction, col_mode="integrated"):
    """Parameter-independent parts of the risk map: distances [N,T,3], collision [N,T]."""
    length, width = scenario.ego_size
    poses = trajectories.poses if hasattr(trajectories, "poses") else np.asarray(trajectories)[..., :3]
    D = measure(poses, scenario.map, length, width)
    circles = ego_circles(poses, length, width)
    col = collision_risk_batch(circles, prediction, col_mode)
    return D, col


def build_riskmap(trajectories, scenario, prediction, params, col_mode="integrated") -> np.ndarray:
    """RiskMap values [N, T, 4]: (ref, sdf, tl, collision)."""
    D, col = riskmap_inputs(trajectories, scenario, prediction, col_mode)
    return np.concatenate([map_risk(D, params.beta, params.lam), col[..., None]], axis=-1)
