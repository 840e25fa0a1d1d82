"""Multi-modal sequential bivariate-normal (SeqMVN) prediction.

Each agent gets ``M`` modes; every mode is a sequence of ``T`` bivariate
Gaussians ``(mu_x, mu_y, sigma_x, sigma_y, rho)`` plus one mode probability.
Tuples are expressed in a per-agent frame (``origin``, ``heading``); the
default frame is the world frame. The model is a constant-velocity rollout
with a learned MLP correction on means, raw scales, raw correlation and mode
logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from riskmap.encoder import MlpHead, ShapeError
from riskmap.frenet import wrap_angle

LOG_FLOOR = -50.0
LOG_2PI = math.log(2.0 * math.pi)
N_MODES = 3
AGENT_FEATURES = 12
V_MAX = 20.0
# tanh rounds to exactly 1 for large inputs; keep the tuple strictly valid
RHO_MAX = 1.0 - 1e-12


@dataclass
class MvnTuple:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("sigma must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")


@dataclass
class SeqMvnPrediction:
    mu: np.ndarray      # [A, M, T, 2]
    sigma: np.ndarray   # [A, M, T, 2]
    rho: np.ndarray     # [A, M, T]
    cls: np.ndarray     # [A, M]
    origin: np.ndarray | None = None   # [A, 2]
    heading: np.ndarray | None = None  # [A]

    def __post_init__(self):
        a = self.mu.shape[0]
        if self.origin is None:
            self.origin = np.zeros((a, 2))
        if self.heading is None:
            self.heading = np.zeros(a)
        if self.sigma.shape != self.mu.shape or self.rho.shape != self.mu.shape[:-1]:
            raise ShapeError("prediction: inconsistent tuple shapes")
        if self.cls.shape != self.mu.shape[:2]:
            raise ShapeError("prediction: cls must be [agents, modes]")

    @property
    def n_agents(self) -> int:
        return self.mu.shape[0]

    @property
    def n_modes(self) -> int:
        return self.mu.shape[1]

    @property
    def horizon(self) -> int:
        return self.mu.shape[2]

    @classmethod
    def empty(cls, modes=N_MODES, horizon=30) -> "SeqMvnPrediction":
        return cls(np.zeros((0, modes, horizon, 2)), np.ones((0, modes, horizon, 2)),
                   np.zeros((0, modes, horizon)), np.zeros((0, modes)))

    def tuple(self, agent, modal, t) -> MvnTuple:
        mx, my = self.mu[agent, modal, t]
        sx, sy = self.sigma[agent, modal, t]
        return MvnTuple(mx, my, sx, sy, self.rho[agent, modal, t])

    def to_local(self, points, agent=None):
        """World points [..., 2] into agent frames; with ``agent=None`` broadcasts to [..., A, 2]."""
        points = np.asarray(points, dtype=float)
        c, s = np.cos(self.heading), np.sin(self.heading)
        if agent is not None:
            rel = points - self.origin[agent]
            return np.stack([c[agent] * rel[..., 0] + s[agent] * rel[..., 1],
                             -s[agent] * rel[..., 0] + c[agent] * rel[..., 1]], axis=-1)
        rel = points[..., None, :] - self.origin
        return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)

    def world_means(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        mx, my = self.mu[..., 0], self.mu[..., 1]
        cc, ss = c[:, None, None], s[:, None, None]
        return np.stack([cc * mx - ss * my, ss * mx + cc * my], axis=-1) + self.origin[:, None, None, :]

    def to_dict(self) -> dict:
        return {
            "shape": {"agents": self.n_agents, "modes": self.n_modes, "horizon": self.horizon},
            "mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "rho": self.rho.tolist(),
            "cls": self.cls.tolist(), "origin": self.origin.tolist(), "heading": self.heading.tolist(),
        }


def decode_regularize(raw) -> MvnTuple:
    """Map an unconstrained 5-vector to a valid tuple: sigma=exp, rho=tanh."""
    raw = np.asarray(raw, dtype=float)
    return MvnTuple(raw[0], raw[1], math.exp(raw[2]), math.exp(raw[3]),
                    float(np.clip(math.tanh(raw[4]), -RHO_MAX, RHO_MAX)))


def mvn_logpdf(x, y, mu_x, mu_y, sigma_x, sigma_y, rho):
    """Closed-form bivariate normal log-density (broadcasting)."""
    zx = (x - mu_x) / sigma_x
    zy = (y - mu_y) / sigma_y
    one_m = 1.0 - rho * rho
    q = (zx * zx - 2.0 * rho * zx * zy + zy * zy) / one_m
    return -LOG_2PI - np.log(sigma_x) - np.log(sigma_y) - 0.5 * np.log(one_m) - 0.5 * q


def mvn_density(point, tup: MvnTuple) -> float:
    return float(np.exp(mvn_logpdf(point[0], point[1], tup.mu_x, tup.mu_y, tup.sigma_x, tup.sigma_y, tup.rho)))


def weighted_likelihood(point, prediction: SeqMvnPrediction, agent: int, modal: int, t: int) -> float:
    """cls[agent, modal] times the mode-t density at ``point`` (point in the agent frame)."""
    a, m, T = prediction.n_agents, prediction.n_modes, prediction.horizon
    if not (0 <= agent < a and 0 <= modal < m and 0 <= t < T):
        raise IndexError(f"index ({agent}, {modal}, {t}) out of range for shape ({a}, {m}, {T})")
    return float(prediction.cls[agent, modal]) * mvn_density(point, prediction.tuple(agent, modal, t))


def cholesky_factor(sigma_x, sigma_y, rho):
    """Lower-triangular L with L @ L.T equal to the 2x2 covariance."""
    sigma_x, sigma_y, rho = np.broadcast_arrays(sigma_x, sigma_y, rho)
    L = np.zeros(sigma_x.shape + (2, 2))
    L[..., 0, 0] = sigma_x
    L[..., 1, 0] = rho * sigma_y
    L[..., 1, 1] = sigma_y * np.sqrt(1.0 - rho * rho)
    return L


def sample_reparameterized(prediction: SeqMvnPrediction, agent: int, modal: int, noise) -> np.ndarray:
    """mu_t + L_t @ noise_t for externally supplied standard-normal noise [T, 2]."""
    noise = np.asarray(noise, dtype=float)
    mu = prediction.mu[agent, modal]
    sig = prediction.sigma[agent, modal]
    L = cholesky_factor(sig[:, 0], sig[:, 1], prediction.rho[agent, modal])
    return mu + np.einsum("tij,tj->ti", L, noise)


def _logpdf_grads(x, y, mu, sigma, rho):
    """Log-density and its partials wrt (mu_x, mu_y, sigma_x, sigma_y, rho)."""
    sx, sy = sigma[..., 0], sigma[..., 1]
    zx = (x - mu[..., 0]) / sx
    zy = (y - mu[..., 1]) / sy
    one_m = 1.0 - rho * rho
    quad = zx * zx - 2.0 * rho * zx * zy + zy * zy
    logp = -LOG_2PI - np.log(sx) - np.log(sy) - 0.5 * np.log(one_m) - 0.5 * quad / one_m
    ax = (zx - rho * zy) / one_m
    ay = (zy - rho * zx) / one_m
    g_mu = np.stack([ax / sx, ay / sy], axis=-1)
    g_sigma = np.stack([(-1.0 + zx * ax) / sx, (-1.0 + zy * ay) / sy], axis=-1)
    g_rho = rho / one_m + zx * zy / one_m - rho * quad / one_m**2
    return logp, g_mu, g_sigma, g_rho


def prediction_loss(prediction: SeqMvnPrediction, truth):
    """Stage-1 loss averaged over agents, with gradients wrt mu, sigma, rho and cls.

    Per agent: ``-sum_m sum_t max(log(cls_m * N_mt(truth_t)), LOG_FLOOR)``
    ``- log cls[k*]`` where ``k*`` is the mode whose mean sequence is closest
    (L2) to the truth, ties to the lowest index. ``truth`` is [A, T, 2] in the
    same frames as the tuples.
    """
    truth = np.asarray(truth, dtype=float)
    A = prediction.n_agents
    if truth.shape != (A, prediction.horizon, 2):
        raise ShapeError(f"truth shape {truth.shape} does not match prediction ({A}, {prediction.horizon}, 2)")
    grads = {"mu": np.zeros_like(prediction.mu), "sigma": np.zeros_like(prediction.sigma),
             "rho": np.zeros_like(prediction.rho), "cls": np.zeros_like(prediction.cls)}
    if A == 0:
        return 0.0, grads
    x = truth[:, None, :, 0]
    y = truth[:, None, :, 1]
    logp, g_mu, g_sigma, g_rho = _logpdf_grads(x, y, prediction.mu, prediction.sigma, prediction.rho)
    cls = prediction.cls
    logf = np.log(cls)[..., None] + logp
    active = logf > LOG_FLOOR
    nll = -np.where(active, logf, LOG_FLOOR).sum(axis=(1, 2))
    dist = np.sqrt(((prediction.mu - truth[:, None]) ** 2).sum(axis=(2, 3)))
    best = np.argmin(dist, axis=1)
    rows = np.arange(A)
    loss_per_agent = nll - np.log(cls[rows, best])
    w = active / A
    grads["mu"] = -w[..., None] * g_mu
    grads["sigma"] = -w[..., None] * g_sigma
    grads["rho"] = -w * g_rho
    grads["cls"] = -w.sum(axis=2) / cls
    grads["cls"][rows, best] -= 1.0 / (A * cls[rows, best])
    return float(loss_per_agent.mean()), grads


# --------------------------------------------------------------------------- model

def agent_features(scenario, agent) -> np.ndarray:
    """Agent-frame kinematic and lane context features."""
    h = agent.history
    x, y, heading, speed = h[-1, :4]
    dt = scenario.dt
    f = np.zeros(AGENT_FEATURES)
    f[0] = speed / 10.0
    f[1] = np.clip((h[-1, 3] - h[-2, 3]) / dt, -6.0, 6.0) / 3.0
    f[2] = float(wrap_angle(h[-1, 2] - h[-2, 2])) / dt
    refs = scenario.map.reference_lines
    k, _ = scenario.map.nearest_lane([x, y])
    s0, d0 = refs[k].project([[x, y]])
    s0, d0 = float(s0[0]), float(d0[0])
    err = float(wrap_angle(heading - refs[k].heading(s0)))
    f[3] = np.clip(d0 / 2.0, -3.0, 3.0)
    f[4] = math.sin(err)
    f[5] = speed * math.sin(err) / 2.0
    _, _, kappa = refs[k].evaluate(np.array([s0, s0 + 20.0]))
    f[6:8] = np.clip(kappa * 20.0, -1.0, 1.0)
    from riskmap.geometry import _line_hits
    for light in scenario.map.lights:
        if light.state == "green":
            continue
        hit = _line_hits(np.array([[x, y]]), np.array(heading), light.line)[0]
        if np.isfinite(hit) and hit > 0.0:
            f[8] = max(f[8], math.exp(-hit / 20.0))
    f[9] = agent.length / 5.0
    f[10] = agent.width / 2.0
    f[11] = 1.0
    return f


class PredictorModel:
    def __init__(self, head: MlpHead, modes: int = N_MODES, horizon: int = 30, dt: float = 0.1):
        if head.out_dim != modes * horizon * 5 + modes:
            raise ShapeError(f"predictor: output size {head.out_dim} != {modes * horizon * 5 + modes}")
        if head.in_dim != AGENT_FEATURES:
            raise ShapeError(f"predictor: input size {head.in_dim} != {AGENT_FEATURES}")
        self.head = head
        self.modes = modes
        self.horizon = horizon
        self.dt = dt

    @classmethod
    def init(cls, rng, modes=N_MODES, horizon=30, dt=0.1, hidden=32, out_scale=0.05):
        head = MlpHead.init([AGENT_FEATURES, hidden, hidden, modes * horizon * 5 + modes], rng,
                            "identity", name="predictor")
        # break the symmetry between modes
        head.weights[-1][...] = rng.normal(0.0, out_scale, size=head.weights[-1].shape)
        return cls(head, modes, horizon, dt)

    @classmethod
    def zeros(cls, modes=N_MODES, horizon=30, dt=0.1, hidden=32):
        model = cls.init(np.random.default_rng(0), modes, horizon, dt, hidden)
        for p in model.parameters().values():
            p[...] = 0.0
        return model

    def parameters(self):
        return {f"predictor.{k}": v for k, v in self.head.parameters().items()}

    def n_params(self) -> int:
        return self.head.n_params()

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.horizon + 1)

    def decode(self, raw, speeds):
        """Raw outputs [A, M*T*5 + M] to tuples in agent frames."""
        M, T = self.modes, self.horizon
        A = raw.shape[0]
        r = raw[:, : M * T * 5].reshape(A, M, T, 5)
        logits = raw[:, M * T * 5:]
        tau = self.times
        mu = np.empty((A, M, T, 2))
        mu[..., 0] = speeds[:, None, None] * tau + r[..., 0] * tau
        mu[..., 1] = r[..., 1] * tau
        sigma = np.exp(r[..., 2:4])
        rho = np.clip(np.tanh(r[..., 4]), -RHO_MAX, RHO_MAX)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        cls = e / e.sum(axis=1, keepdims=True)
        return mu, sigma, rho, cls

    def forward(self, feats, speeds, origin, heading):
        raw, cache = self.head.forward(feats)
        mu, sigma, rho, cls = self.decode(raw, speeds)
        return SeqMvnPrediction(mu, sigma, rho, cls, origin, heading), cache

    def backward(self, cache, prediction: SeqMvnPrediction, grads: dict) -> dict[str, np.ndarray]:
        """Chain tuple-space gradients through the decode transforms and the MLP."""
        M, T = self.modes, self.horizon
        A = prediction.n_agents
        tau = self.times
        g = np.empty((A, M, T, 5))
        g[..., 0] = grads["mu"][..., 0] * tau
        g[..., 1] = grads["mu"][..., 1] * tau
        g[..., 2:4] = grads["sigma"] * prediction.sigma
        g[..., 4] = grads["rho"] * (1.0 - prediction.rho**2)
        cls = prediction.cls
        gc = grads["cls"]
        g_logits = cls * (gc - (cls * gc).sum(axis=1, keepdims=True))
        g_raw = np.concatenate([g.reshape(A, -1), g_logits], axis=1)
        return {f"predictor.{k}": v for k, v in self.head.backward(cache, g_raw).items()}

    def to_dict(self) -> dict:
        return {"stage": "predictor", "modes": self.modes, "horizon": self.horizon, "dt": self.dt,
                "heads": {"predictor": self.head.to_dict()}}

    @classmethod
    def from_dict(cls, data) -> "PredictorModel":
        if data.get("stage") != "predictor":
            raise ShapeError(f"expected a predictor checkpoint, got stage {data.get('stage')!r}")
        head = MlpHead.from_dict("predictor", data["heads"]["predictor"])
        return cls(head, int(data["modes"]), int(data["horizon"]), float(data["dt"]))


@dataclass
class AgentBatch:
    """Model inputs for every agent of one or more scenarios."""
    features: np.ndarray   # [A, AGENT_FEATURES]
    speeds: np.ndarray     # [A]
    origin: np.ndarray     # [A, 2]
    heading: np.ndarray    # [A]
    truth: np.ndarray | None = None  # [A, T, 2] in agent frames

    @classmethod
    def from_scenario(cls, scenario, with_truth=False) -> "AgentBatch":
        agents = scenario.agents
        if not agents:
            T = scenario.horizon
            return cls(np.zeros((0, AGENT_FEATURES)), np.zeros(0), np.zeros((0, 2)), np.zeros(0),
                       np.zeros((0, T, 2)) if with_truth else None)
        last = np.array([a.history[-1] for a in agents])
        feats = np.array([agent_features(scenario, a) for a in agents])
        truth = None
        if with_truth:
            if any(a.future is None for a in agents):
                raise ValueError("scenario agents lack future_truth")
            c, s = np.cos(last[:, 2]), np.sin(last[:, 2])
            rel = np.array([a.future[:, :2] for a in agents]) - last[:, None, :2]
            truth = np.stack([c[:, None] * rel[..., 0] + s[:, None] * rel[..., 1],
                              -s[:, None] * rel[..., 0] + c[:, None] * rel[..., 1]], axis=-1)
        return cls(feats, last[:, 3].copy(), last[:, :2].copy(), last[:, 2].copy(), truth)

    @classmethod
    def concat(cls, batches) -> "AgentBatch":
        has_truth = all(b.truth is not None for b in batches)
        return cls(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.speeds for b in batches]),
            np.concatenate([b.origin for b in batches]),
            np.concatenate([b.heading for b in batches]),
            np.concatenate([b.truth for b in batches]) if has_truth else None,
        )

    def __len__(self):
        return len(self.speeds)


def predict(scenario, model: PredictorModel) -> SeqMvnPrediction:
    batch = AgentBatch.from_scenario(scenario)
    if len(batch) == 0:
        return SeqMvnPrediction.empty(model.modes, model.horizon)
    pred, _ = model.forward(batch.features, batch.speeds, batch.origin, batch.heading)
    return pred
