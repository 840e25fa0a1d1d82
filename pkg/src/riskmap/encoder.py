"""Scene features and the MLP heads that emit risk-field and cost parameters.

The heads are tiny numpy MLPs with hand-written reverse mode. Every head sees
the same fixed-length scene feature vector.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from riskmap.frenet import wrap_angle
from riskmap.geometry import _line_hits, signed_distance_polygons

N_FEATURES = 32
HIDDEN = 32
N_CHANNELS = 3
TRANSFORMS = ("exp", "softplus", "tanh", "identity")


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------- features

FEATURE_NAMES = (
    "speed", "speed_sq", "accel", "yaw_rate", "hist_mean_speed", "hist_speed_change",
    "lane_offset", "lane_abs_offset", "lane_heading_sin", "curv_here", "curv_20m", "curv_40m",
    "left_lane", "right_lane",
    "obs_proximity", "obs_lon", "obs_lat", "obs_in_path",
    "light_red", "light_yellow", "light_green", "light_proximity", "stop_proximity",
    "agent_count", "agent_near_count", "agent_mean_speed", "agent_proximity",
    "lead_proximity", "lead_rel_speed", "cutin_proximity", "cutin_lat_speed",
    "bias",
)
assert len(FEATURE_NAMES) == N_FEATURES


def _sorted_sum(values) -> float:
    # sorting first keeps the reduction independent of agent order
    return float(np.sum(np.sort(np.asarray(values, dtype=float))))


def extract_features(scenario) -> np.ndarray:
    """Fixed-length scene vector in the ego frame; absent context encodes as 0."""
    f = np.zeros(N_FEATURES)
    eh = scenario.ego_history
    x, y, heading, speed, yaw = eh[-1]
    dt = scenario.dt
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, s], [-s, c]])  # world -> ego frame

    f[0] = speed / 10.0
    f[1] = (speed / 10.0) ** 2
    f[2] = np.clip((eh[-1, 3] - eh[-2, 3]) / dt, -5.0, 5.0) / 3.0
    f[3] = yaw
    f[4] = eh[:, 3].mean() / 10.0
    f[5] = (eh[-1, 3] - eh[0, 3]) / 5.0

    refs = scenario.map.reference_lines
    k, _ = scenario.map.nearest_lane([x, y])
    ref = refs[k]
    s0, d0 = ref.project([[x, y]])
    s0, d0 = float(s0[0]), float(d0[0])
    f[6] = d0 / 2.0
    f[7] = abs(d0) / 2.0
    f[8] = math.sin(float(wrap_angle(heading - ref.heading(s0))))
    _, _, kappa = ref.evaluate(np.array([s0, s0 + 20.0, s0 + 40.0]))
    f[9:12] = np.clip(kappa * 20.0, -1.0, 1.0)
    for j, other in enumerate(refs):
        if j == k:
            continue
        _, dj = other.project([[x, y]])
        dj = float(dj[0])
        if 2.0 < -dj < 5.0:
            f[12] = 1.0  # ego is right of that lane, so it lies to the left
        elif 2.0 < dj < 5.0:
            f[13] = 1.0

    obstacles = scenario.map.obstacles
    if obstacles:
        sd = np.array([signed_distance_polygons(np.array([[x, y]]), [p])[0] for p in obstacles])
        j = int(np.argmin(sd))
        cen = (obstacles[j].mean(axis=0) - [x, y]) @ rot.T
        f[14] = math.exp(-max(sd[j], 0.0) / 20.0)
        f[15] = np.clip(cen[0] / 50.0, -1.0, 1.0)
        f[16] = np.clip(cen[1] / 5.0, -1.0, 1.0)
        f[17] = float(cen[0] > 0.0 and abs(cen[1]) < 2.5)

    best = None
    for light in scenario.map.lights:
        hit = _line_hits(np.array([[x, y]]), np.array(heading), light.line)[0]
        if np.isfinite(hit) and hit > -3.0 and (best is None or hit < best[0]):
            best = (hit, light.state)
    if best is not None:
        hit, state = best
        f[18 + ("red", "yellow", "green").index(state)] = 1.0
        f[21] = math.exp(-max(hit, 0.0) / 30.0)
        if state != "green":
            # proximity relative to a comfortable stopping distance
            f[22] = math.exp(-max(hit - 1.5 * speed, 0.0) / 10.0)

    if scenario.agents:
        hist = np.array([a.history[-1] for a in scenario.agents])
        rel = (hist[:, :2] - [x, y]) @ rot.T
        dist = np.hypot(rel[:, 0], rel[:, 1])
        rel_heading = wrap_angle(hist[:, 2] - heading)
        v_lon = hist[:, 3] * np.cos(rel_heading)
        v_lat = hist[:, 3] * np.sin(rel_heading)
        f[23] = len(hist) / 5.0
        f[24] = float(np.sum(dist < 20.0)) / 5.0
        f[25] = _sorted_sum(hist[:, 3]) / len(hist) / 10.0
        f[26] = _sorted_sum(np.exp(-dist / 10.0))
        ahead = (rel[:, 0] > 0.0) & (np.abs(rel[:, 1]) < 2.0)
        if np.any(ahead):
            i = np.flatnonzero(ahead)[np.argmin(np.where(ahead, rel[:, 0], np.inf)[ahead])]
            f[27] = math.exp(-rel[i, 0] / 30.0)
            f[28] = (v_lon[i] - speed) / 10.0
        # agents beside/ahead drifting toward the ego lane
        toward = -np.sign(rel[:, 1]) * v_lat
        cut = (rel[:, 0] > -2.0) & (np.abs(rel[:, 1]) >= 2.0) & (np.abs(rel[:, 1]) < 5.0) & (toward > 0.2)
        if np.any(cut):
            f[29] = _sorted_sum(np.exp(-np.maximum(rel[cut, 0], 0.0) / 30.0))
            f[30] = _sorted_sum(toward[cut]) / 2.0
    f[31] = 1.0
    return f


# --------------------------------------------------------------------------- MLP heads

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_transform(tag: str, z):
    if tag == "exp":
        return np.exp(z)
    if tag == "softplus":
        return _softplus(z)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown transform {tag!r}")


def transform_grad(tag: str, z, y):
    """d transform / dz given pre-activation ``z`` and output ``y``."""
    if tag == "exp":
        return y
    if tag == "softplus":
        return _sigmoid(z)
    if tag == "tanh":
        return 1.0 - y * y
    return np.ones_like(z)


class MlpHead:
    """Dense layers with per-layer activation tags and a final output transform."""

    def __init__(self, weights, biases, activations, transform="identity", name="head"):
        if len(weights) != len(biases) or len(weights) != len(activations):
            raise ShapeError(f"{name}: weights, biases and activations must align")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"{name}: layer {i} weight {w.shape} / bias {b.shape} mismatch")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"{name}: layer {i} input {w.shape[0]} != previous output {weights[i - 1].shape[1]}")
        if transform not in TRANSFORMS:
            raise ValueError(f"{name}: unknown transform {transform!r}")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activations = list(activations)
        self.transform = transform
        self.name = name

    @classmethod
    def init(cls, sizes, rng, transform="identity", name="head", out_bias=0.0,
             hidden_activation="tanh"):
        """Xavier-uniform hidden layers, zero output weights, output bias ``out_bias``."""
        weights, biases, acts = [], [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last:
                w = np.zeros((n_in, n_out))
                b = np.broadcast_to(np.asarray(out_bias, dtype=float), (n_out,)).copy()
            else:
                lim = math.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-lim, lim, size=(n_in, n_out))
                b = np.zeros(n_out)
            weights.append(w)
            biases.append(b)
            acts.append("identity" if last else hidden_activation)
        return cls(weights, biases, acts, transform, name)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected {self.in_dim} inputs, got {x.shape[-1]}")
        acts = [x]
        pre = []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            pre.append(z)
            h = apply_transform(act, z)
            acts.append(h)
        y = apply_transform(self.transform, h)
        return y, (acts, pre, y)

    def backward(self, cache, grad_y) -> dict[str, np.ndarray]:
        acts, pre, y = cache
        g = np.asarray(grad_y, dtype=float) * transform_grad(self.transform, acts[-1], y)
        grads = {}
        for i in reversed(range(len(self.weights))):
            g = g * transform_grad(self.activations[i], pre[i], acts[i + 1])
            x = acts[i]
            if x.ndim == 1:
                grads[f"W{i}"] = np.outer(x, g)
                grads[f"b{i}"] = g.copy()
            else:
                grads[f"W{i}"] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                grads[f"b{i}"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.weights[i].T
        return grads

    def to_dict(self) -> dict:
        return {
            "transform": self.transform,
            "activations": self.activations,
            "layers": [
                {"shape": list(w.shape), "values": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, name, data) -> "MlpHead":
        weights, biases = [], []
        for i, layer in enumerate(data["layers"]):
            shape = tuple(layer["shape"])
            values = np.asarray(layer["values"], dtype=float)
            if values.size != math.prod(shape):
                raise ShapeError(f"{name}: layer {i} has {values.size} values for shape {shape}")
            weights.append(values.reshape(shape))
            biases.append(np.asarray(layer["bias"], dtype=float))
        return cls(weights, biases, data["activations"], data["transform"], name)


# --------------------------------------------------------------------------- risk heads

@dataclass
class RiskParams:
    beta: np.ndarray        # [3, T'] with T' in {1, T}
    lam: np.ndarray         # [3, T']
    w_smooth: np.ndarray    # [2]
    w_d: float
    v_bar: np.ndarray       # [T]
    w_channels: np.ndarray | None = None  # [4] when channel weighting is on

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.w_smooth = np.asarray(self.w_smooth, dtype=float)
        self.v_bar = np.asarray(self.v_bar, dtype=float)
        if self.w_channels is not None:
            self.w_channels = np.asarray(self.w_channels, dtype=float)


HEAD_TRANSFORMS = {
    "beta": "exp",
    "lambda": "identity",
    "w_smooth": "softplus",
    "w_d": "softplus",
    "v_bar": "softplus",
    "w_channels": "softplus",
}
# reference risk grows off-lane; obstacle and light risk start out decaying with distance
LAMBDA_INIT = (0.0, -0.5, -0.5)


class RiskHeads:
    """All stage-2 heads. ``tv`` switches beta/lambda to per-timestep outputs."""

    def __init__(self, heads: dict[str, MlpHead], horizon: int, tv: bool):
        self.heads = heads
        self.horizon = horizon
        self.tv = tv
        self.weighted_channels = "w_channels" in heads
        t = horizon if tv else 1
        expected = {"beta": N_CHANNELS * t, "lambda": N_CHANNELS * t, "w_smooth": 2, "w_d": 1,
                    "v_bar": horizon}
        if self.weighted_channels:
            expected["w_channels"] = N_CHANNELS + 1
        for name, size in expected.items():
            if name not in heads:
                raise ShapeError(f"{name}: head missing")
            if heads[name].out_dim != size:
                raise ShapeError(f"{name}: output size {heads[name].out_dim}, expected {size}")
            if heads[name].in_dim != N_FEATURES:
                raise ShapeError(f"{name}: input size {heads[name].in_dim}, expected {N_FEATURES}")

    @classmethod
    def init(cls, rng, horizon=30, tv=True, hidden=HIDDEN, weighted_channels=False):
        t = horizon if tv else 1
        sizes = {"beta": N_CHANNELS * t, "lambda": N_CHANNELS * t, "w_smooth": 2, "w_d": 1,
                 "v_bar": horizon}
        if weighted_channels:
            sizes["w_channels"] = N_CHANNELS + 1
        bias = {"lambda": np.repeat(np.asarray(LAMBDA_INIT)[:, None], t, axis=1).ravel()}
        heads = {}
        for name, out in sizes.items():
            heads[name] = MlpHead.init([N_FEATURES, hidden, hidden, out], rng, HEAD_TRANSFORMS[name],
                                       name=name, out_bias=bias.get(name, 0.0))
        return cls(heads, horizon, tv)

    @classmethod
    def zeros(cls, horizon=30, tv=True, hidden=HIDDEN):
        model = cls.init(np.random.default_rng(0), horizon, tv, hidden)
        for p in model.parameters().values():
            p[...] = 0.0
        return model

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, head in self.heads.items() for k, v in head.parameters().items()}

    def n_params(self) -> int:
        return sum(h.n_params() for h in self.heads.values())

    def forward(self, features):
        """Batched forward: features [B, F] -> dict of arrays with leading B, plus cache."""
        x = np.atleast_2d(np.asarray(features, dtype=float))
        if x.shape[-1] != N_FEATURES:
            raise ShapeError(f"features: expected {N_FEATURES}, got {x.shape[-1]}")
        t = self.horizon if self.tv else 1
        out, cache = {}, {}
        for name, head in self.heads.items():
            y, cache[name] = head.forward(x)
            out[name] = y
        out["beta"] = out["beta"].reshape(-1, N_CHANNELS, t)
        out["lambda"] = out["lambda"].reshape(-1, N_CHANNELS, t)
        out["w_d"] = out["w_d"][:, 0]
        return out, cache

    def backward(self, cache, grads: dict) -> dict[str, np.ndarray]:
        """Gradients of a scalar wrt all parameters given upstream grads on outputs."""
        out = {}
        for name, head in self.heads.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(cache[name][2])
            g = np.asarray(g, dtype=float).reshape(cache[name][2].shape)
            for k, v in head.backward(cache[name], g).items():
                out[f"{name}.{k}"] = v
        return out

    def to_dict(self) -> dict:
        return {
            "stage": "planner",
            "horizon": self.horizon,
            "tv": self.tv,
            "heads": {name: head.to_dict() for name, head in self.heads.items()},
        }

    @classmethod
    def from_dict(cls, data) -> "RiskHeads":
        if data.get("stage") != "planner":
            raise ShapeError(f"expected a planner checkpoint, got stage {data.get('stage')!r}")
        heads = {name: MlpHead.from_dict(name, h) for name, h in data["heads"].items()}
        return cls(heads, int(data["horizon"]), bool(data["tv"]))


def unbatch(out: dict, i: int = 0) -> RiskParams:
    return RiskParams(
        beta=out["beta"][i], lam=out["lambda"][i], w_smooth=out["w_smooth"][i],
        w_d=float(out["w_d"][i]), v_bar=out["v_bar"][i],
        w_channels=out["w_channels"][i] if "w_channels" in out else None,
    )


def forward_heads(features, heads: RiskHeads) -> RiskParams:
    out, _ = heads.forward(features)
    return unbatch(out)


def backward_heads(features, heads: RiskHeads, upstream: RiskParams) -> dict[str, np.ndarray]:
    """Parameter gradients for a single feature vector given dL/dRiskParams."""
    out, cache = heads.forward(features)
    grads = {
        "beta": upstream.beta[None], "lambda": upstream.lam[None],
        "w_smooth": upstream.w_smooth[None], "w_d": np.atleast_1d(upstream.w_d)[None],
        "v_bar": upstream.v_bar[None],
    }
    if upstream.w_channels is not None:
        grads["w_channels"] = upstream.w_channels[None]
    return heads.backward(cache, grads)


# --------------------------------------------------------------------------- checkpoint IO

def dumps_params(data: dict) -> str:
    return json.dumps(data, sort_keys=True) + "\n"


def save_params(model, path) -> None:
    Path(path).write_text(dumps_params(model.to_dict()))


def load_checkpoint(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ShapeError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from None
