"""Two-stage training: predictor first, then the risk/cost heads by imitation.

Stage 2 keeps the predictor frozen, so everything about a scenario that does
not depend on the heads (lattice distances, collision risk, smoothness,
demo quantities) is computed once and cached in a ``Stage2Sample``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from riskmap.encoder import RiskHeads, RiskParams, extract_features, unbatch
from riskmap.planner import TrajectoryBatch, reference_for, sample_lattice, smoothness_features
from riskmap.predictor import AgentBatch, PredictorModel, prediction_loss, predict
from riskmap.riskfield import map_risk, map_risk_vjp, riskmap_inputs

TERMS = ("demo_cost", "l_sel", "l_l2", "l_con", "l_v")
VAR_EPS = 1e-8
CE_DIRECTIONS = ("target_distance", "target_cost")


class ConfigError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


def parse_mask(text) -> dict[str, bool]:
    """``"-demo_cost,-l_v"`` style mask (or a dict / None) -> term -> enabled."""
    mask = {t: True for t in TERMS}
    if text is None:
        return mask
    if isinstance(text, dict):
        items = [(k, bool(v)) for k, v in text.items()]
    else:
        items = []
        for tok in str(text).replace(" ", "").split(","):
            if not tok:
                continue
            on = not tok.startswith("-")
            items.append((tok.lstrip("+-"), on))
    for name, on in items:
        if name not in mask:
            raise ConfigError(f"unknown loss term {name!r}; expected one of {TERMS}")
        mask[name] = on
    if not any(mask.values()):
        raise ConfigError("loss mask disables every term")
    return mask


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    mask: dict = field(default_factory=lambda: {t: True for t in TERMS})
    tv: bool = True
    count: int = 100
    weight_decay: float = 0.01
    col_mode: str = "integrated"
    ce_direction: str = "target_distance"

    def __post_init__(self):
        self.mask = parse_mask(self.mask)
        if not self.lr >= 0.0 or not math.isfinite(self.lr):
            raise ConfigError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.ce_direction not in CE_DIRECTIONS:
            raise ConfigError(f"ce_direction must be one of {CE_DIRECTIONS}")
        n = math.isqrt(self.count)
        if self.count < 1 or n * n != self.count:
            raise ConfigError(f"non-square count {self.count}")


@dataclass
class LossBreakdown:
    demo_cost: float
    l_sel: float
    l_l2: float
    l_con: float
    l_v: float
    mask: dict = field(default_factory=lambda: {t: True for t in TERMS})

    @property
    def total(self) -> float:
        return sum(getattr(self, t) for t in TERMS if self.mask[t])

    def as_dict(self) -> dict:
        out = {t: getattr(self, t) for t in TERMS}
        out["total"] = self.total
        return out


def total_loss(parts, mask=None) -> LossBreakdown:
    if isinstance(parts, LossBreakdown):
        parts = [getattr(parts, t) for t in TERMS]
    parts = [float(p) for p in parts]
    if not all(math.isfinite(p) for p in parts):
        raise ValueError(f"non-finite loss part in {parts}")
    return LossBreakdown(*parts, mask=parse_mask(mask))


# --------------------------------------------------------------------------- loss terms

def loss_velocity(v_bar, demo_speed):
    v_bar = np.asarray(v_bar, dtype=float)
    demo_speed = np.asarray(demo_speed, dtype=float)
    if v_bar.shape != demo_speed.shape:
        raise ValueError(f"v_bar {v_bar.shape} and demo speeds {demo_speed.shape} differ")
    diff = v_bar - demo_speed
    return float(np.sum(diff * diff)), 2.0 * diff


def log_softmin(values):
    v = -np.asarray(values, dtype=float)
    v = v - v.max()
    return v - np.log(np.sum(np.exp(v)))


def softmin(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("softmin of an empty array")
    return np.exp(log_softmin(values))


def trajectory_distances(xy, demo_xy):
    """Frobenius distance of each trajectory [N, T, 2] to the demo [T, 2]."""
    diff = np.asarray(xy, dtype=float) - np.asarray(demo_xy, dtype=float)
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def nearest_index(distances) -> int:
    return int(np.argmin(distances))


def loss_selection(costs, distances, direction="target_distance"):
    """Cross entropy between softmin(costs) and softmin(distances); returns (loss, dL/dcosts)."""
    costs = np.asarray(costs, dtype=float)
    log_p = log_softmin(costs)
    log_q = log_softmin(distances)
    p, q = np.exp(log_p), np.exp(log_q)
    if direction == "target_distance":
        return float(-np.sum(q * log_p)), q - p
    if direction == "target_cost":
        # -sum p log q, differentiated through p
        e = np.sum(p * log_q)
        return float(-e), p * (log_q - e)
    raise ValueError(f"unknown CE direction {direction!r}")


def loss_l2(costs, distances, demo_cost):
    """Cost of the lattice member nearest to the demo minus the demo's own cost."""
    k = nearest_index(distances)
    return float(costs[k] - demo_cost), k


def loss_consistency(costs):
    costs = np.asarray(costs, dtype=float)
    n = costs.size
    if n < 2:
        raise ValueError("consistency loss needs at least 2 costs")
    centred = costs - costs.mean()
    var = float(np.mean(centred * centred))
    if var <= VAR_EPS:
        return 1.0 / VAR_EPS, np.zeros(n)
    return 1.0 / var, -2.0 * centred / (n * var * var)


# --------------------------------------------------------------------------- stage 2 cache

@dataclass
class Stage2Sample:
    """Head-independent tensors for one scenario: lattice rows then the demo."""
    features: np.ndarray    # [F]
    D: np.ndarray           # [N, T, 3]
    col: np.ndarray         # [N, T]
    smooth: np.ndarray      # [N, 2]
    speeds: np.ndarray      # [N, T]
    dist: np.ndarray        # [N]
    D_demo: np.ndarray      # [T, 3]
    col_demo: np.ndarray    # [T]
    smooth_demo: np.ndarray  # [2]
    speed_demo: np.ndarray  # [T]


def demo_batch(scenario) -> TrajectoryBatch:
    ego = scenario.ego_state
    xy = scenario.demo[None, :, :2]
    return TrajectoryBatch.from_positions(xy, ego, scenario.dt)


def build_stage2_sample(scenario, predictor: PredictorModel, count=100, col_mode="integrated",
                        speeds=None, offsets=None) -> Stage2Sample:
    prediction = predict(scenario, predictor)
    ego = scenario.ego_state
    if speeds is not None:
        count = len(speeds) * len(offsets)
    samples = sample_lattice(ego, reference_for(ego, scenario.map), count, scenario.horizon, scenario.dt,
                             speeds, offsets)
    D, col = riskmap_inputs(samples, scenario, prediction, col_mode)
    demo = demo_batch(scenario)
    D_demo, col_demo = riskmap_inputs(demo, scenario, prediction, col_mode)
    return Stage2Sample(
        features=extract_features(scenario),
        D=D, col=col, smooth=smoothness_features(samples), speeds=samples.speed,
        dist=trajectory_distances(samples.xy, scenario.demo[:, :2]),
        D_demo=D_demo[0], col_demo=col_demo[0], smooth_demo=smoothness_features(demo)[0],
        # demo speeds as logged, which is what v_bar regresses to
        speed_demo=scenario.demo[:, 3].copy(),
    )


def _costs(D, col, smooth, speeds, params: RiskParams):
    """Per-row total cost plus the pieces needed for the backward pass."""
    R = map_risk(D, params.beta, params.lam).sum(axis=-2)          # [N, 3]
    C = col.sum(axis=-1)                                             # [N]
    channel = np.concatenate([R, C[:, None]], axis=1)               # [N, 4]
    if params.w_channels is not None:
        risk = channel @ params.w_channels
    else:
        risk = channel.sum(axis=1)
    vt = np.mean((params.v_bar - speeds) ** 2, axis=-1)
    total = risk + smooth @ params.w_smooth + params.w_d * vt
    return total, channel, vt


def stage2_loss(sample: Stage2Sample, params: RiskParams, mask=None, direction="target_distance"):
    """Stage-2 loss for one scenario and its gradient wrt the head outputs."""
    mask = parse_mask(mask)
    N = len(sample.dist)
    D = np.concatenate([sample.D, sample.D_demo[None]])
    col = np.concatenate([sample.col, sample.col_demo[None]])
    smooth = np.concatenate([sample.smooth, sample.smooth_demo[None]])
    speeds = np.concatenate([sample.speeds, sample.speed_demo[None]])
    total, channel, vt = _costs(D, col, smooth, speeds, params)
    costs, demo_cost = total[:N], total[N]

    l_sel, g_sel = loss_selection(costs, sample.dist, direction)
    l_l2, k = loss_l2(costs, sample.dist, demo_cost)
    l_con, g_con = loss_consistency(costs)
    l_v, g_v = loss_velocity(params.v_bar, sample.speed_demo)
    parts = total_loss([demo_cost, l_sel, l_l2, l_con, l_v], mask)

    g = np.zeros(N + 1)   # dL/dcost per row, demo last
    if mask["demo_cost"]:
        g[N] += 1.0
    if mask["l_sel"]:
        g[:N] += g_sel
    if mask["l_l2"]:
        g[k] += 1.0
        g[N] -= 1.0
    if mask["l_con"]:
        g[:N] += g_con

    if params.w_channels is not None:
        w = params.w_channels
        g_wch = g @ channel
    else:
        w = np.ones(4)
        g_wch = None
    T = D.shape[1]
    upstream = np.broadcast_to((g[:, None] * w[:3])[:, None, :], (N + 1, T, 3))
    g_beta, g_lam = map_risk_vjp(D, params.beta, params.lam, upstream)
    g_ws = g @ smooth
    g_wd = float(g @ vt)
    g_vbar = (g * params.w_d)[:, None] * 2.0 * (params.v_bar - speeds) / T
    g_vbar = g_vbar.sum(axis=0)
    if mask["l_v"]:
        g_vbar = g_vbar + g_v
    grads = RiskParams(g_beta, g_lam, g_ws, g_wd, g_vbar, g_wch)
    return parts, grads


def batch_loss(samples, heads: RiskHeads, mask=None, direction="target_distance"):
    """Mean stage-2 loss over ``samples`` and its gradient wrt every head parameter."""
    feats = np.stack([s.features for s in samples])
    out, cache = heads.forward(feats)
    B = len(samples)
    up = {"beta": np.zeros_like(out["beta"]), "lambda": np.zeros_like(out["lambda"]),
          "w_smooth": np.zeros_like(out["w_smooth"]), "w_d": np.zeros((B, 1)),
          "v_bar": np.zeros_like(out["v_bar"])}
    if "w_channels" in out:
        up["w_channels"] = np.zeros_like(out["w_channels"])
    parts = []
    for i, s in enumerate(samples):
        lb, g = stage2_loss(s, unbatch(out, i), mask, direction)
        parts.append(lb)
        up["beta"][i] = g.beta / B
        up["lambda"][i] = g.lam / B
        up["w_smooth"][i] = g.w_smooth / B
        up["w_d"][i, 0] = g.w_d / B
        up["v_bar"][i] = g.v_bar / B
        if g.w_channels is not None:
            up["w_channels"][i] = g.w_channels / B
    loss = float(np.mean([p.total for p in parts]))
    return loss, heads.backward(cache, up), parts


# --------------------------------------------------------------------------- optimiser

class AdamW:
    """Adam with decoupled weight decay applied to weight matrices only."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.weight_decay and k.rsplit(".", 1)[-1].startswith("W"):
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------------------- loops

@dataclass
class TrainResult:
    model: object
    curve: list[dict]   # one row per epoch, row 0 evaluated before any update


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def _check(loss, step):
    if not math.isfinite(loss):
        raise TrainingDivergence(step, loss)


def stage1_loss(model: PredictorModel, batch: AgentBatch):
    pred, cache = model.forward(batch.features, batch.speeds, batch.origin, batch.heading)
    loss, g = prediction_loss(pred, batch.truth)
    return loss, model.backward(cache, pred, g)


def _subset(batch: AgentBatch, idx) -> AgentBatch:
    return AgentBatch(batch.features[idx], batch.speeds[idx], batch.origin[idx], batch.heading[idx],
                      batch.truth[idx])


def train_stage1(scenarios, config: TrainConfig, model: PredictorModel | None = None) -> TrainResult:
    rng = np.random.default_rng([config.seed, 1])
    if model is None:
        model = PredictorModel.init(rng, horizon=scenarios[0].horizon, dt=scenarios[0].dt)
    data = AgentBatch.concat([AgentBatch.from_scenario(s, with_truth=True) for s in scenarios])
    if len(data) == 0:
        raise ConfigError("no agents with future_truth in the training scenarios")
    params = model.parameters()
    opt = AdamW(params, config.lr, weight_decay=config.weight_decay)
    loss0, _ = stage1_loss(model, data)
    _check(loss0, 0)
    curve = [{"epoch": 0, "l_pre": loss0}]
    step = 0
    # a diverging run overflows before _check sees the non-finite loss
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(1, config.epochs + 1):
            for idx in _batches(len(data), config.batch_size, rng):
                step += 1
                loss, grads = stage1_loss(model, _subset(data, idx))
                _check(loss, step)
                opt.step(grads)
            loss, _ = stage1_loss(model, data)
            _check(loss, step)
            curve.append({"epoch": epoch, "l_pre": loss})
    return TrainResult(model, curve)


def stage2_samples(scenarios, predictor, config: TrainConfig):
    return [build_stage2_sample(s, predictor, config.count, config.col_mode) for s in scenarios]


def _curve_row(epoch, parts):
    row = {"epoch": epoch}
    for t in TERMS:
        row[t] = float(np.mean([getattr(p, t) for p in parts]))
    row["total"] = float(np.mean([p.total for p in parts]))
    return row


def train_stage2(scenarios, predictor: PredictorModel, config: TrainConfig,
                 heads: RiskHeads | None = None, samples=None) -> TrainResult:
    """Fit the risk/cost heads with the predictor frozen.

    ``samples`` may carry a precomputed ``stage2_samples`` cache to share
    between runs that differ only in the mask or learning rate.
    """
    rng = np.random.default_rng([config.seed, 2])
    if heads is None:
        heads = RiskHeads.init(rng, horizon=scenarios[0].horizon, tv=config.tv)
    if samples is None:
        samples = stage2_samples(scenarios, predictor, config)
    params = heads.parameters()
    opt = AdamW(params, config.lr, weight_decay=config.weight_decay)
    _, _, parts = batch_loss(samples, heads, config.mask, config.ce_direction)
    row = _curve_row(0, parts)
    _check(row["total"], 0)
    curve = [row]
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_parts = []
        for idx in _batches(len(samples), config.batch_size, rng):
            step += 1
            loss, grads, parts = batch_loss([samples[i] for i in idx], heads, config.mask,
                                            config.ce_direction)
            _check(loss, step)
            opt.step(grads)
            epoch_parts.extend(parts)
        curve.append(_curve_row(epoch, epoch_parts))
    return TrainResult(heads, curve)


# --------------------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(loss_fn, params: dict, tolerance=1e-4, step=1e-5, keys=None) -> GradCheckReport:
    """Central differences against ``loss_fn() -> (loss, grads)`` on every entry of ``params``.

    ``params`` arrays are perturbed in place and restored. The relative error
    of an entry is ``|a - n| / max(|a|, |n|, floor)``. The floor is the
    larger of 1e-6 of the biggest analytic magnitude and the gradient size
    at which central-difference roundoff (about ``10 eps |loss| / step``)
    would itself amount to a 1e-4 relative error, so entries the oracle
    cannot resolve are judged on absolute error instead.
    """
    loss0, analytic = loss_fn()
    analytic = {k: np.array(v, dtype=float) for k, v in analytic.items()}
    scale = max((np.max(np.abs(v)) for v in analytic.values() if v.size), default=0.0)
    noise = 10.0 * np.finfo(float).eps * max(1.0, abs(loss0)) / step
    floor = max(1e-6 * max(1.0, scale), noise / 1e-4)
    worst, worst_key, n = 0.0, "", 0
    for k in sorted(keys or params):
        p = params[k]
        flat = p.reshape(-1)
        a = analytic[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up, _ = loss_fn()
            flat[i] = old - step
            down, _ = loss_fn()
            flat[i] = old
            num = (up - down) / (2.0 * step)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), floor)
            n += 1
            if err > worst:
                worst, worst_key = err, f"{k}[{i}]"
    return GradCheckReport(float(worst), worst_key, n, tolerance)


def write_curve_csv(curve, path) -> None:
    keys = list(curve[0].keys()) if curve else ["epoch"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in curve:
            w.writerow([row[k] if k == "epoch" else repr(float(row[k])) for k in keys])


def with_mask(config: TrainConfig, mask) -> TrainConfig:
    return replace(config, mask=parse_mask(mask))
