import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskmap.encoder import RiskHeads
from riskmap.predictor import PredictorModel
from riskmap.scenario import generate_mixed, generate_scenarios
from riskmap.training import (
    TERMS, AdamW, ConfigError, LossBreakdown, TrainConfig, TrainingDivergence, batch_loss, gradient_check,
    loss_consistency, loss_l2, loss_selection, loss_velocity, parse_mask, softmin, stage2_loss,
    stage2_samples, total_loss, train_stage1, train_stage2, with_mask, write_curve_csv,
)
from riskmap.encoder import unbatch

from conftest import toy_stage2


def test_loss_velocity_examples():
    v = np.linspace(0, 12, 30)
    assert loss_velocity(v, v)[0] == 0.0
    assert loss_velocity(v + 1.0, v)[0] == pytest.approx(30.0)
    vb = v + np.random.default_rng(0).normal(size=30)
    assert np.allclose(loss_velocity(vb, v)[1], 2 * (vb - v))
    with pytest.raises(ValueError):
        loss_velocity(v, v[:-1])


def test_softmin_examples():
    assert np.allclose(softmin([4.2, 4.2]), [0.5, 0.5])
    assert np.allclose(softmin([0.0, math.log(3.0)]), [0.75, 0.25])
    assert np.all(np.isfinite(softmin([1e4, -1e4, 0.0])))


@settings(max_examples=100)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_softmin_normalised_and_shift_invariant(values, shift):
    p = softmin(values)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(softmin(np.asarray(values) + shift), p, atol=1e-12)


def test_selection_examples():
    d = np.array([0.3, 1.7, 2.2])
    q = softmin(d)
    val, _ = loss_selection(d, d)
    assert val == pytest.approx(-np.sum(q * np.log(q)))
    val, _ = loss_selection([0.0, 10.0], [0.0, 1e3])
    assert val == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-9)
    assert val == pytest.approx(4.54e-5, rel=1e-3)


@pytest.mark.parametrize("direction", ["target_distance", "target_cost"])
def test_selection_gradient(direction):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        costs = {"c": rng.normal(size=12) * 3}
        dist = rng.uniform(0, 5, 12)
        rep = gradient_check(lambda: (lambda v, g: (v, {"c": g}))(*loss_selection(costs["c"], dist, direction)),
                             costs, 1e-4)
        assert rep.passed, rep


def test_l2_examples():
    costs = np.array([5.0, 3.0, 7.0])
    assert loss_l2(costs, np.array([2.0, 0.0, 1.0]), 3.0)[0] == 0.0
    assert loss_l2(costs, np.array([2.0, 0.5, 1.0]), 1.0)[0] == pytest.approx(2.0)
    perm = np.array([2, 0, 1])
    assert loss_l2(costs[perm], np.array([2.0, 0.5, 1.0])[perm], 1.0)[0] == pytest.approx(2.0)
    assert loss_l2(np.array([1.0, 1.0]), np.array([0.2, 0.2]), 0.0)[1] == 0


def test_consistency_examples():
    assert loss_consistency([0.0, 2.0])[0] == pytest.approx(1.0)
    assert loss_consistency([3.0, 3.0, 3.0])[0] == pytest.approx(1e8)
    c = np.random.default_rng(0).normal(size=9)
    assert loss_consistency(4.0 * c)[0] == pytest.approx(loss_consistency(c)[0] / 16.0)
    with pytest.raises(ValueError):
        loss_consistency([1.0])


def test_consistency_gradient():
    c = {"c": np.random.default_rng(1).normal(size=7)}
    rep = gradient_check(lambda: (lambda v, g: (v, {"c": g}))(*loss_consistency(c["c"])), c, 1e-4)
    assert rep.passed


def test_total_loss_examples():
    assert total_loss([1, 1, 1, 1, 1]).total == 5.0
    assert total_loss([1, 1, 1, 1, 1], "-demo_cost").total == 4.0
    lb = total_loss([2.0, 3.0, -1.0, 0.5, 7.0], "-l_v")
    assert lb.total == 2.0 + 3.0 - 1.0 + 0.5
    parts = [0.1, 0.2, 0.3, 0.4, 0.5]
    assert total_loss(parts).total == 0.1 + 0.2 + 0.3 + 0.4 + 0.5
    with pytest.raises(ConfigError):
        parse_mask("-demo_cost,-l_sel,-l_l2,-l_con,-l_v")
    with pytest.raises(ConfigError):
        parse_mask("-l_foo")


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(count=50)


def test_stage2_loss_terms_signs():
    for seed in range(6):
        sample, heads = toy_stage2(seed)
        out, _ = heads.forward(sample.features[None])
        parts, _ = stage2_loss(sample, unbatch(out))
        for t in ("demo_cost", "l_sel", "l_con", "l_v"):
            assert getattr(parts, t) >= 0.0
        assert math.isfinite(parts.l_l2)


def stage2_check(sample, heads, mask=None, direction="target_distance"):
    def fn():
        loss, grads, _ = batch_loss([sample], heads, mask, direction)
        return loss, grads
    return gradient_check(fn, heads.parameters(), 1e-4)


@pytest.mark.parametrize("mask", [None, "-l_con", "-demo_cost,-l_l2"])
def test_stage2_pipeline_gradient(mask):
    sample, heads = toy_stage2(1)
    rep = stage2_check(sample, heads, mask)
    assert rep.passed, rep


def test_stage2_gradient_with_channel_weights():
    sample, _ = toy_stage2(2)
    heads = RiskHeads.init(np.random.default_rng(0), hidden=3, tv=False, weighted_channels=True)
    for p in heads.parameters().values():
        p += np.random.default_rng(1).normal(0, 0.05, size=p.shape)
    assert stage2_check(sample, heads, direction="target_cost").passed


def test_gradient_check_linear_and_negative_control():
    w = {"w": np.array([1.0, -2.0, 3.0])}
    x = np.array([0.5, 0.25, -4.0])
    # a linear loss has no truncation error, so a coarse step keeps roundoff negligible
    rep = gradient_check(lambda: (float(w["w"] @ x), {"w": x}), w, 1e-4, step=0.25)
    assert rep.max_rel_error < 1e-10
    bad = gradient_check(lambda: (float(w["w"] @ x), {"w": x * np.array([1, 1, 1.01])}), w, 1e-4)
    assert not bad.passed and bad.worst == "w[2]"


def test_adamw_zero_lr_leaves_params():
    p = {"h.W0": np.ones((2, 2)), "h.b0": np.ones(2)}
    opt = AdamW(p, lr=0.0)
    opt.step({"h.W0": np.ones((2, 2)), "h.b0": np.ones(2)})
    assert np.all(p["h.W0"] == 1.0) and np.all(p["h.b0"] == 1.0)


def test_adamw_decays_weights_only():
    p = {"h.W0": np.ones(3), "h.b0": np.ones(3)}
    AdamW(p, lr=0.1, weight_decay=0.5).step({"h.W0": np.zeros(3), "h.b0": np.zeros(3)})
    assert np.allclose(p["h.W0"], 0.95) and np.allclose(p["h.b0"], 1.0)


@pytest.fixture(scope="module")
def tiny():
    return generate_mixed(2, 21)


def test_stage1_zero_epochs_returns_initial(tiny):
    model = PredictorModel.init(np.random.default_rng(9))
    before = {k: v.copy() for k, v in model.parameters().items()}
    res = train_stage1(tiny, TrainConfig(epochs=0), model)
    assert len(res.curve) == 1
    assert all(np.array_equal(before[k], v) for k, v in res.model.parameters().items())


def test_stage1_deterministic_and_decreasing(tiny):
    a = train_stage1(tiny, TrainConfig(epochs=5, seed=3)).curve
    b = train_stage1(tiny, TrainConfig(epochs=5, seed=3)).curve
    assert a == b and a[-1]["l_pre"] <= a[0]["l_pre"]
    c = train_stage1(tiny, TrainConfig(epochs=5, seed=4)).curve
    assert c != a


def test_stage1_divergence_reports_step(tiny):
    with pytest.raises(TrainingDivergence) as exc:
        train_stage1(tiny, TrainConfig(epochs=3, lr=1e6))
    assert exc.value.step >= 1


def test_stage2_zero_lr_and_determinism(tiny):
    pred = PredictorModel.init(np.random.default_rng(0))
    cfg = TrainConfig(epochs=2, lr=0.0, count=25)
    heads = RiskHeads.init(np.random.default_rng(5))
    before = {k: v.copy() for k, v in heads.parameters().items()}
    train_stage2(tiny, pred, cfg, heads)
    assert all(np.array_equal(before[k], v) for k, v in heads.parameters().items())
    cfg = TrainConfig(epochs=3, lr=3e-3, count=25, seed=1)
    samples = stage2_samples(tiny, pred, cfg)
    r1 = train_stage2(tiny, pred, cfg, samples=samples)
    r2 = train_stage2(tiny, pred, cfg, samples=samples)
    assert r1.curve == r2.curve
    assert r1.curve[-1]["total"] < r1.curve[0]["total"]
    r3 = train_stage2(tiny, pred, with_mask(cfg, "-l_sel"), samples=samples)
    assert r3.curve != r1.curve


def test_curve_csv(tmp_path, tiny):
    res = train_stage1(tiny, TrainConfig(epochs=2))
    path = tmp_path / "loss.csv"
    write_curve_csv(res.curve, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,l_pre" and len(lines) == 4
