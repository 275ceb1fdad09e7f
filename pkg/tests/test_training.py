import json
import math

import numpy as np
import pytest

from augment import AugmentConfig
from autodiff import Tensor, backward, grad_check
from errors import EmptySplit, InvalidConfig, MissingGrad, OutOfRange, ShapeMismatch
from network import ParameterSet, Parameter, build_model, set_trainable
from training import (
    AdamW,
    LossConfig,
    MomentState,
    OptimizerConfig,
    Sample,
    ScheduleConfig,
    TrainConfig,
    UnfreezeSchedule,
    adamw_update,
    dice_focal_loss,
    lr_at,
    subsample_cases,
    train,
    unfreeze_state,
)
from volume_io import Mask3, Volume3

NO_AUG = AugmentConfig.disabled()


# --- loss ------------------------------------------------------------------

def test_confident_correct_logits_give_near_zero_loss(rng):
    g = (rng.random((2, 1, 4, 4, 4)) < 0.5).astype(np.float64)
    logits = Tensor(np.where(g > 0, 20.0, -20.0), dtype=np.float64)
    assert dice_focal_loss(logits, g).item() < 1e-4


def test_loss_at_zero_logits_matches_closed_form():
    g = np.zeros((1, 1, 2, 2, 2))
    g.reshape(-1)[:4] = 1.0
    cfg = LossConfig()
    n, gsum = g.size, g.sum()
    l_dice = 1.0 - (2 * 0.5 * gsum + cfg.dice_eps) / (0.5 * n + gsum + cfg.dice_eps)
    # every voxel contributes 0.5 * 0.5**2 * log(0.5), positives and negatives alike
    l_focal = -0.5 * 0.25 * math.log(0.5)
    loss = dice_focal_loss(Tensor(np.zeros(g.shape), dtype=np.float64), g, cfg).item()
    assert abs(loss - (l_dice + l_focal)) < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((2, 1, 4, 4, 4)), requires_grad=True, dtype=np.float64)
    g = (rng.random((2, 1, 4, 4, 4)) < 0.3).astype(np.float64)
    report = grad_check(lambda z: dice_focal_loss(z, g), [logits], tol=1e-4)
    assert report.passed, report.errors


def test_loss_is_finite_for_saturated_logits():
    g = np.ones((1, 1, 2, 2, 2))
    logits = Tensor(np.full(g.shape, -80.0), requires_grad=True, dtype=np.float64)
    loss = dice_focal_loss(logits, g)
    assert np.isfinite(loss.item())
    backward(loss)
    assert np.isfinite(logits.grad).all()


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_focal_loss(Tensor(np.zeros((1, 1, 2, 2, 2))), np.zeros((1, 1, 2, 2, 3)))


# --- optimizer -------------------------------------------------------------

def _param(value, grad, trainable=True):
    p = Parameter("w", Tensor(np.array([value]), requires_grad=True, dtype=np.float64), "head", trainable)
    if trainable:
        p.tensor.grad = np.array([grad])
    return ParameterSet([p])


def test_adamw_first_step_closed_form():
    params = _param(0.0, 1.0)
    AdamW(params, OptimizerConfig(weight_decay=0.0)).step(0.1)
    assert params["w"].data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adamw_pure_decay_path():
    cfg = OptimizerConfig(weight_decay=0.1)
    params = _param(1.0, 0.0)
    AdamW(params, cfg).step(0.01)
    state = MomentState(np.zeros(1), np.zeros(1))
    expected = adamw_update(np.array([1.0]), np.array([0.0]), state, 0.01, cfg)
    assert params["w"].data[0] == expected[0]
    assert expected[0] == pytest.approx(1.0 - 0.01 * 0.1 * 1.0)


def test_adamw_steps_follow_the_update_rule():
    cfg = OptimizerConfig(weight_decay=0.05)
    params = _param(0.3, 0.0)
    opt = AdamW(params, cfg)
    state = MomentState(np.zeros(1), np.zeros(1))
    expected = np.array([0.3])
    for grad, lr in ((0.7, 0.1), (-0.2, 0.05), (1.5, 0.02)):
        params["w"].tensor.grad = np.array([grad])
        opt.step(lr)
        expected = adamw_update(expected, np.array([grad]), state, lr, cfg)
        assert params["w"].data[0] == expected[0]
    assert opt.state["w"].t == state.t == 3


def test_adamw_leaves_frozen_parameters_untouched():
    params = _param(0.5, 0.0, trainable=False)
    params["w"].tensor.grad = np.array([3.0])
    before = params["w"].data.tobytes()
    AdamW(params).step(0.1)
    assert params["w"].data.tobytes() == before


def test_adamw_missing_grad():
    params = _param(0.5, 0.0)
    params["w"].tensor.grad = None
    with pytest.raises(MissingGrad):
        AdamW(params).step(0.1)


def test_unfrozen_parameter_restarts_from_zero_moments():
    cfg = OptimizerConfig(weight_decay=0.0)
    params = _param(0.0, 1.0)
    opt = AdamW(params, cfg)
    opt.step(0.1)
    opt.step(0.1)
    set_trainable(params, ["head"], False)
    opt.step(0.1)
    set_trainable(params, ["head"], True)
    params["w"].tensor.grad = np.array([1.0])
    before = params["w"].data[0]
    opt.step(0.1)
    # a fresh first step moves by exactly lr
    assert params["w"].data[0] == pytest.approx(before - 0.1, abs=1e-8)
    assert opt.state["w"].t == 1


# --- schedules -------------------------------------------------------------

def test_warmup_cosine_endpoints():
    cfg = ScheduleConfig.stage1(horizon_epochs=1000, warmup_epochs=50)
    assert lr_at(cfg, 49) == 1e-3
    assert lr_at(cfg, 0) == pytest.approx(1e-3 / 50)
    assert lr_at(cfg, 999) == 1e-6
    with pytest.raises(OutOfRange):
        lr_at(cfg, 1000)


def test_warmup_cosine_is_continuous():
    cfg = ScheduleConfig.stage1()
    values = [lr_at(cfg, e) for e in range(cfg.horizon_epochs)]
    bound = (cfg.lr_max - cfg.lr_min) * math.pi / (cfg.horizon_epochs - cfg.warmup_epochs) \
        + cfg.lr_max / cfg.warmup_epochs
    assert max(abs(b - a) for a, b in zip(values, values[1:])) <= bound


def test_stagewise_segment_maxima():
    cfg = ScheduleConfig.stage2((61, 181), horizon_epochs=1000, warmup_epochs=10)
    peaks = [lr_at(cfg, start + cfg.warmup_epochs - 1) for start, _ in cfg.segments()]
    assert peaks == [1e-3, 1e-3 / 10, 1e-3 / 100]
    assert peaks == pytest.approx([1e-3, 1e-4, 1e-5])
    assert lr_at(cfg, 999) == pytest.approx(1e-5 * 1e-3)
    # the step before a restart is the segment minimum
    assert lr_at(cfg, 60) == pytest.approx(1e-6)


def test_schedule_validation():
    with pytest.raises(InvalidConfig):
        ScheduleConfig(lr_min=1.0, lr_max=0.1)
    with pytest.raises(InvalidConfig):
        ScheduleConfig(kind="stagewise_cosine", warmup_epochs=5, horizon_epochs=20, restart_boundaries=(3, 10))
    with pytest.raises(InvalidConfig):
        ScheduleConfig(kind="stagewise_cosine", warmup_epochs=1, horizon_epochs=20, restart_boundaries=(10, 5))


# --- unfreezing ------------------------------------------------------------

def test_unfreeze_steps_match_boundaries():
    sched = UnfreezeSchedule()
    step_a = unfreeze_state(sched, 30)
    assert not any(t.startswith("enc.") for t in step_a)
    assert {"head", "bottleneck", "dec.stage1", "dec.stage6"} <= step_a
    step_b = unfreeze_state(sched, 100)
    assert {"enc.stage4", "enc.stage7"} <= step_b
    assert not {"enc.stage1", "enc.stage2", "enc.stage3"} & step_b
    step_c = unfreeze_state(sched, 200)
    assert {f"enc.stage{k}" for k in range(1, 8)} <= step_c
    assert unfreeze_state(sched, 60) == step_a
    assert unfreeze_state(sched, 61) == step_b
    with pytest.raises(OutOfRange):
        unfreeze_state(sched, 1000)


def test_unfreeze_scaling():
    scaled = UnfreezeSchedule().scaled(100)
    assert (scaled.step_a_end, scaled.step_b_end, scaled.max_epochs) == (6, 18, 100)
    assert scaled.restart_boundaries() == (7, 19)
    with pytest.raises(InvalidConfig):
        UnfreezeSchedule(step_a_end=10, step_b_end=5)


# --- epoch loop ------------------------------------------------------------

def _samples(rng, prefix, n, dims=(8, 8, 8)):
    out = []
    for i in range(n):
        label = np.zeros(dims, dtype=np.uint8)
        lo = rng.integers(1, 3, size=3)
        label[lo[0]:lo[0] + 4, lo[1]:lo[1] + 4, lo[2]:lo[2] + 4] = 1
        image = label * 2.0 + rng.normal(0.0, 0.3, size=dims)
        out.append(Sample(f"{prefix}{i}", Volume3(image), Mask3(label)))
    return out


def _cfg(**kw):
    base = dict(batch_size=2, max_epochs=3, early_stop_patience=5, seed=0, augment=NO_AUG,
                record_wall_clock=False)
    base.update(kw)
    return TrainConfig(**base)


def test_train_rejects_empty_and_overlapping_splits(tiny_spec, rng):
    model = build_model(tiny_spec, 0)
    samples = _samples(rng, "c", 3)
    sched = ScheduleConfig.stage1(3, 1)
    with pytest.raises(EmptySplit):
        train(model, [], samples, _cfg(), sched)
    with pytest.raises(EmptySplit):
        train(model, samples, [], _cfg(), sched)
    with pytest.raises(InvalidConfig):
        train(model, samples, samples[:1], _cfg(), sched)


def test_patience_one_with_constant_score_stops_at_second_epoch(tiny_spec, rng, monkeypatch):
    import training
    monkeypatch.setattr(training, "validation_dice", lambda *a, **k: 0.5)
    model = build_model(tiny_spec, 0)
    result = train(model, _samples(rng, "t", 2), _samples(rng, "v", 1),
                   _cfg(max_epochs=10, early_stop_patience=1), ScheduleConfig.stage1(10, 1))
    assert len(result.log) == 2
    assert result.stopped_early
    assert result.best_epoch == 0



def test_progress_messages_count_epochs(tiny_spec, rng, monkeypatch, caplog):
    import training
    monkeypatch.setattr(training, "validation_dice", lambda *a, **k: 0.5)
    caplog.set_level("INFO", logger="training")
    train(build_model(tiny_spec, 0), _samples(rng, "t", 2), _samples(rng, "v", 1),
          _cfg(max_epochs=10, early_stop_patience=1), ScheduleConfig.stage1(10, 1))
    messages = [r.getMessage() for r in caplog.records if r.name == "training"]
    assert messages[0] == "Training on 2 cases for up to 10 epochs (1 validation cases)..."
    assert messages[1].startswith("  Epoch 1/10: loss ")
    assert messages[-1] == "  Early stop after 2/10 epochs, best val Dice 0.5000 at epoch 0"


def test_training_log_records_every_epoch(tiny_spec, rng, tmp_path):
    model = build_model(tiny_spec, 0)
    log_path = tmp_path / "log.jsonl"
    result = train(model, _samples(rng, "t", 3), _samples(rng, "v", 2), _cfg(), ScheduleConfig.stage1(3, 1),
                   log_path=log_path)
    lines = [json.loads(x) for x in log_path.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert set(lines[0]) == {"epoch", "loss", "lr", "val_dice", "trainable_tags", "wall_clock_s"}
    assert all(np.isfinite(r["loss"]) for r in lines)
    best = max(range(3), key=lambda e: (lines[e]["val_dice"], -e))
    assert result.best_epoch == best


def test_same_seed_gives_identical_results(tiny_spec):
    def run():
        rng = np.random.default_rng(4)
        model = build_model(tiny_spec, 2)
        cfg = _cfg(augment=AugmentConfig(p_elastic=0.0))
        return train(model, _samples(rng, "t", 3), _samples(rng, "v", 1), cfg, ScheduleConfig.stage1(3, 1))

    a, b = run(), run()
    assert [r.to_dict() for r in a.log] == [r.to_dict() for r in b.log]
    for p in a.best_params:
        assert p.data.tobytes() == b.best_params[p.name].data.tobytes()


def test_progressive_unfreezing_keeps_frozen_groups_bitwise(tiny_spec, rng):
    model = build_model(tiny_spec, 0)
    unfreeze = UnfreezeSchedule(step_a_end=1, step_b_end=2, deep_stage_cutoff=1, max_epochs=4)
    initial = model.params.snapshot()
    seen = []

    def check(epoch, step, params):
        for p in params:
            unchanged = np.array_equal(p.data, initial[p.name])
            if epoch <= 1 and p.stage_tag.startswith("enc."):
                assert unchanged, p.name
            if epoch <= 2 and p.stage_tag == "enc.stage1":
                assert unchanged, p.name
        seen.append(epoch)

    result = train(model, _samples(rng, "t", 2), _samples(rng, "v", 1), _cfg(max_epochs=4),
                   ScheduleConfig.stage1(4, 1), unfreeze=unfreeze, on_step=check)
    assert seen == [0, 1, 2, 3]
    tags = [r.trainable_tags for r in result.log]
    assert tags[0] == tags[1] == ["bottleneck", "dec.stage1", "head"]
    assert tags[2] == ["enc.stage2", "bottleneck", "dec.stage1", "head"]
    assert tags[3] == ["enc.stage1", "enc.stage2", "bottleneck", "dec.stage1", "head"]


def test_subsample_cases_is_seeded_and_ordered(rng):
    samples = _samples(rng, "c", 6)
    a = subsample_cases(samples, 3, seed=1)
    assert [s.case_id for s in a] == [s.case_id for s in subsample_cases(samples, 3, seed=1)]
    assert [s.case_id for s in a] == sorted(s.case_id for s in a)
    with pytest.raises(InvalidConfig):
        subsample_cases(samples, 7, seed=0)
