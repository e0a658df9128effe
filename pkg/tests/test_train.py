import copy

import numpy as np
import pytest
import torch

from madm.core import ImageSample, LabelMap, ShapeError, derived_rng
from madm.data import synthetic_arrays
from madm.dplg import PseudoLabel, teacher_predict
from madm.train import (
    ModelPair,
    TrainConfig,
    TrainingDiverged,
    build_model,
    class_mix_mask,
    compute_losses,
    distill,
    ema_alpha_at,
    ema_update,
    fit_self_training,
    load_model,
    make_optimizer,
    parameter_hash,
    prepare_batch,
    pretrain_autoencoder,
    pretrained_backbone,
    reconstruction_mae,
    save_model,
    set_autoencoder_trainable,
    strong_augment,
    train_step,
)
from madm.backbone import DeskBackbone, read_checkpoint, save_checkpoint
from madm.segmentation import pixel_ce


@pytest.fixture(scope="module")
def synth32():
    src, tgt, lab = synthetic_arrays(11, 16, 32, "edge")
    return src.astype(np.float32) / 255, lab, tgt.astype(np.float32) / 255


def _scalar_pair(t, s):
    teacher, student = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        teacher.weight.fill_(t)
        student.weight.fill_(s)
    return ModelPair(student, teacher)


def test_ema_fixed_points_and_scalar_case():
    pair = _scalar_pair(2.0, 0.0)
    assert ema_update(pair, 1.0).teacher.weight.item() == 2.0
    assert ema_update(_scalar_pair(2.0, 0.0), 0.0).teacher.weight.item() == 0.0
    d = _scalar_pair(2.0, 0.0)
    d.teacher.double()
    d.student.double()
    assert ema_update(d, 0.999).teacher.weight.item() == 0.999 * 2.0 + 0.001 * 0.0 == 1.998


def test_ema_constant_student_converges():
    pair = _scalar_pair(5.0, 1.0)
    pair.teacher.double()
    pair.student.double()
    for _ in range(2000):
        ema_update(pair, 0.99)
    assert pair.teacher.weight.item() == pytest.approx(1.0, abs=1e-6)


def test_ema_shape_mismatch():
    with pytest.raises(ShapeError):
        ModelPair(torch.nn.Linear(2, 2), torch.nn.Linear(3, 2))


@pytest.mark.parametrize("i,expected", [(0, 0.0), (1, 0.5), (9, 0.9), (10 ** 6, 0.999)])
def test_ema_warmup(i, expected):
    assert ema_alpha_at(i, 0.999) == pytest.approx(expected)


def _ones(shape, value=0.5):
    return ImageSample(np.full(shape + (3,), value))


def test_augment_single_class_pastes_all_or_nothing():
    cfg = TrainConfig(jitter_prob=0.0, blur_prob=0.0)
    y_s = LabelMap(np.full((8, 8), 2), 6)
    pl = PseudoLabel(LabelMap(np.zeros((8, 8), dtype=int), 6), 1.0)
    x, y = strong_augment(_ones((8, 8), 0.2), (_ones((8, 8), 0.9), y_s), pl,
                          np.random.default_rng(0), cfg)
    assert np.all(y.classes == 2) and np.allclose(x.pixels, 0.9)


def test_augment_identity_without_paste_or_pixel_ops(rng):
    cfg = TrainConfig(jitter_prob=0.0, blur_prob=0.0)
    x_t = ImageSample(rng.random((8, 8, 3)))
    y_s = LabelMap(np.full((8, 8), 255), 6)
    pl = PseudoLabel(LabelMap(rng.integers(0, 6, (8, 8)), 6), 0.3)
    x, y = strong_augment(x_t, (_ones((8, 8)), y_s), pl, np.random.default_rng(0), cfg)
    assert np.array_equal(x.pixels, x_t.pixels)
    assert np.array_equal(y.classes, pl.labels.classes)


def test_augment_is_seeded(rng):
    x_t, x_s = ImageSample(rng.random((16, 16, 3))), ImageSample(rng.random((16, 16, 3)))
    y_s = LabelMap(rng.integers(0, 6, (16, 16)), 6)
    pl = PseudoLabel(LabelMap(rng.integers(0, 6, (16, 16)), 6), 0.5)
    a = strong_augment(x_t, (x_s, y_s), pl, np.random.default_rng(4))
    b = strong_augment(x_t, (x_s, y_s), pl, np.random.default_rng(4))
    assert np.array_equal(a[0].pixels, b[0].pixels) and np.array_equal(a[1].classes, b[1].classes)


def test_augment_rejects_resolution_mismatch():
    y = LabelMap(np.zeros((8, 8), dtype=int), 6)
    with pytest.raises(ShapeError):
        strong_augment(_ones((16, 16)), (_ones((8, 8)), y), PseudoLabel(y, 1.0),
                       np.random.default_rng(0))


def test_class_mix_picks_half_of_present_classes(rng):
    y = torch.from_numpy(np.repeat(np.arange(5), 4).reshape(4, 5))
    m = class_mix_mask(y, rng)
    assert len(torch.unique(y[m])) == 3


def _batch(synth, cfg, model, i=0, idx=(0, 1)):
    x_s, y_s, x_t = synth
    idx = list(idx)
    xs = torch.from_numpy(x_s[idx].transpose(0, 3, 1, 2).copy())
    xt = torch.from_numpy(x_t[idx].transpose(0, 3, 1, 2).copy())
    return xs, torch.from_numpy(y_s[idx].astype(np.int64)), xt


def _prepared(synth, cfg, pair, q=None):
    xs, ys, xt = _batch(synth, cfg, pair.student)
    b = prepare_batch(pair, xs, ys, xt, 0, cfg, np.random.default_rng(0), cfg.schedule(),
                      cfg.get_palette())
    if q is not None:
        b.q = torch.full_like(b.q, q)
    return b


def test_loss_composition_lambda_zero(tiny_cfg, synth32):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "lambda_reg": 0.0})
    pair = ModelPair(build_model(cfg))
    losses = compute_losses(pair.student, _prepared(synth32, cfg, pair), cfg)
    assert losses["total"].item() == losses["L_s"].item() + losses["L_t"].item()


def test_loss_composition_zero_confidence(tiny_cfg, synth32):
    pair = ModelPair(build_model(tiny_cfg))
    losses = compute_losses(pair.student, _prepared(synth32, tiny_cfg, pair, q=0.0), tiny_cfg)
    assert losses["L_t"].item() == 0.0
    expected = losses["L_s"] + tiny_cfg.lambda_reg * (losses["L_s_reg"] + losses["L_t_reg"])
    assert losses["total"].item() == pytest.approx(expected.item(), rel=1e-6)


def test_train_step_isolates_teacher(tiny_cfg, synth32):
    """After a step the teacher equals the EMA of its old self and the new student, bitwise."""
    pair = ModelPair(build_model(tiny_cfg))
    snapshot = copy.deepcopy(pair.teacher)
    before_s = parameter_hash(pair.student)
    xs, ys, xt = _batch(synth32, tiny_cfg, pair.student)
    vals = train_step(pair, make_optimizer(pair.student, tiny_cfg), (xs, ys), xt, 5, tiny_cfg,
                      np.random.default_rng(0))
    assert parameter_hash(pair.student) != before_s
    assert all(p.grad is None for p in pair.teacher.parameters())
    replay = ema_update(ModelPair(pair.student, snapshot), ema_alpha_at(5, tiny_cfg.ema_alpha))
    assert parameter_hash(replay.teacher) == parameter_hash(pair.teacher)
    assert set(vals) >= {"L_s", "L_t", "L_s_reg", "L_t_reg", "total", "q_mean", "k"}


def test_regression_targets_carry_no_gradient(tiny_cfg, synth32):
    pair = ModelPair(build_model(tiny_cfg))
    b = _prepared(synth32, tiny_cfg, pair)
    assert not b.reg_s[0].requires_grad and not b.reg_t[0].requires_grad
    assert not b.y_mix.requires_grad and not b.q.requires_grad


def test_nonfinite_loss_aborts(tiny_cfg, synth32):
    pair = ModelPair(build_model(tiny_cfg))
    with torch.no_grad():
        pair.student.head.classifier.bias.fill_(float("nan"))
    xs, ys, xt = _batch(synth32, tiny_cfg, pair.student)
    with pytest.raises(TrainingDiverged, match="iteration 3"):
        train_step(pair, make_optimizer(pair.student, tiny_cfg), (xs, ys), xt, 3, tiny_cfg,
                   np.random.default_rng(0))


def test_hr_branch_changes_head_gradient(tiny_cfg, synth32):
    """Blanking the decoded feature changes the gradient reaching the head."""
    model = build_model(tiny_cfg, seed=0)
    xs, ys, _ = _batch(synth32, tiny_cfg, model)
    grads = []
    for keep in (True, False):
        model.zero_grad()
        z = model.encode(xs)
        feats, o = model.backbone.unet_forward(z)
        hr = model.backbone.decode(o)
        logits = model.head(feats, hr if keep else torch.zeros_like(hr), xs.shape[-2:])
        pixel_ce(logits, ys).backward()
        grads.append(model.head.classifier.weight.grad.clone())
    assert not torch.allclose(grads[0], grads[1])


@pytest.mark.slow
def test_total_loss_trend_is_negative():
    cfg = TrainConfig.desk("edge", iterations=50, ae_steps=0, seed=0, resolution=32, n_scenes=32)
    src, tgt, lab = synthetic_arrays(0, 32, 32, "edge")
    res = fit_self_training(cfg, src / 255.0, lab, tgt / 255.0)
    total = np.array([r["total"] for r in res.history])
    slope = np.polyfit(np.arange(len(total)), total, 1)[0]
    assert slope < 0


def test_pretrain_zero_steps_is_untrained_baseline(synth32):
    torch.manual_seed(0)
    bb = DeskBackbone()
    corpus = np.concatenate([synth32[0], synth32[2]])
    baseline = reconstruction_mae(bb, corpus)
    _, mae = pretrain_autoencoder(bb, corpus, 0)
    assert mae == baseline


@pytest.mark.slow
def test_pretrain_reaches_target_and_reloads(tmp_path):
    cfg = TrainConfig.desk("edge")
    src, tgt, lab = synthetic_arrays(0, 200, 64, "edge")
    hs, ht, _ = synthetic_arrays(1, 16, 64, "edge")
    holdout = np.concatenate([hs, ht]).astype(np.float32) / 255
    bb, mae = pretrained_backbone(cfg, src / 255.0, lab, tgt / 255.0, holdout=holdout)
    assert mae < 0.1
    manifest, states = read_checkpoint(save_checkpoint(tmp_path / "ae.npz", {"bb": bb},
                                                       {"backbone": bb.manifest()}))
    again = DeskBackbone()
    again.load_state_dict(states["bb"])
    assert reconstruction_mae(again, holdout) == reconstruction_mae(bb, holdout)


def test_autoencoder_freeze_flag(tiny_model):
    set_autoencoder_trainable(tiny_model, False)
    assert not any(p.requires_grad for p in tiny_model.backbone.encoder_decoder_parameters())
    assert tiny_model.backbone.condition.requires_grad
    set_autoencoder_trainable(tiny_model, True)
    assert all(p.requires_grad for p in tiny_model.backbone.encoder_decoder_parameters())


def test_save_load_roundtrip(tiny_cfg, tiny_model, tmp_path, synth32):
    save_model(tmp_path / "m.npz", tiny_model, tiny_cfg)
    loaded, manifest = load_model(tmp_path / "m.npz")
    assert manifest["config"]["seed"] == tiny_cfg.seed
    assert parameter_hash(loaded) == parameter_hash(tiny_model)


def test_distill_copy_agrees_and_teacher_frozen(tiny_cfg, tiny_model, tmp_path, synth32):
    x_s, y_s, x_t = synth32
    path = save_model(tmp_path / "teacher.npz", tiny_model, tiny_cfg)
    _, manifest = load_model(path)
    teacher, _ = load_model(path)
    before = parameter_hash(teacher)
    copy_student = copy.deepcopy(teacher)
    xt = torch.from_numpy(x_t[:4].transpose(0, 3, 1, 2).copy())
    sched = tiny_cfg.schedule()
    a, _ = teacher_predict(teacher, xt, 0, sched, np.random.default_rng(0))
    b, _ = teacher_predict(copy_student, xt, 0, sched, np.random.default_rng(1))
    assert torch.equal(a, b)
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "iterations": 3})
    student, frozen, hist = distill(path, None, cfg, x_s, y_s, x_t, tmp_path / "s.npz")
    assert parameter_hash(frozen) == before
    assert len(hist) == 3 and all(r["k"] == 0 for r in hist)
    assert (tmp_path / "s.npz").exists()


def test_distill_rejects_class_mismatch(tiny_cfg, tiny_model, tmp_path, synth32):
    path = save_model(tmp_path / "teacher.npz", tiny_model, tiny_cfg)
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "num_classes": 11})
    with pytest.raises(ValueError, match="classes"):
        distill(path, None, cfg, *synth32)


def test_config_validation_and_roundtrip():
    cfg = TrainConfig.desk("edge")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(lambda_reg=-1)
    with pytest.raises(ValueError):
        TrainConfig(ema_alpha=1.5)


def test_rng_streams_are_keyed():
    assert np.array_equal(derived_rng(0, 5).random(3), derived_rng(0, 5).random(3))
    assert not np.array_equal(derived_rng(0, 5).random(3), derived_rng(0, 6).random(3))
