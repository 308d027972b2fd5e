import math
from dataclasses import replace

import numpy as np
import pytest

from lrfdet.checkpoint import encode
from lrfdet.detector import DetectorConfig, build_detector
from lrfdet.layers import LayerParams, LayerSpec, init_tensors
from lrfdet.synth import SceneSpec, SyntheticCorpus
from lrfdet.train import (TrainConfig, TrainState, TrainingDiverged, assign_roi_targets, ground_truth,
                          init_weights, load_state, read_loss_log, sample_indices, save_state, sgd_step,
                          train, train_step, trainable, write_loss_log)

SMALL = DetectorConfig.desk(16)


def small_corpus(count=3):
    return SyntheticCorpus(SceneSpec(width=128, height=128, seed=3), count)


def quick_config(total=4, **kw):
    return TrainConfig.desk(images_per_iter=1, **kw).with_total_iters(total)


# --- sampling ---------------------------------------------------------------

def test_few_positives_are_filled_with_negatives():
    labels = np.full(1000, 0)
    labels[:10] = 1
    idx = sample_indices(labels, 256, 0.5, np.random.default_rng(0))
    assert len(idx) == 256
    assert (labels[idx] == 1).sum() == 10


def test_positive_quota_is_respected():
    labels = np.r_[np.ones(400, int), np.zeros(600, int)]
    idx = sample_indices(labels, 512, 0.25, np.random.default_rng(1))
    assert (labels[idx] > 0).sum() == 128 and len(idx) == 512


def test_ignored_anchors_are_never_sampled():
    labels = np.r_[np.ones(5, int), -np.ones(50, int), np.zeros(20, int)]
    idx = sample_indices(labels, 256, 0.5, np.random.default_rng(2))
    assert np.all(labels[idx] >= 0) and len(idx) == 25


def test_sampling_is_deterministic():
    labels = np.random.default_rng(0).integers(-1, 3, 500)
    a = sample_indices(labels, 64, 0.25, np.random.default_rng(9))
    b = sample_indices(labels, 64, 0.25, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_zero_ground_truth_gives_all_background_rois():
    rois = np.array([[0, 0, 10, 10], [5, 5, 30, 30.0]])
    labels, targets = assign_roi_targets(rois, np.zeros((0, 4)), np.zeros(0, int))
    assert labels.tolist() == [0, 0] and not targets.any()


def test_roi_labels_follow_best_overlap():
    gt = np.array([[0, 0, 20, 20], [40, 40, 80, 80.0]])
    rois = np.array([[0, 0, 20, 20], [42, 42, 80, 80], [0, 0, 60, 60], [0, 0, 10, 20.0]])
    labels, targets = assign_roi_targets(rois, gt, np.array([1, 2]), 0.5)
    # IoU 1, 0.9, <0.5, exactly 0.5
    assert labels.tolist() == [1, 2, 0, 1]
    np.testing.assert_allclose(targets[0], 0, atol=1e-12)
    assert not targets[2].any()


# --- optimizer ----------------------------------------------------------------

def test_zero_gradient_without_decay_leaves_parameters():
    tensors = {"a.weight": np.ones((2, 2), np.float32), "a.bias": np.ones(2, np.float32)}
    grads = {k: np.zeros_like(v) for k, v in tensors.items()}
    new, _ = sgd_step(tensors, grads, {}, TrainConfig(weight_decay=0.0), 0)
    for k in tensors:
        np.testing.assert_array_equal(new[k], tensors[k])


def test_momentum_recursion_matches_scalar_oracle():
    cfg = TrainConfig(base_lr=0.1, momentum=0.9, weight_decay=0.01)
    p = {"x.weight": np.array([1.0])}
    v: dict = {}
    ref_p, ref_v = 1.0, 0.0
    for it, g in enumerate([0.5, -0.2, 0.3, 0.0, 1.0]):
        p, v = sgd_step(p, {"x.weight": np.array([g])}, v, cfg, it)
        ref_v = 0.9 * ref_v + g + 0.01 * ref_p
        ref_p -= 0.1 * ref_v
        assert p["x.weight"][0] == pytest.approx(ref_p, rel=1e-12)


def test_weight_decay_skips_biases_and_normalization():
    params = build_detector(DetectorConfig.desk(16), seed=0, dtype=np.float64)
    tensors = {k: v + 1.0 for k, v in params.tensors.items()}
    grads = {k: np.zeros_like(v) for k, v in tensors.items()}
    new, _ = sgd_step(tensors, grads, {}, TrainConfig(weight_decay=0.5, base_lr=1.0), 0)
    for name in tensors:
        changed = not np.array_equal(new[name], tensors[name])
        assert changed == (name.endswith(".weight")), name


def test_running_statistics_are_not_optimized():
    assert not trainable("conv1.bn.running_mean") and trainable("conv1.bn.gamma")
    tensors = {"c.bn.running_mean": np.zeros(3), "c.weight": np.zeros(3)}
    grads = {"c.bn.running_mean": np.ones(3), "c.weight": np.ones(3)}
    new, vel = sgd_step(tensors, grads, {}, TrainConfig(), 0)
    assert not new["c.bn.running_mean"].any() and "c.bn.running_mean" not in vel


def test_nan_gradient_names_the_parameter():
    tensors = {"head.weight": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="head.weight"):
        sgd_step(tensors, {"head.weight": np.array([np.nan, 0.0])}, {}, TrainConfig(), 0)


def test_step_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 0.001 and cfg.lr_at(39999) == 0.001
    assert cfg.lr_at(40000) == pytest.approx(0.0001)
    desk = TrainConfig.desk()
    assert (desk.total_iters, desk.lr_decay_every) == (2000, 1000)
    assert desk.with_total_iters(300).lr_decay_every == 150


def test_invalid_config_rejected():
    with pytest.raises(ValueError, match="base_lr"):
        TrainConfig(base_lr=0)
    with pytest.raises(ValueError, match="images_per_iter"):
        TrainConfig(images_per_iter=0)


# --- initialization -------------------------------------------------------------

def test_fresh_init_is_reproducible():
    a = encode(build_detector(SMALL, seed=5).tensors)
    b = encode(build_detector(SMALL, seed=5).tensors)
    assert a == b


def test_gaussian_init_std():
    w = init_tensors([LayerSpec("big", "conv", 1024, 1024, 1)], np.random.default_rng(0))["big.weight"]
    assert w.size >= 10 ** 6
    assert abs(w.std() - 0.01) / 0.01 < 0.02


def test_heads_keep_small_init_under_fan_in_scaling():
    t = build_detector(SMALL, seed=0).tensors
    assert abs(t["ps.cls.weight"].std() - 0.01) < 0.002
    assert t["mff1.fuse.weight"].std() > 0.03


def test_pretrained_backbone_with_missing_names_is_rejected():
    params = build_detector(SMALL, seed=0)
    partial = {k: v for k, v in params.tensors.items() if not k.startswith("dsf9")}
    with pytest.raises(ValueError, match="dsf9"):
        init_weights(params, partial)


def test_pretrained_backbone_is_loaded():
    donor = build_detector(SMALL, seed=1)
    fresh = init_weights(build_detector(SMALL, seed=2), donor.tensors, seed=2)
    np.testing.assert_array_equal(fresh["conv1.weight"], donor["conv1.weight"])
    assert not np.array_equal(fresh["ps.cls.weight"], donor["ps.cls.weight"])


def test_load_then_save_is_bit_identical(tmp_path):
    state = TrainState(build_detector(SMALL, seed=0))
    save_state(tmp_path / "a.rfdn", state)
    save_state(tmp_path / "b.rfdn", load_state(tmp_path / "a.rfdn"))
    assert (tmp_path / "a.rfdn").read_bytes() == (tmp_path / "b.rfdn").read_bytes()


# --- one step -------------------------------------------------------------------------

def step_inputs(seed=0):
    img, ann = small_corpus(1)[0]
    params = build_detector(SMALL, seed=seed, dtype=np.float64)
    boxes, labels = ground_truth(SMALL, ann)
    rois = np.array([[4, 4, 60, 70], [30, 20, 120, 100], [64, 64, 128, 128.0]])
    return params, img[None].astype(np.float64), boxes, labels, rois


def test_full_step_gradient_matches_finite_differences():
    params, img, boxes, labels, rois = step_inputs()
    cfg = quick_config()

    def loss(tensors):
        rng = np.random.default_rng(0)
        return train_step(LayerParams(SMALL, tensors), img, boxes, labels, rng, cfg, rois).losses["total"]

    step = train_step(params, img, boxes, labels, np.random.default_rng(0), cfg, rois)
    r = np.random.default_rng(1)
    names = [n for n in params.tensors if trainable(n)]
    direction = {n: r.standard_normal(params.tensors[n].shape) for n in names}
    analytic = sum(float((step.grads[n] * direction[n]).sum()) for n in names if n in step.grads)
    # ReLU and max-pool kinks are crossed at larger steps
    eps = 1e-7
    plus = {**params.tensors, **{n: params.tensors[n] + eps * direction[n] for n in names}}
    minus = {**params.tensors, **{n: params.tensors[n] - eps * direction[n] for n in names}}
    numeric = (loss(plus) - loss(minus)) / (2 * eps)
    assert numeric == pytest.approx(analytic, rel=1e-6)


def test_gradients_reach_every_trainable_layer():
    params, img, boxes, labels, rois = step_inputs()
    step = train_step(params, img, boxes, labels, np.random.default_rng(0), quick_config(), rois)
    missing = [n for n in params.tensors if trainable(n) and n not in step.grads]
    assert not missing


def test_small_steps_do_not_increase_loss_on_a_fixed_batch():
    params, img, boxes, labels, rois = step_inputs()
    cfg = TrainConfig(base_lr=1e-5, momentum=0.0, weight_decay=0.0, rpn_batch=32, roi_batch=64)
    tensors, velocity, losses = params.tensors, {}, []
    for it in range(10):
        step = train_step(LayerParams(SMALL, tensors), img, boxes, labels, np.random.default_rng(0), cfg, rois)
        losses.append(step.losses["total"])
        tensors, velocity = sgd_step(tensors, step.grads, velocity, cfg, it)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


# --- loop ----------------------------------------------------------------------------

def test_same_seed_gives_identical_logs():
    data, cfg = small_corpus(), quick_config()
    a = train(data, cfg, SMALL).log
    b = train(data, cfg, SMALL).log
    assert a == b


def test_resume_reproduces_the_uninterrupted_run(tmp_path):
    data, cfg = small_corpus(), quick_config()
    full = train(data, cfg, SMALL)
    half = train(data, cfg, SMALL, stop_at=2)
    save_state(tmp_path / "half.rfdn", half, cfg)
    resumed = train(data, cfg, state=load_state(tmp_path / "half.rfdn"))
    assert half.log + resumed.log == full.log
    assert encode(resumed.params.tensors) == encode(full.params.tensors)


def test_several_images_per_iteration():
    data = small_corpus(4)
    cfg = replace(quick_config(), images_per_iter=2)
    state = train(data, cfg, SMALL, stop_at=2)
    assert len(state.log) == 2 and math.isfinite(state.log[-1]["total"])


def test_divergence_aborts_with_diagnostics():
    cfg = replace(quick_config(), base_lr=1e6)
    with pytest.raises(TrainingDiverged, match="iteration"):
        train(small_corpus(), cfg, SMALL)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train([], quick_config(), SMALL)


def test_loss_log_round_trip_and_schedule(tmp_path):
    cfg = replace(quick_config(), lr_decay_every=2)
    state = train(small_corpus(), cfg, SMALL, log_path=tmp_path / "loss.csv")
    rows = read_loss_log(tmp_path / "loss.csv")
    assert rows == state.log
    assert [r["lr"] for r in rows] == [cfg.base_lr * 0.1 ** (r["iter"] // 2) for r in rows]
