import csv
import os
import sys
import pytest

import numpy as np

TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIR = os.path.abspath(os.path.join(TEST_DIR, os.pardir))
sys.path.insert(0, PROJECT_DIR)

from motion_refine import scenarios
from motion_refine.body import FrameTag, default_skeleton
from motion_refine.dynamics import synth_oracle
from motion_refine.energy import EnergyWeights
from motion_refine.errors import InvalidArgumentError, SequenceTooShortError
from motion_refine.geom import Camera, RigidTransform
from motion_refine.metrics import evaluate_sequences
from motion_refine.motion import MotionSequence, joints_camera
from motion_refine.optim import (
    SCALE_CLAMP,
    OptimConfig,
    apply_scale,
    calibrate_scale,
    learning_rate,
    refine,
    weights_preset,
    write_trace_csv,
)

SHORT = dict(epochs=40, warmup_epochs=4, decay_epoch=30)


@pytest.fixture
def toy():
    return default_skeleton("toy6")


def _walk(toy, n_frames=10, speed=1.0):
    t = np.arange(n_frames) / 30.0
    root_trans = np.zeros((n_frames, 3))
    root_trans[:, 0] = speed * t
    return MotionSequence(
        dt=1.0 / 30.0,
        theta=np.zeros((n_frames, toy.n_joints, 3)),
        beta=np.zeros(toy.n_shape),
        root_orient=np.zeros((n_frames, 3)),
        root_trans=root_trans,
    )


def _camera(n_frames):
    return Camera.static(500.0, 500.0, 320.0, 240.0, n_frames, RigidTransform(np.eye(3), [0.0, 0.0, 5.0]))


def test_learning_rate_schedule():
    cfg = OptimConfig()
    assert learning_rate(0, cfg) == pytest.approx(1e-4)
    assert learning_rate(4, cfg) == pytest.approx(0.5e-3)
    assert learning_rate(9, cfg) == pytest.approx(1e-3)
    assert learning_rate(999, cfg) == pytest.approx(1e-3)
    assert learning_rate(1000, cfg) == pytest.approx(1e-4)
    assert learning_rate(1499, cfg) == pytest.approx(1e-4)
    with pytest.raises(InvalidArgumentError):
        learning_rate(1500, cfg)
    with pytest.raises(InvalidArgumentError):
        learning_rate(-1, cfg)


@pytest.mark.parametrize(
    "settings",
    [
        {"lr0": 0.0},
        {"warmup_epochs": 0},
        {"decay_epoch": 5, "warmup_epochs": 10},
        {"epochs": 1000},
        {"decay_factor": -0.1},
        {"adam_beta1": 1.0},
    ],
)
def test_config_validation(settings):
    with pytest.raises(InvalidArgumentError):
        OptimConfig(**settings)


def test_config_from_dict():
    cfg = OptimConfig.from_dict({"epochs": 200, "decay_epoch": 150, "preset": "no_velocity", "weights": {"lambda_K": 2.0}})
    assert cfg.epochs == 200
    assert cfg.weights.lambda_V == 0.0
    assert cfg.weights.lambda_K == 2.0
    assert cfg.weights.lambda_jerk == EnergyWeights().lambda_jerk
    with pytest.raises(InvalidArgumentError):
        OptimConfig.from_dict({"momentum": 0.5})
    with pytest.raises(InvalidArgumentError):
        OptimConfig.from_dict({"preset": "no_such_variant"})


def test_weights_presets():
    assert weights_preset("full") == EnergyWeights()
    only = weights_preset("keypoints_only")
    assert only.lambda_V == only.lambda_A == 0.0
    assert only.lambda_K == 1.0


def test_calibrate_recovers_translation_scale(toy):
    gt = _walk(toy)
    cam = _camera(10)
    preds = synth_oracle(gt, toy, cam)
    assert calibrate_scale(gt, toy, cam, preds) == pytest.approx(1.0, abs=1e-9)
    init = apply_scale(gt, 0.5, cam)
    s = calibrate_scale(init, toy, cam, preds)
    assert s == pytest.approx(2.0, rel=1e-9)
    np.testing.assert_allclose(apply_scale(init, s, cam).root_trans, gt.root_trans, atol=1e-12)


def test_calibrate_clamps(toy):
    gt = _walk(toy)
    cam = _camera(10)
    preds = synth_oracle(gt, toy, cam)
    assert calibrate_scale(apply_scale(gt, 0.01, cam), toy, cam, preds) == SCALE_CLAMP[1]
    assert calibrate_scale(apply_scale(gt, 100.0, cam), toy, cam, preds) == SCALE_CLAMP[0]


def test_calibrate_stationary_returns_one(toy):
    gt = _walk(toy)
    cam = _camera(10)
    preds = synth_oracle(gt, toy, cam)
    still = _walk(toy, speed=0.0)
    assert calibrate_scale(still, toy, cam, preds) == 1.0


def test_calibrate_ignores_rotation_noise(toy):
    gt = _walk(toy, n_frames=60)
    cam = _camera(60)
    preds = synth_oracle(gt, toy, cam)
    noisy = scenarios.perturb(gt, 0.3, 0.0, seed=1)
    assert calibrate_scale(noisy, toy, cam, preds) == pytest.approx(1.0, abs=1e-9)
    jittered = scenarios.perturb(gt, 0.05, 0.02, seed=1)
    assert calibrate_scale(jittered, toy, cam, preds) == pytest.approx(1.0, abs=0.1)


def test_calibrate_skips_short_root_travel():
    # the tracking camera keeps the root still in camera coordinates
    scenario = scenarios.make("sine_walk", skeleton="toy6", n_frames=60)
    assert calibrate_scale(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions) == 1.0
    squat = scenarios.make("squat", skeleton="toy6", n_frames=60)
    assert calibrate_scale(squat.init, squat.skeleton, squat.camera, squat.predictions) == 1.0


def test_apply_scale_only_touches_translation(toy):
    gt = _walk(toy)
    scaled = apply_scale(gt, 3.0)
    np.testing.assert_array_equal(scaled.root_trans, 3.0 * gt.root_trans)
    np.testing.assert_array_equal(scaled.theta, gt.theta)
    np.testing.assert_array_equal(scaled.root_orient, gt.root_orient)
    with pytest.raises(InvalidArgumentError):
        apply_scale(gt, 0.0)


def test_apply_scale_about_the_camera(toy):
    gt = _walk(toy)
    cam = _camera(10)
    scaled = apply_scale(gt, 3.0, cam)
    root = joints_camera(gt, toy, cam).positions[:, 0]
    np.testing.assert_allclose(joints_camera(scaled, toy, cam).positions[:, 0], 3.0 * root, atol=1e-12)
    np.testing.assert_array_equal(scaled.theta, gt.theta)
    with pytest.raises(InvalidArgumentError):
        apply_scale(gt, 2.0, _camera(4))


def test_refine_keeps_a_fixed_point():
    scenario = scenarios.make("constant-clean", skeleton="toy6", n_frames=8)
    result = refine(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions, OptimConfig())
    assert result.scale == 1.0
    np.testing.assert_allclose(result.refined.theta, scenario.gt.theta, atol=1e-9)
    np.testing.assert_allclose(result.refined.root_orient, scenario.gt.root_orient, atol=1e-9)
    np.testing.assert_allclose(result.refined.root_trans, scenario.gt.root_trans, atol=1e-9)
    assert result.final_energy.total == pytest.approx(0.0, abs=1e-12)


def test_regularizer_alone_returns_the_start():
    scenario = scenarios.make("sine_walk", skeleton="toy6", n_frames=8)
    weights = EnergyWeights(lambda_V=0.0, lambda_A=0.0, lambda_K=0.0, lambda_jerk=0.0)
    cfg = OptimConfig(weights=weights, calibrate=False, **SHORT)
    result = refine(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions, cfg)
    np.testing.assert_array_equal(result.refined.theta, scenario.init.theta)
    np.testing.assert_array_equal(result.refined.root_trans, scenario.init.root_trans)
    assert result.final_gradient_norm == 0.0


def test_refine_lowers_energy_and_records_trace():
    scenario = scenarios.make("sine_walk", skeleton="toy6", n_frames=12)
    cfg = OptimConfig(record_trace=True, **SHORT)
    result = refine(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions, cfg)
    assert result.final_energy.total < result.initial_energy.total
    assert [entry.epoch for entry in result.trace] == list(range(cfg.epochs))
    for entry in result.trace:
        assert entry.lr == pytest.approx(learning_rate(entry.epoch, cfg))
    assert result.trace[0].energy == result.initial_energy
    assert result.refined.frame_tag == FrameTag.WORLD
    np.testing.assert_array_equal(result.refined.beta, scenario.init.beta)
    assert result.final_gradient_norm >= 0.0


def test_refine_is_deterministic():
    scenario = scenarios.make("squat", skeleton="toy6", n_frames=10)
    args = (scenario.init, scenario.skeleton, scenario.camera, scenario.predictions, OptimConfig(**SHORT))
    a, b = refine(*args), refine(*args)
    np.testing.assert_array_equal(a.refined.theta, b.refined.theta)
    np.testing.assert_array_equal(a.refined.root_trans, b.refined.root_trans)


def test_refine_rejects_short_and_camera_frame_input(toy):
    gt = _walk(toy, n_frames=3)
    cam = _camera(3)
    preds = synth_oracle(gt, toy, cam)
    with pytest.raises(SequenceTooShortError) as info:
        refine(gt, toy, cam, preds, OptimConfig(**SHORT))
    assert "jerk term" in str(info.value)
    with pytest.raises(InvalidArgumentError):
        refine(gt.replace(frame_tag=FrameTag.CAMERA), toy, cam, preds, OptimConfig(**SHORT))


def test_trace_csv(tmp_path):
    scenario = scenarios.make("spin", skeleton="toy6", n_frames=8)
    cfg = OptimConfig(record_trace=True, **SHORT)
    result = refine(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions, cfg)
    path = tmp_path / "out" / "trace.csv"
    write_trace_csv(result.trace, str(path))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "E_V", "E_A", "E_K", "E_jerk", "E_reg", "total", "lr"]
    assert len(rows) == cfg.epochs + 1
    assert float(rows[1][6]) == result.initial_energy.total


def _moving_average(values, window=20):
    return np.convolve(values, np.ones(window) / window, mode="valid")


def _reports(result, scenario):
    args = (scenario.gt, scenario.skeleton, scenario.camera)
    return evaluate_sequences(scenario.init, *args), evaluate_sequences(result.refined, *args)


@pytest.mark.slow
def test_refine_denoises_a_jittered_walk():
    scenario = scenarios.make("sine_walk", n_frames=300)
    cfg = OptimConfig(record_trace=True)
    result = refine(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions, cfg)
    assert result.scale == 1.0
    before, after = _reports(result, scenario)
    assert after.jitter < 0.3 * before.jitter
    assert after.mpjae < 0.3 * before.mpjae
    assert after.mpjve < 0.5 * before.mpjve
    assert after.wa_mpjpe <= before.wa_mpjpe

    totals = np.array([entry.energy.total for entry in result.trace])
    averaged = _moving_average(totals[cfg.warmup_epochs:])
    assert np.all(np.diff(averaged) <= 1e-9 * averaged[:-1])


@pytest.mark.slow
def test_refine_restores_detail_of_an_oversmoothed_walk():
    scenario = scenarios.make("oversmoothed_walk", n_frames=300)
    result = refine(scenario.init, scenario.skeleton, scenario.camera, scenario.predictions)
    assert result.scale == 1.0
    before, after = _reports(result, scenario)
    assert after.mpjve < 0.5 * before.mpjve
    assert after.mpjae < 0.5 * before.mpjae
