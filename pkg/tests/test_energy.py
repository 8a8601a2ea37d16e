import os
import sys
import pytest
from dataclasses import replace

import numpy as np
import torch

TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIR = os.path.abspath(os.path.join(TEST_DIR, os.pardir))
sys.path.insert(0, PROJECT_DIR)

from motion_refine.body import FrameTag, default_skeleton
from motion_refine.dynamics import NoiseConfig, synth_oracle
from motion_refine.energy import (
    TERMS,
    EnergyModel,
    EnergyWeights,
    RefinementState,
    evaluate,
    gradient,
)
from motion_refine.errors import BehindCameraError, InvalidArgumentError, SequenceTooShortError
from motion_refine.geom import Camera, RigidTransform
from motion_refine.motion import MotionSequence


@pytest.fixture
def toy():
    return default_skeleton("toy6")


def _camera(n_frames, depth=5.0):
    return Camera.static(500.0, 500.0, 320.0, 240.0, n_frames, RigidTransform(np.eye(3), [0.0, 0.0, depth]))


def _ground_truth(rng, skel, n_frames):
    return MotionSequence(
        dt=1.0 / 30.0,
        theta=rng.normal(scale=0.2, size=(n_frames, skel.n_joints, 3)),
        beta=rng.normal(scale=0.3, size=skel.n_shape),
        root_orient=rng.normal(scale=0.1, size=(n_frames, 3)),
        root_trans=np.cumsum(rng.normal(scale=0.02, size=(n_frames, 3)), axis=0),
    )


def _jitter(rng, seq, scale):
    return seq.replace(
        theta=seq.theta + rng.normal(scale=scale, size=seq.theta.shape),
        root_orient=seq.root_orient + rng.normal(scale=scale, size=seq.root_orient.shape),
        root_trans=seq.root_trans + rng.normal(scale=scale / 2, size=seq.root_trans.shape),
    )


def _instance(rng, skel, n_frames, seed=0):
    gt = _ground_truth(rng, skel, n_frames)
    cam = _camera(n_frames)
    noise = NoiseConfig(sigma_kp=1.0, sigma_vel=0.05, sigma_acc=0.5, dropout_prob=0.1, seed=seed)
    preds = synth_oracle(gt, skel, cam, noise)
    return RefinementState(_jitter(rng, gt, 0.05), _jitter(rng, gt, 0.05), skel, cam, preds)


def _split(params, n_joints):
    T = len(params)
    theta = params[:, : 3 * n_joints].reshape(T, n_joints, 3)
    return (
        torch.as_tensor(theta),
        torch.as_tensor(params[:, 3 * n_joints : 3 * n_joints + 3]),
        torch.as_tensor(params[:, 3 * n_joints + 3 :]),
    )


def test_gradient_matches_central_differences(toy):
    rng = np.random.default_rng(1234)
    weights = EnergyWeights()
    h = 1e-6
    for instance in range(50):
        T = int(rng.integers(6, 11))
        state = _instance(rng, toy, T, seed=instance)
        model = EnergyModel(state, weights)
        analytic = gradient(state, weights)
        params = state.current.parameters()
        assert analytic.shape == params.shape == (T, 3 * toy.n_joints + 6)

        def energy(p):
            with torch.no_grad():
                return float(model.total(model.terms(*_split(p, toy.n_joints))))

        numeric = np.empty_like(params)
        for t, c in np.ndindex(*params.shape):
            plus, minus = params.copy(), params.copy()
            plus[t, c] += h
            minus[t, c] -= h
            numeric[t, c] = (energy(plus) - energy(minus)) / (2 * h)

        checked = np.abs(analytic) > 1e-8
        rel = np.abs(numeric - analytic)[checked] / np.abs(analytic)[checked]
        assert rel.max() < 1e-4, f"instance {instance}: relative error {rel.max():.3g}"


def test_zero_fit_has_no_data_energy(toy):
    rng = np.random.default_rng(0)
    gt = _ground_truth(rng, toy, 8)
    cam = _camera(8)
    state = RefinementState(gt, gt, toy, cam, synth_oracle(gt, toy, cam))
    energy = evaluate(state, EnergyWeights())
    for name in ("E_V", "E_A", "E_K", "E_reg"):
        assert abs(getattr(energy, name)) <= 1e-12
    assert energy.E_jerk > 0


def test_regularizer_gradient_in_closed_form(toy):
    rng = np.random.default_rng(3)
    state = _instance(rng, toy, 6)
    weights = EnergyWeights(lambda_V=0.0, lambda_A=0.0, lambda_K=0.0, lambda_jerk=0.0, lambda_reg=2.0)
    expected = 2.0 * 2.0 * (state.current.parameters() - state.anchor.parameters()) / 6
    np.testing.assert_allclose(gradient(state, weights), expected, atol=1e-12)


def test_total_is_weighted_sum(toy):
    rng = np.random.default_rng(4)
    state = _instance(rng, toy, 7)
    weights = EnergyWeights(lambda_V=0.5, lambda_A=0.2, lambda_K=3.0, lambda_jerk=10.0, lambda_reg=7.0)
    energy = evaluate(state, weights)
    manual = sum(w * getattr(energy, name) for name, w in zip(TERMS, weights.for_terms()))
    assert energy.total == pytest.approx(manual, rel=1e-12)


def _permuted(state, order, columns):
    """ Relabel skeleton joints by ``order`` (old ids, new layout) and shuffle prediction columns """
    skel, preds = state.skeleton, state.predictions
    new_id = {old: new for new, old in enumerate(order)}
    joint_map = tuple(new_id[preds.joint_map[k]] for k in columns)
    skeleton = replace(
        skel,
        parents=tuple(-1 if skel.parents[j] < 0 else new_id[skel.parents[j]] for j in order),
        rest_offsets=skel.rest_offsets[order],
        shape_basis=skel.shape_basis[order],
        names=tuple(skel.names[j] for j in order),
        end_effectors=tuple(new_id[j] for j in skel.end_effectors),
        feet=tuple(new_id[j] for j in skel.feet),
        joint_map=joint_map,
    )
    predictions = replace(
        preds,
        keypoints2d=preds.keypoints2d[:, columns],
        vel3d=preds.vel3d[:, columns],
        acc3d=preds.acc3d[:, columns],
        confidence=preds.confidence[:, columns],
        joint_map=joint_map,
    )
    current, anchor = (seq.replace(theta=seq.theta[:, order]) for seq in (state.current, state.anchor))
    return RefinementState(current, anchor, skeleton, state.camera, predictions)


def test_energy_ignores_joint_order(toy):
    rng = np.random.default_rng(6)
    state = _instance(rng, toy, 9)
    # parents still precede children: pelvis, knee, foot, chest, head, hand
    permuted = _permuted(state, [0, 3, 4, 1, 5, 2], list(rng.permutation(toy.n_joints)))
    weights = EnergyWeights()
    before, after = evaluate(state, weights), evaluate(permuted, weights)
    for name in (*TERMS, "total"):
        assert getattr(after, name) == pytest.approx(getattr(before, name), rel=1e-10, abs=1e-12)


def test_zero_weight_terms_do_not_contribute(toy):
    rng = np.random.default_rng(5)
    state = _instance(rng, toy, 6)
    weights = EnergyWeights(lambda_V=0.0, lambda_A=0.0)
    energy = evaluate(state, weights)
    assert energy.E_V > 0
    assert energy.total == pytest.approx(
        weights.lambda_K * energy.E_K + weights.lambda_jerk * energy.E_jerk + weights.lambda_reg * energy.E_reg,
        rel=1e-12,
    )


def test_no_weights_no_gradient(toy):
    rng = np.random.default_rng(6)
    state = _instance(rng, toy, 6)
    zero = EnergyWeights(0.0, 0.0, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(gradient(state, zero), 0.0)
    assert evaluate(state, zero).total == 0.0


def test_zero_confidence_silences_data_terms(toy):
    rng = np.random.default_rng(7)
    state = _instance(rng, toy, 6)
    preds = state.predictions
    silent = type(preds)(preds.keypoints2d, preds.vel3d, preds.acc3d, np.zeros_like(preds.confidence), preds.joint_map)
    energy = evaluate(RefinementState(state.current, state.anchor, toy, state.camera, silent), EnergyWeights())
    assert energy.E_V == energy.E_A == energy.E_K == 0.0


def test_jerk_ignores_constant_motion(toy):
    rng = np.random.default_rng(8)
    gt = _ground_truth(rng, toy, 6)
    still = gt.replace(
        theta=np.repeat(gt.theta[:1], 6, axis=0),
        root_orient=np.repeat(gt.root_orient[:1], 6, axis=0),
        root_trans=np.repeat(gt.root_trans[:1], 6, axis=0),
    )
    cam = _camera(6)
    state = RefinementState(still, still, toy, cam, synth_oracle(gt, toy, cam))
    assert evaluate(state, EnergyWeights()).E_jerk == 0.0


def test_weights_validation():
    with pytest.raises(InvalidArgumentError):
        EnergyWeights(lambda_V=-1.0)
    with pytest.raises(InvalidArgumentError):
        EnergyWeights(lambda_A=float("nan"))
    with pytest.raises(InvalidArgumentError):
        EnergyWeights.from_dict({"lambda_X": 1.0})
    assert EnergyWeights.from_dict({"lambda_V": 2}).lambda_V == 2.0


def test_state_validation(toy):
    rng = np.random.default_rng(9)
    gt = _ground_truth(rng, toy, 6)
    cam = _camera(6)
    preds = synth_oracle(gt, toy, cam)

    short = _ground_truth(rng, toy, 3)
    with pytest.raises(SequenceTooShortError) as info:
        RefinementState(short, short, toy, _camera(3), synth_oracle(short, toy, _camera(3)))
    assert "jerk term" in str(info.value)

    with pytest.raises(InvalidArgumentError):
        RefinementState(gt.replace(frame_tag=FrameTag.CAMERA), gt, toy, cam, preds)
    with pytest.raises(InvalidArgumentError):
        RefinementState(gt, gt.replace(beta=gt.beta + 1.0), toy, cam, preds)
    with pytest.raises(InvalidArgumentError):
        RefinementState(gt, gt, toy, _camera(7), preds)


def test_behind_camera_is_reported(toy):
    rng = np.random.default_rng(10)
    gt = _ground_truth(rng, toy, 6)
    cam = _camera(6)
    preds = synth_oracle(gt, toy, cam)
    moved = gt.replace(root_trans=gt.root_trans - [0.0, 0.0, 20.0])
    with pytest.raises(BehindCameraError):
        evaluate(RefinementState(moved, moved, toy, cam, preds), EnergyWeights())
