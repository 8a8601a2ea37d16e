import os
import sys
import pytest

import numpy as np
import torch
from scipy.spatial.transform import Rotation

TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIR = os.path.abspath(os.path.join(TEST_DIR, os.pardir))
sys.path.insert(0, PROJECT_DIR)

from motion_refine.body import FrameTag, apply_shape, batch_forward_kinematics, default_skeleton
from motion_refine.errors import FileFormatError, InvalidArgumentError
from motion_refine.geom import Camera, RigidTransform
from motion_refine.motion import (
    MotionSequence,
    camera_to_world,
    joints_camera,
    joints_world,
    load_motion,
    save_motion,
    world_to_camera,
)


@pytest.fixture
def toy():
    return default_skeleton("toy6")


def _random_camera(rng, n_frames):
    extrinsics = [
        RigidTransform(
            Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix(),
            rng.normal(size=3),
        )
        for _ in range(n_frames)
    ]
    return Camera(800.0, 800.0, 320.0, 240.0, extrinsics)


def _random_sequence(rng, skel, n_frames, frame_tag):
    axis = rng.normal(size=(n_frames, 3))
    angle = rng.uniform(0.0, 2.5, size=(n_frames, 1))
    return MotionSequence(
        dt=1.0 / 30.0,
        theta=rng.normal(scale=0.3, size=(n_frames, skel.n_joints, 3)),
        beta=rng.normal(scale=0.5, size=skel.n_shape),
        root_orient=axis / np.linalg.norm(axis, axis=1, keepdims=True) * angle,
        root_trans=rng.normal(size=(n_frames, 3)),
        frame_tag=frame_tag,
    )


def test_world_camera_round_trip(toy):
    rng = np.random.default_rng(11)
    for _ in range(100):
        seq = _random_sequence(rng, toy, 3, FrameTag.CAMERA)
        cam = _random_camera(rng, 3)
        back = world_to_camera(camera_to_world(seq, cam, toy), cam, toy)
        assert back.frame_tag == FrameTag.CAMERA
        np.testing.assert_allclose(back.root_orient, seq.root_orient, atol=1e-10)
        np.testing.assert_allclose(back.root_trans, seq.root_trans, atol=1e-10)
        np.testing.assert_array_equal(back.theta, seq.theta)


def test_lifting_by_hand(toy):
    # camera-to-world pose: 90 degrees about z, then translate by (1, 2, 3)
    R_c = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t_c = np.array([1.0, 2.0, 3.0])
    cam = Camera(1.0, 1.0, 0.0, 0.0, [RigidTransform(R_c, t_c).inverse()])
    seq = MotionSequence(
        dt=0.1,
        theta=np.zeros((1, 6, 3)),
        beta=[],
        root_orient=np.zeros((1, 3)),
        root_trans=np.array([[0.5, 0.0, 2.0]]),
        frame_tag=FrameTag.CAMERA,
    )
    world = camera_to_world(seq, cam, toy)
    # t_c + R_c (tau_c + t_root) - t_root with t_root = (0, 0.1, 0)
    np.testing.assert_allclose(world.root_trans[0], [0.9, 2.4, 5.0], atol=1e-12)
    np.testing.assert_allclose(world.root_orient[0], [0.0, 0.0, np.pi / 2], atol=1e-12)
    assert world.frame_tag == FrameTag.WORLD


def test_lifting_preserves_the_body_pose(toy):
    rng = np.random.default_rng(5)
    seq_cam = _random_sequence(rng, toy, 4, FrameTag.CAMERA)
    cam = _random_camera(rng, 4)
    seq_world = camera_to_world(seq_cam, cam, toy)
    posed = batch_forward_kinematics(
        apply_shape(toy, seq_cam.beta),
        torch.as_tensor(seq_cam.theta),
        torch.as_tensor(seq_cam.root_orient),
        torch.as_tensor(seq_cam.root_trans),
    ).numpy()
    lifted = joints_camera(seq_world, toy, cam).positions
    np.testing.assert_allclose(lifted - lifted[:, :1], posed - posed[:, :1], atol=1e-10)
    np.testing.assert_array_equal(joints_world(seq_world, toy).positions[:, 0], seq_world.root_trans)


def test_lifting_requires_frame_tags(toy):
    rng = np.random.default_rng(0)
    cam = _random_camera(rng, 2)
    world = _random_sequence(rng, toy, 2, FrameTag.WORLD)
    with pytest.raises(InvalidArgumentError):
        camera_to_world(world, cam, toy)
    with pytest.raises(InvalidArgumentError):
        world_to_camera(world.replace(frame_tag=FrameTag.CAMERA), cam, toy)
    with pytest.raises(InvalidArgumentError):
        joints_world(world.replace(frame_tag=FrameTag.CAMERA), toy)


def test_lifting_checks_camera_length(toy):
    rng = np.random.default_rng(0)
    seq = _random_sequence(rng, toy, 3, FrameTag.CAMERA)
    with pytest.raises(InvalidArgumentError):
        camera_to_world(seq, _random_camera(rng, 2), toy)


def test_sequence_validation():
    base = dict(
        dt=0.1,
        theta=np.zeros((3, 2, 3)),
        beta=np.zeros(0),
        root_orient=np.zeros((3, 3)),
        root_trans=np.zeros((3, 3)),
    )
    MotionSequence(**base)
    for key, value in [
        ("dt", 0.0),
        ("theta", np.zeros((3, 2, 4))),
        ("root_orient", np.zeros((2, 3))),
        ("root_trans", np.full((3, 3), np.nan)),
    ]:
        with pytest.raises(InvalidArgumentError):
            MotionSequence(**{**base, key: value})


def test_parameters_layout(toy):
    rng = np.random.default_rng(2)
    seq = _random_sequence(rng, toy, 5, FrameTag.WORLD)
    params = seq.parameters()
    assert params.shape == (5, 3 * 6 + 6)
    np.testing.assert_array_equal(params[:, :18], seq.theta.reshape(5, 18))
    np.testing.assert_array_equal(params[:, 18:21], seq.root_orient)
    np.testing.assert_array_equal(params[:, 21:], seq.root_trans)


def test_joints_world_shape_mismatch(toy):
    seq = MotionSequence(0.1, np.zeros((2, 5, 3)), [], np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(InvalidArgumentError):
        joints_world(seq, toy)


def test_motion_file(tmp_path, toy):
    rng = np.random.default_rng(9)
    seq = _random_sequence(rng, toy, 4, FrameTag.CAMERA)
    path = str(tmp_path / "motion.json")
    save_motion(seq, path)
    loaded = load_motion(path)
    assert loaded.frame_tag == FrameTag.CAMERA
    assert loaded.dt == seq.dt
    np.testing.assert_array_equal(loaded.theta, seq.theta)
    np.testing.assert_array_equal(loaded.root_trans, seq.root_trans)
    np.testing.assert_array_equal(loaded.beta, seq.beta)


def test_motion_file_errors(tmp_path):
    path = tmp_path / "motion.json"
    path.write_text('{"dt": 0.1, "frames": []}')
    with pytest.raises(FileFormatError) as info:
        load_motion(str(path))
    assert info.value.field == "frames"

    path.write_text('{"frame_tag": "moon", "frames": [{"theta": [[0, 0, 0]], "root_orient": [0, 0, 0], "root_trans": [0, 0, 0]}]}')
    with pytest.raises(FileFormatError):
        load_motion(str(path))

    path.write_text("{not json")
    with pytest.raises(FileFormatError):
        load_motion(str(path))
