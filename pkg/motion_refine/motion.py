"""
Motion sequences and the camera/world lifting of root orientation and
translation.

Lifting uses camera-to-world poses ``{R_c, t_c}``; the camera stores
world-to-camera extrinsics, so every frame is inverted first.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from motion_refine.body import (
    FrameTag,
    JointPositions,
    Skeleton,
    apply_shape,
    batch_forward_kinematics,
)
from motion_refine.errors import FileFormatError, InvalidArgumentError
from motion_refine.geom import (
    Camera,
    axis_angle_to_matrix,
    matrix_to_axis_angle,
    transform_points,
)
from motion_refine.utils import as_array, read_json, require, write_json

logger = logging.getLogger(__name__)

DEFAULT_DT = 1.0 / 30.0


@dataclass(frozen=True)
class MotionSequence:
    """Per-frame pose parameters with a time-invariant shape.

    :param dt: seconds per frame
    :param theta: (T, J, 3) local joint rotations, axis-angle
    :param beta: (B,) shape coefficients
    :param root_orient: (T, 3) root orientation, axis-angle
    :param root_trans: (T, 3) root translation, meters
    :param frame_tag: coordinate frame of root orientation and translation
    """

    dt: float
    theta: np.ndarray
    beta: np.ndarray
    root_orient: np.ndarray
    root_trans: np.ndarray
    frame_tag: FrameTag = FrameTag.WORLD

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        theta = np.asarray(self.theta, dtype=np.float64)
        root_orient = np.asarray(self.root_orient, dtype=np.float64)
        root_trans = np.asarray(self.root_trans, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)

        if theta.ndim != 3 or theta.shape[-1] != 3 or len(theta) < 1:
            raise InvalidArgumentError(f"theta must be (T, J, 3), got {theta.shape}")
        T = len(theta)
        for name, value in (("root_orient", root_orient), ("root_trans", root_trans)):
            if value.shape != (T, 3):
                raise InvalidArgumentError(f"{name} must be ({T}, 3), got {value.shape}")
        for name, value in (
            ("theta", theta),
            ("beta", beta),
            ("root_orient", root_orient),
            ("root_trans", root_trans),
        ):
            if not np.all(np.isfinite(value)):
                raise InvalidArgumentError(f"{name} contains non-finite values")

        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "root_orient", root_orient)
        object.__setattr__(self, "root_trans", root_trans)
        object.__setattr__(self, "frame_tag", FrameTag(self.frame_tag))

    @property
    def n_frames(self) -> int:
        return self.theta.shape[0]

    @property
    def n_joints(self) -> int:
        return self.theta.shape[1]

    def replace(self, **fields) -> "MotionSequence":
        return replace(self, **fields)

    def parameters(self) -> np.ndarray:
        """ Flattened per-frame parameters, (T, 3J + 6) as [theta, root_orient, root_trans] """
        return np.concatenate(
            [self.theta.reshape(self.n_frames, -1), self.root_orient, self.root_trans],
            axis=1,
        )

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "frame_tag": self.frame_tag.value,
            "beta": self.beta.tolist(),
            "frames": [
                {
                    "theta": self.theta[t].tolist(),
                    "root_orient": self.root_orient[t].tolist(),
                    "root_trans": self.root_trans[t].tolist(),
                }
                for t in range(self.n_frames)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, path=None) -> "MotionSequence":
        frames = require(doc, "frames", path)
        if not isinstance(frames, list) or not frames:
            raise FileFormatError("frames", "expected a non-empty list", path)
        try:
            frame_tag = FrameTag(doc.get("frame_tag", FrameTag.WORLD.value))
        except ValueError:
            raise FileFormatError("frame_tag", f"unknown frame tag {doc.get('frame_tag')!r}", path)

        theta = as_array([require(f, "theta", path) for f in frames], "theta", (None, None, 3), path)
        root_orient = as_array(
            [require(f, "root_orient", path) for f in frames], "root_orient", (None, 3), path
        )
        root_trans = as_array(
            [require(f, "root_trans", path) for f in frames], "root_trans", (None, 3), path
        )
        dt = float(as_array(doc.get("dt", DEFAULT_DT), "dt", (), path))
        if dt <= 0:
            raise FileFormatError("dt", "must be positive", path)
        return cls(
            dt=dt,
            theta=theta,
            beta=as_array(doc.get("beta", []), "beta", (None,), path),
            root_orient=root_orient,
            root_trans=root_trans,
            frame_tag=frame_tag,
        )


def load_motion(path) -> MotionSequence:
    seq = MotionSequence.from_dict(read_json(path), path)
    logger.info(
        "loaded %d-frame %s motion from %s", seq.n_frames, seq.frame_tag.value, path
    )
    return seq


def save_motion(seq: MotionSequence, path):
    write_json(path, seq.to_dict())


def _camera_to_world_poses(cam: Camera):
    R_wc = cam.rotations()
    R_c = np.swapaxes(R_wc, 1, 2)
    t_c = -np.einsum("tij,tj->ti", R_c, cam.translations())
    return R_c, t_c


def camera_to_world(seq_cam: MotionSequence, cam: Camera, skel: Skeleton) -> MotionSequence:
    """Lifts root orientation and translation from the camera frame to the world.

    ``Γ_w = R_c Γ_c`` and ``τ_w = t_c + R_c (τ_c + t_root) - t_root`` with the
    per-frame camera-to-world pose ``{R_c, t_c}``.
    """
    if seq_cam.frame_tag != FrameTag.CAMERA:
        raise InvalidArgumentError("camera_to_world expects a camera-frame sequence")
    cam.check_length(seq_cam.n_frames)

    R_c, t_c = _camera_to_world_poses(cam)
    orient = R_c @ axis_angle_to_matrix(seq_cam.root_orient)
    trans = (
        t_c
        + np.einsum("tij,tj->ti", R_c, seq_cam.root_trans + skel.t_root)
        - skel.t_root
    )
    return seq_cam.replace(
        root_orient=matrix_to_axis_angle(orient),
        root_trans=trans,
        frame_tag=FrameTag.WORLD,
    )


def world_to_camera(seq_world: MotionSequence, cam: Camera, skel: Skeleton) -> MotionSequence:
    """ Exact inverse of camera_to_world """
    if seq_world.frame_tag != FrameTag.WORLD:
        raise InvalidArgumentError("world_to_camera expects a world-frame sequence")
    cam.check_length(seq_world.n_frames)

    R_c, t_c = _camera_to_world_poses(cam)
    R_w = np.swapaxes(R_c, 1, 2)
    orient = R_w @ axis_angle_to_matrix(seq_world.root_orient)
    trans = (
        np.einsum("tij,tj->ti", R_w, seq_world.root_trans - t_c + skel.t_root)
        - skel.t_root
    )
    return seq_world.replace(
        root_orient=matrix_to_axis_angle(orient),
        root_trans=trans,
        frame_tag=FrameTag.CAMERA,
    )


def joints_world(seq: MotionSequence, skel: Skeleton) -> JointPositions:
    if seq.frame_tag != FrameTag.WORLD:
        raise InvalidArgumentError("joints_world expects a world-frame sequence")
    if seq.n_joints != skel.n_joints:
        raise InvalidArgumentError(
            f"sequence has {seq.n_joints} joints, skeleton has {skel.n_joints}"
        )
    shaped = apply_shape(skel, seq.beta)
    positions = batch_forward_kinematics(
        shaped,
        torch.as_tensor(seq.theta),
        torch.as_tensor(seq.root_orient),
        torch.as_tensor(seq.root_trans),
    )
    return JointPositions(positions.numpy(), FrameTag.WORLD)


def to_camera_frame(joints: JointPositions, cam: Camera) -> JointPositions:
    """ Moves world joint positions into each frame's camera coordinates """
    if joints.frame != FrameTag.WORLD:
        raise InvalidArgumentError("expected world-frame joints")
    cam.check_length(joints.n_frames)
    positions = transform_points(
        torch.as_tensor(cam.rotations()),
        torch.as_tensor(cam.translations()),
        torch.as_tensor(joints.positions),
    )
    return JointPositions(positions.numpy(), FrameTag.CAMERA)


def joints_camera(seq: MotionSequence, skel: Skeleton, cam: Camera) -> JointPositions:
    return to_camera_frame(joints_world(seq, skel), cam)
