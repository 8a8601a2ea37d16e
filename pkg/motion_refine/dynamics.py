"""
Finite-difference dynamics and the dynamics predictions that drive refinement.

Indexing: with frames numbered 1..T, velocity ``V^t`` exists for t = 2..T and
acceleration ``A^t`` for t = 2..T-1. Stored arrays are 0-based, so
``vel[i]`` is ``V^{i+2}`` (between frames i and i+1, 0-based) and ``acc[i]`` is
``A^{i+2}`` (centred on 0-based frame i+1).

The stencils only use slicing and arithmetic, so they accept numpy arrays,
torch tensors or ``JointPositions`` alike.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

from motion_refine.body import FrameTag, JointPositions, Skeleton
from motion_refine.errors import (
    InvalidArgumentError,
    PredictionsParseError,
    SequenceTooShortError,
)
from motion_refine.geom import Camera, check_depth, perspective, transform_points
from motion_refine.motion import MotionSequence, joints_world
from motion_refine.utils import as_array, read_json, require, write_json

logger = logging.getLogger(__name__)

Positions = Union[JointPositions, np.ndarray, torch.Tensor]

# stream ids of the counter-based generator
_STREAM_KEYPOINTS = 0
_STREAM_VELOCITY = 1
_STREAM_ACCELERATION = 2
_STREAM_DROPOUT = 3


def _unwrap(joints: Positions):
    if isinstance(joints, JointPositions):
        return joints.positions
    return joints


def _require_frames(joints, required: int, what: str):
    if len(joints) < required:
        raise SequenceTooShortError(what, required, len(joints))


def velocity_field(joints: Positions, dt: float):
    """ V^t = (J^t - J^{t-1}) / dt, shape (T-1, J, 3) """
    p = _unwrap(joints)
    _require_frames(p, 2, "velocity")
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    return (p[1:] - p[:-1]) / dt


def acceleration_field(joints: Positions, dt: float):
    """ A^t = (J^{t+1} - 2 J^t + J^{t-1}) / dt², shape (T-2, J, 3) """
    p = _unwrap(joints)
    _require_frames(p, 3, "acceleration")
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    return (p[2:] - 2.0 * p[1:-1] + p[:-2]) / (dt * dt)


def jerk_residuals(joints: Positions):
    """ Undivided third difference J^{t+3} - 3J^{t+2} + 3J^{t+1} - J^t, (T-3, J, 3) """
    p = _unwrap(joints)
    _require_frames(p, 4, "jerk term")
    return (p[3:] - p[:-3]) - 3.0 * (p[2:-1] - p[1:-2])


@dataclass(frozen=True)
class DynamicsPredictions:
    """Per-frame targets for refinement.

    :param keypoints2d: (T, K, 2) pixels
    :param vel3d: (T-1, K, 3) camera-frame velocities, m/s
    :param acc3d: (T-2, K, 3) camera-frame accelerations, m/s²
    :param confidence: (T, K) weights in [0, 1]
    :param joint_map: (K,) skeleton joint per prediction joint
    """

    keypoints2d: np.ndarray
    vel3d: np.ndarray
    acc3d: np.ndarray
    confidence: np.ndarray
    joint_map: Tuple[int, ...]

    def __post_init__(self):
        keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64)
        vel3d = np.asarray(self.vel3d, dtype=np.float64)
        acc3d = np.asarray(self.acc3d, dtype=np.float64)
        confidence = np.asarray(self.confidence, dtype=np.float64)
        joint_map = tuple(int(j) for j in self.joint_map)

        if keypoints2d.ndim != 3 or keypoints2d.shape[-1] != 2:
            raise InvalidArgumentError(f"keypoints2d must be (T, K, 2), got {keypoints2d.shape}")
        T, K = keypoints2d.shape[:2]
        if len(joint_map) != K:
            raise InvalidArgumentError(f"joint_map has {len(joint_map)} entries for {K} joints")
        expected = {
            "vel3d": (vel3d, (max(T - 1, 0), K, 3)),
            "acc3d": (acc3d, (max(T - 2, 0), K, 3)),
            "confidence": (confidence, (T, K)),
        }
        for name, (value, shape) in expected.items():
            if value.shape != shape:
                raise InvalidArgumentError(f"{name} must be {shape}, got {value.shape}")
        for name, value in (("keypoints2d", keypoints2d), ("vel3d", vel3d), ("acc3d", acc3d)):
            if not np.all(np.isfinite(value)):
                raise InvalidArgumentError(f"{name} contains non-finite values")
        if not np.all((confidence >= 0) & (confidence <= 1)):
            raise InvalidArgumentError("confidence must lie in [0, 1]")

        object.__setattr__(self, "keypoints2d", keypoints2d)
        object.__setattr__(self, "vel3d", vel3d)
        object.__setattr__(self, "acc3d", acc3d)
        object.__setattr__(self, "confidence", confidence)
        object.__setattr__(self, "joint_map", joint_map)

    @property
    def n_frames(self) -> int:
        return self.keypoints2d.shape[0]

    @property
    def n_joints(self) -> int:
        return self.keypoints2d.shape[1]

    def velocity_confidence(self) -> np.ndarray:
        """ (T-1, K): min over the two frames each velocity spans """
        c = self.confidence
        return np.minimum(c[1:], c[:-1])

    def acceleration_confidence(self) -> np.ndarray:
        """ (T-2, K): min over the three frames each acceleration spans """
        c = self.confidence
        return np.minimum(np.minimum(c[2:], c[1:-1]), c[:-2])

    def check_length(self, n_frames: int):
        if self.n_frames != n_frames:
            raise InvalidArgumentError(
                f"predictions cover {self.n_frames} frames but the sequence has {n_frames}"
            )

    def to_dict(self) -> dict:
        return {
            "joint_map": list(self.joint_map),
            "keypoints2d": self.keypoints2d.tolist(),
            "vel3d": self.vel3d.tolist(),
            "acc3d": self.acc3d.tolist(),
            "confidence": self.confidence.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict, path=None) -> "DynamicsPredictions":
        err = PredictionsParseError
        joint_map = require(doc, "joint_map", path, err)
        if not isinstance(joint_map, list) or not all(
            isinstance(j, int) and j >= 0 for j in joint_map
        ):
            raise err("joint_map", "expected a list of joint indices", path)
        K = len(joint_map)
        keypoints2d = as_array(require(doc, "keypoints2d", path, err), "keypoints2d", (None, K, 2), path, err)
        T = len(keypoints2d)
        vel3d = as_array(require(doc, "vel3d", path, err), "vel3d", (T - 1, K, 3), path, err)
        acc3d = as_array(require(doc, "acc3d", path, err), "acc3d", (T - 2, K, 3), path, err)
        confidence = as_array(require(doc, "confidence", path, err), "confidence", (T, K), path, err)
        if not np.all((confidence >= 0) & (confidence <= 1)):
            raise err("confidence", "values must lie in [0, 1]", path)
        return cls(keypoints2d, vel3d, acc3d, confidence, tuple(joint_map))


def load_predictions(path) -> DynamicsPredictions:
    preds = DynamicsPredictions.from_dict(read_json(path), path)
    logger.info(
        "loaded predictions for %d frames x %d joints from %s", preds.n_frames, preds.n_joints, path
    )
    return preds


def save_predictions(preds: DynamicsPredictions, path):
    write_json(path, preds.to_dict())


@dataclass(frozen=True)
class NoiseConfig:
    sigma_kp: float = 0.0
    sigma_vel: float = 0.0
    sigma_acc: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_kp", "sigma_vel", "sigma_acc"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.dropout_prob <= 1:
            raise InvalidArgumentError(f"dropout_prob must lie in [0, 1], got {self.dropout_prob}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseConfig":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "sigma_kp": self.sigma_kp,
            "sigma_vel": self.sigma_vel,
            "sigma_acc": self.sigma_acc,
            "dropout_prob": self.dropout_prob,
            "seed": self.seed,
        }


def counter_rng(seed: int, stream: int) -> np.random.Generator:
    """Philox generator keyed by (seed, stream).

    Draws fill arrays in C order, so the sample at (frame, joint, component)
    always sits at the same counter position.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(stream) << 64)))


def camera_dynamics(
    joints_cam: torch.Tensor, intrinsics: Sequence[float], dt: float
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """ Keypoints, velocities and accelerations of camera-frame joints (T, K, 3) """
    return (
        perspective(joints_cam, intrinsics),
        velocity_field(joints_cam, dt),
        acceleration_field(joints_cam, dt),
    )


def synth_oracle(
    gt_seq: MotionSequence, skel: Skeleton, cam: Camera, noise: Optional[NoiseConfig] = None
) -> DynamicsPredictions:
    """ Ground-truth dynamics of a world-frame sequence, optionally corrupted """
    noise = noise or NoiseConfig()
    if gt_seq.frame_tag != FrameTag.WORLD:
        raise InvalidArgumentError("synth_oracle expects a world-frame sequence")
    _require_frames(gt_seq.theta, 3, "dynamics predictions")
    cam.check_length(gt_seq.n_frames)

    joint_map = skel.prediction_joints
    world = torch.as_tensor(joints_world(gt_seq, skel).positions[:, list(joint_map)])
    joints_cam = transform_points(
        torch.as_tensor(cam.rotations()), torch.as_tensor(cam.translations()), world
    )
    check_depth(joints_cam, joint_map)
    keypoints, vel, acc = (x.numpy() for x in camera_dynamics(joints_cam, cam.intrinsics, gt_seq.dt))

    confidence = np.ones(keypoints.shape[:2])
    for stream, array, sigma in (
        (_STREAM_KEYPOINTS, keypoints, noise.sigma_kp),
        (_STREAM_VELOCITY, vel, noise.sigma_vel),
        (_STREAM_ACCELERATION, acc, noise.sigma_acc),
    ):
        if sigma > 0:
            array += sigma * counter_rng(noise.seed, stream).standard_normal(array.shape)
    if noise.dropout_prob > 0:
        dropped = counter_rng(noise.seed, _STREAM_DROPOUT).random(confidence.shape) < noise.dropout_prob
        confidence[dropped] = 0.0

    logger.debug(
        "synthesised predictions: %d frames, %d joints, noise %s",
        len(keypoints),
        len(joint_map),
        noise.to_dict(),
    )
    return DynamicsPredictions(keypoints, vel, acc, confidence, joint_map)
