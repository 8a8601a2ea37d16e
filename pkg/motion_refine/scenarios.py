"""
Synthetic motion scenarios with a known ground truth.

Each generator returns a ``Scenario``: the ground-truth world motion, a
corrupted initial motion, the camera, the skeleton and oracle dynamics
predictions of the ground truth. Generators are registered under ids and
built with ``make``.
"""

import importlib
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Union

import numpy as np
from scipy.ndimage import gaussian_filter1d

from motion_refine.body import FrameTag, Skeleton, resolve_skeleton, save_skeleton
from motion_refine.contact import ik_chains
from motion_refine.dynamics import (
    DynamicsPredictions,
    NoiseConfig,
    counter_rng,
    save_predictions,
    synth_oracle,
)
from motion_refine.errors import InvalidArgumentError
from motion_refine.geom import Camera, RigidTransform, save_camera
from motion_refine.motion import DEFAULT_DT, MotionSequence, save_motion
from motion_refine.utils import write_json

logger = logging.getLogger(__name__)

# stream ids after the prediction streams of dynamics.synth_oracle
_STREAM_INIT_ROTATION = 4
_STREAM_INIT_TRANSLATION = 5

CAMERA_DISTANCE = 4.0
FOCAL_LENGTH = 1000.0
PRINCIPAL_POINT = (500.0, 500.0)

GT_FILE = "gt_motion.json"
INIT_FILE = "init_motion.json"
CAMERA_FILE = "camera.json"
PREDICTIONS_FILE = "predictions.json"
SKELETON_FILE = "skeleton.json"
CONFIG_FILE = "config.json"


@dataclass(frozen=True)
class Scenario:
    name: str
    gt: MotionSequence
    init: MotionSequence
    camera: Camera
    skeleton: Skeleton
    predictions: DynamicsPredictions
    seed: int = 0

    def save(self, output_dir: str) -> Dict[str, str]:
        """Writes every input of a refinement run plus a ready-to-use config.

        Paths inside the config are relative to ``output_dir``.
        """
        os.makedirs(output_dir, exist_ok=True)
        paths = {
            "ground_truth": GT_FILE,
            "init_motion": INIT_FILE,
            "camera": CAMERA_FILE,
            "predictions": PREDICTIONS_FILE,
            "skeleton": SKELETON_FILE,
        }
        save_motion(self.gt, os.path.join(output_dir, GT_FILE))
        save_motion(self.init, os.path.join(output_dir, INIT_FILE))
        save_camera(self.camera, os.path.join(output_dir, CAMERA_FILE))
        save_predictions(self.predictions, os.path.join(output_dir, PREDICTIONS_FILE))
        save_skeleton(self.skeleton, os.path.join(output_dir, SKELETON_FILE))
        write_json(
            os.path.join(output_dir, CONFIG_FILE),
            {**paths, "output_dir": "refined", "seed": self.seed},
        )
        written = {key: os.path.join(output_dir, name) for key, name in paths.items()}
        written["config"] = os.path.join(output_dir, CONFIG_FILE)
        logger.info("scenario %s written to %s", self.name, output_dir)
        return written


def _static_camera(n_frames: int) -> Camera:
    return Camera.static(
        FOCAL_LENGTH,
        FOCAL_LENGTH,
        *PRINCIPAL_POINT,
        n_frames,
        RigidTransform(np.eye(3), np.array([0.0, 0.0, CAMERA_DISTANCE])),
    )


def _tracking_camera(root_trans: np.ndarray) -> Camera:
    """ Camera translating with the subject along x, looking down +z """
    extrinsics = tuple(
        RigidTransform(np.eye(3), np.array([-x, 0.0, CAMERA_DISTANCE])) for x in root_trans[:, 0]
    )
    return Camera(FOCAL_LENGTH, FOCAL_LENGTH, *PRINCIPAL_POINT, extrinsics)


def _limbs(skel: Skeleton):
    """ Rotating joints of each leg and of each other end effector """
    effectors = list(dict.fromkeys(list(skel.feet) + list(skel.end_effectors)))
    chains = ik_chains(skel, effectors)
    legs = [chains[f] for f in skel.feet]
    arms = [chains[e] for e in effectors if e not in skel.feet]
    return legs, arms


def _gait(skel: Skeleton, phase: np.ndarray, hip: float, knee: float, arm: float) -> np.ndarray:
    """ Local rotations of a walk cycle: alternating legs, counter-swinging arms """
    theta = np.zeros((len(phase), skel.n_joints, 3))
    legs, arms = _limbs(skel)
    for k, chain in enumerate(legs):
        offset = np.pi * k
        if chain:
            theta[:, chain[0], 0] = hip * np.sin(phase + offset)
        if len(chain) > 1:
            theta[:, chain[1], 0] = knee * 0.5 * (1.0 - np.cos(phase + offset))
    for k, chain in enumerate(arms):
        if chain:
            joint = chain[1] if len(chain) > 1 else chain[0]
            theta[:, joint, 0] = arm * np.sin(phase + np.pi * (k + 1))
    return theta


def _motion(skel, dt, theta, root_orient, root_trans) -> MotionSequence:
    return MotionSequence(
        dt=dt,
        theta=theta,
        beta=np.zeros(skel.n_shape),
        root_orient=root_orient,
        root_trans=root_trans,
        frame_tag=FrameTag.WORLD,
    )


def perturb(
    seq: MotionSequence, rotation_noise: float, translation_noise: float, seed: int
) -> MotionSequence:
    """ Adds independent Gaussian noise to every rotation and translation parameter """
    if rotation_noise < 0 or translation_noise < 0:
        raise InvalidArgumentError("noise levels must be nonnegative")
    T, J = seq.n_frames, seq.n_joints
    rotations = counter_rng(seed, _STREAM_INIT_ROTATION).standard_normal((T, J + 1, 3))
    translations = counter_rng(seed, _STREAM_INIT_TRANSLATION).standard_normal((T, 3))
    return seq.replace(
        theta=seq.theta + rotation_noise * rotations[:, :J],
        root_orient=seq.root_orient + rotation_noise * rotations[:, J],
        root_trans=seq.root_trans + translation_noise * translations,
    )


def oversmooth(seq: MotionSequence, sigma: float) -> MotionSequence:
    """ Gaussian low-pass of every parameter along time (edge frames repeated) """
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")

    def smooth(x):
        return gaussian_filter1d(x, sigma, axis=0, mode="nearest")

    return seq.replace(
        theta=smooth(seq.theta),
        root_orient=smooth(seq.root_orient),
        root_trans=smooth(seq.root_trans),
    )


def _assemble(
    name: str,
    gt: MotionSequence,
    skel: Skeleton,
    camera: Camera,
    rotation_noise: float,
    translation_noise: float,
    prediction_noise: Optional[Union[NoiseConfig, dict]],
    seed: int,
    init: Optional[MotionSequence] = None,
) -> Scenario:
    if isinstance(prediction_noise, dict):
        prediction_noise = NoiseConfig.from_dict({"seed": seed, **prediction_noise})
    predictions = synth_oracle(gt, skel, camera, prediction_noise or NoiseConfig(seed=seed))
    if init is None:
        init = perturb(gt, rotation_noise, translation_noise, seed)
    logger.debug("built scenario %s: %d frames, %d joints", name, gt.n_frames, gt.n_joints)
    return Scenario(name, gt, init, camera, skel, predictions, seed)


def sine_walk(
    n_frames: int = 300,
    dt: float = DEFAULT_DT,
    skeleton="smpl24",
    speed: float = 1.0,
    frequency: float = 1.0,
    rotation_noise: float = 0.05,
    translation_noise: float = 0.02,
    prediction_noise: Optional[Union[NoiseConfig, dict]] = None,
    seed: int = 0,
) -> Scenario:
    """ Walk along world +x in front of a tracking camera """
    skel = resolve_skeleton(skeleton)
    t = np.arange(n_frames) * dt
    phase = 2.0 * np.pi * frequency * t
    theta = _gait(skel, phase, hip=0.3, knee=0.3, arm=0.2)
    root_orient = np.zeros((n_frames, 3))
    root_orient[:, 1] = np.pi / 2 + 0.03 * np.sin(phase)
    root_trans = np.stack(
        [speed * t, 0.9 + 0.02 * np.cos(2.0 * phase), np.zeros(n_frames)], axis=1
    )
    gt = _motion(skel, dt, theta, root_orient, root_trans)
    return _assemble(
        "sine_walk",
        gt,
        skel,
        _tracking_camera(root_trans),
        rotation_noise,
        translation_noise,
        prediction_noise,
        seed,
    )


def squat(
    n_frames: int = 120,
    dt: float = DEFAULT_DT,
    skeleton="smpl24",
    frequency: float = 0.5,
    rotation_noise: float = 0.05,
    translation_noise: float = 0.02,
    prediction_noise: Optional[Union[NoiseConfig, dict]] = None,
    seed: int = 0,
) -> Scenario:
    """ Repeated squats on the spot; the root dips while hips and knees bend """
    skel = resolve_skeleton(skeleton)
    t = np.arange(n_frames) * dt
    depth = 0.5 * (1.0 - np.cos(2.0 * np.pi * frequency * t))
    theta = np.zeros((n_frames, skel.n_joints, 3))
    legs, _ = _limbs(skel)
    for chain in legs:
        if chain:
            theta[:, chain[0], 0] = -1.0 * depth
        if len(chain) > 1:
            theta[:, chain[1], 0] = 1.6 * depth
    root_orient = np.zeros((n_frames, 3))
    root_orient[:, 0] = 0.3 * depth
    root_trans = np.stack(
        [np.zeros(n_frames), 0.9 - 0.25 * depth, np.zeros(n_frames)], axis=1
    )
    gt = _motion(skel, dt, theta, root_orient, root_trans)
    return _assemble(
        "squat",
        gt,
        skel,
        _static_camera(n_frames),
        rotation_noise,
        translation_noise,
        prediction_noise,
        seed,
    )


def spin(
    n_frames: int = 90,
    dt: float = DEFAULT_DT,
    skeleton="smpl24",
    angular_speed: float = 0.3 * np.pi,
    rotation_noise: float = 0.05,
    translation_noise: float = 0.02,
    prediction_noise: Optional[Union[NoiseConfig, dict]] = None,
    seed: int = 0,
) -> Scenario:
    """ Turning about the vertical axis with arms raised sideways """
    skel = resolve_skeleton(skeleton)
    t = np.arange(n_frames) * dt
    theta = np.zeros((n_frames, skel.n_joints, 3))
    _, arms = _limbs(skel)
    for k, chain in enumerate(arms):
        if chain:
            joint = chain[1] if len(chain) > 1 else chain[0]
            theta[:, joint, 2] = (-1.0) ** k * 0.8
    root_orient = np.zeros((n_frames, 3))
    root_orient[:, 1] = angular_speed * t
    root_trans = np.tile([0.0, 0.9, 0.0], (n_frames, 1))
    gt = _motion(skel, dt, theta, root_orient, root_trans)
    return _assemble(
        "spin",
        gt,
        skel,
        _static_camera(n_frames),
        rotation_noise,
        translation_noise,
        prediction_noise,
        seed,
    )


def constant(
    n_frames: int = 60,
    dt: float = DEFAULT_DT,
    skeleton="smpl24",
    rotation_noise: float = 0.05,
    translation_noise: float = 0.02,
    prediction_noise: Optional[Union[NoiseConfig, dict]] = None,
    seed: int = 0,
) -> Scenario:
    """ A held pose: every ground-truth velocity is zero """
    skel = resolve_skeleton(skeleton)
    theta = np.repeat(_gait(skel, np.array([np.pi / 4]), 0.3, 0.3, 0.2), n_frames, axis=0)
    root_orient = np.tile([0.0, 0.2, 0.0], (n_frames, 1))
    root_trans = np.tile([0.1, 0.9, 0.0], (n_frames, 1))
    gt = _motion(skel, dt, theta, root_orient, root_trans)
    return _assemble(
        "constant",
        gt,
        skel,
        _static_camera(n_frames),
        rotation_noise,
        translation_noise,
        prediction_noise,
        seed,
    )


def oversmoothed_walk(
    n_frames: int = 300,
    dt: float = DEFAULT_DT,
    skeleton="smpl24",
    sigma: float = 2.0,
    detail: float = 0.03,
    detail_frequency: float = 3.0,
    prediction_noise: Optional[Union[NoiseConfig, dict]] = None,
    seed: int = 0,
) -> Scenario:
    """Walk with a fast joint component; the initial motion is its low-pass version.

    ``sigma`` is the Gaussian filter width in frames.
    """
    walk = sine_walk(n_frames, dt, skeleton, rotation_noise=0.0, translation_noise=0.0, seed=seed)
    skel = walk.skeleton
    t = np.arange(n_frames) * dt
    fast = detail * np.sin(2.0 * np.pi * detail_frequency * t)
    theta = walk.gt.theta.copy()
    moving = np.any(theta != 0.0, axis=(0, 2))
    theta[:, moving, 0] += fast[:, None]
    gt = walk.gt.replace(theta=theta)
    return _assemble(
        "oversmoothed_walk",
        gt,
        skel,
        walk.camera,
        0.0,
        0.0,
        prediction_noise,
        seed,
        init=oversmooth(gt, sigma),
    )


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    entry_point: Union[str, Callable[..., Scenario]]
    kwargs: dict = field(default_factory=dict)

    def load(self) -> Callable[..., Scenario]:
        if callable(self.entry_point):
            return self.entry_point
        module, name = self.entry_point.split(":")
        return getattr(importlib.import_module(module), name)


registry: Dict[str, ScenarioSpec] = {}


def register(id: str, entry_point, kwargs: Optional[dict] = None):
    if id in registry:
        raise InvalidArgumentError(f"scenario '{id}' is already registered")
    registry[id] = ScenarioSpec(id, entry_point, dict(kwargs or {}))


def registered() -> List[str]:
    return sorted(registry)


def make(id: str, **kwargs) -> Scenario:
    """ Builds a registered scenario; keyword arguments override its defaults """
    if id not in registry:
        raise InvalidArgumentError(f"unknown scenario '{id}', expected one of {registered()}")
    entry = registry[id]
    scenario = entry.load()(**{**entry.kwargs, **kwargs})
    return replace(scenario, name=id)
