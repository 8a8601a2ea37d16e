"""
Refinement energy over per-frame {theta, Γ, τ}.

    E = λ_V E_V + λ_A E_A + λ_K E_K + λ_jerk E_jerk + λ_reg E_reg

Joint-indexed terms are averaged over their frames and divided by the joint
count; E_reg is a per-frame mean of squared parameter deviations. Residuals
of E_V, E_A and E_K are weighted by prediction confidence. Gradients come
from torch autograd in float64.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Dict, Sequence, Tuple

import numpy as np
import torch

from motion_refine.body import FrameTag, Skeleton, apply_shape, batch_forward_kinematics
from motion_refine.dynamics import (
    DynamicsPredictions,
    camera_dynamics,
    jerk_residuals,
)
from motion_refine.errors import InvalidArgumentError, SequenceTooShortError
from motion_refine.geom import Camera, check_depth, transform_points
from motion_refine.motion import MotionSequence

logger = logging.getLogger(__name__)

TERMS = ("E_V", "E_A", "E_K", "E_jerk", "E_reg")


@dataclass(frozen=True)
class EnergyWeights:
    lambda_V: float = 1.0
    lambda_A: float = 0.1
    lambda_K: float = 1.0
    lambda_jerk: float = 1e4
    lambda_reg: float = 1e4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (np.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"{name} must be a nonnegative number, got {value}")

    def for_terms(self) -> Tuple[float, ...]:
        """ Weights in ``TERMS`` order """
        return (self.lambda_V, self.lambda_A, self.lambda_K, self.lambda_jerk, self.lambda_reg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergyWeights":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown energy weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class EnergyBreakdown:
    E_V: float
    E_A: float
    E_K: float
    E_jerk: float
    E_reg: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RefinementState:
    """ Current and anchor motion with everything the energy needs """

    current: MotionSequence
    anchor: MotionSequence
    skeleton: Skeleton
    camera: Camera
    predictions: DynamicsPredictions

    def __post_init__(self):
        current, anchor = self.current, self.anchor
        for seq in (current, anchor):
            if seq.frame_tag != FrameTag.WORLD:
                raise InvalidArgumentError("refinement runs on world-frame sequences")
        if current.theta.shape != anchor.theta.shape:
            raise InvalidArgumentError(
                f"current {current.theta.shape} and anchor {anchor.theta.shape} differ in shape"
            )
        if current.dt != anchor.dt or not np.array_equal(current.beta, anchor.beta):
            raise InvalidArgumentError("current and anchor must share dt and beta")
        if current.n_joints != self.skeleton.n_joints:
            raise InvalidArgumentError(
                f"sequence has {current.n_joints} joints, skeleton has {self.skeleton.n_joints}"
            )
        if current.n_frames < 4:
            raise SequenceTooShortError("jerk term", 4, current.n_frames)
        self.camera.check_length(current.n_frames)
        self.predictions.check_length(current.n_frames)
        if any(j >= self.skeleton.n_joints for j in self.predictions.joint_map):
            raise InvalidArgumentError("prediction joint_map refers to joints outside the skeleton")

    def with_current(self, seq: MotionSequence) -> "RefinementState":
        return replace(self, current=seq)


def _tensor(array) -> torch.Tensor:
    return torch.as_tensor(np.asarray(array, dtype=np.float64))


class EnergyModel:
    """Energy of a fixed problem as a function of (theta, root_orient, root_trans).

    Targets, confidences, camera and anchor are converted to tensors once so
    the optimizer can re-evaluate cheaply.
    """

    def __init__(self, state: RefinementState, weights: EnergyWeights):
        self.weights = weights
        self.skeleton = apply_shape(state.skeleton, state.current.beta)
        self.dt = state.current.dt
        self.n_frames = state.current.n_frames
        self.joint_map = list(state.predictions.joint_map)
        self.intrinsics = state.camera.intrinsics

        preds = state.predictions
        self.cam_rotations = _tensor(state.camera.rotations())
        self.cam_translations = _tensor(state.camera.translations())
        self.keypoints = _tensor(preds.keypoints2d)
        self.vel = _tensor(preds.vel3d)
        self.acc = _tensor(preds.acc3d)
        self.conf_kp = _tensor(preds.confidence)
        self.conf_vel = _tensor(preds.velocity_confidence())
        self.conf_acc = _tensor(preds.acceleration_confidence())

        self.anchor = tuple(
            _tensor(x) for x in (state.anchor.theta, state.anchor.root_orient, state.anchor.root_trans)
        )

    def terms(
        self, theta: torch.Tensor, root_orient: torch.Tensor, root_trans: torch.Tensor
    ) -> Dict[str, torch.Tensor]:
        T = self.n_frames
        K = len(self.joint_map)
        J = self.skeleton.n_joints

        world = batch_forward_kinematics(self.skeleton, theta, root_orient, root_trans)
        joints_cam = transform_points(
            self.cam_rotations, self.cam_translations, world[:, self.joint_map]
        )
        check_depth(joints_cam, self.joint_map)
        keypoints, vel, acc = camera_dynamics(joints_cam, self.intrinsics, self.dt)

        e_vel = (self.conf_vel * ((vel - self.vel) ** 2).sum(dim=-1)).sum() / ((T - 1) * K)
        e_acc = (self.conf_acc * ((acc - self.acc) ** 2).sum(dim=-1)).sum() / ((T - 2) * K)
        e_kp = (self.conf_kp * ((keypoints - self.keypoints) ** 2).sum(dim=-1)).sum() / (T * K)
        e_jerk = (jerk_residuals(world) ** 2).sum() / ((T - 3) * J)

        theta0, orient0, trans0 = self.anchor
        e_reg = (
            ((theta - theta0) ** 2).sum()
            + ((root_orient - orient0) ** 2).sum()
            + ((root_trans - trans0) ** 2).sum()
        ) / T

        return dict(zip(TERMS, (e_vel, e_acc, e_kp, e_jerk, e_reg)))

    def total(self, terms: Dict[str, torch.Tensor]) -> torch.Tensor:
        total = torch.zeros((), dtype=torch.float64)
        # zero-weight terms never enter the graph
        for name, weight in zip(TERMS, self.weights.for_terms()):
            if weight > 0:
                total = total + weight * terms[name]
        return total

    def breakdown(self, terms: Dict[str, torch.Tensor]) -> EnergyBreakdown:
        values = {name: float(terms[name].detach()) for name in TERMS}
        return EnergyBreakdown(**values, total=float(self.total(terms).detach()))


def _parameters(seq: MotionSequence, requires_grad: bool = False):
    return tuple(
        torch.tensor(x, dtype=torch.float64, requires_grad=requires_grad)
        for x in (seq.theta, seq.root_orient, seq.root_trans)
    )


def evaluate(state: RefinementState, w: EnergyWeights) -> EnergyBreakdown:
    model = EnergyModel(state, w)
    with torch.no_grad():
        return model.breakdown(model.terms(*_parameters(state.current)))


def gradient(state: RefinementState, w: EnergyWeights) -> np.ndarray:
    """ Gradient of the total energy laid out as (T, 3J + 6): [theta, Γ, τ] per frame """
    model = EnergyModel(state, w)
    params = _parameters(state.current, requires_grad=True)
    total = model.total(model.terms(*params))
    if total.requires_grad:
        total.backward()
    return flatten_gradient(params)


def flatten_gradient(params: Sequence[torch.Tensor]) -> np.ndarray:
    theta, root_orient, root_trans = params
    T = theta.shape[0]
    grads = [
        np.zeros(tuple(p.shape)) if p.grad is None else p.grad.detach().numpy()
        for p in (theta, root_orient, root_trans)
    ]
    return np.concatenate([grads[0].reshape(T, -1), grads[1], grads[2]], axis=1)
