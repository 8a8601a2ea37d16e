"""
Scale calibration and Adam minimisation of the refinement energy.

All frames are optimised jointly; the schedule warms up linearly, holds,
then drops once by ``decay_factor``.
"""

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from motion_refine.body import FrameTag, Skeleton
from motion_refine.dynamics import DynamicsPredictions, velocity_field
from motion_refine.energy import (
    TERMS,
    EnergyBreakdown,
    EnergyModel,
    EnergyWeights,
    RefinementState,
    flatten_gradient,
)
from motion_refine.errors import DivergedError, InvalidArgumentError, SequenceTooShortError
from motion_refine.geom import Camera
from motion_refine.motion import MotionSequence, joints_camera

logger = logging.getLogger(__name__)

SCALE_CLAMP = (0.2, 5.0)
_MIN_INDUCED_SPEED = 1e-8
MIN_CALIBRATION_TRAVEL = 0.1

_PRESETS = {
    "full": {},
    "no_velocity": {"lambda_V": 0.0},
    "no_acceleration": {"lambda_A": 0.0},
    "keypoints_only": {"lambda_V": 0.0, "lambda_A": 0.0},
}


def weights_preset(name: str) -> EnergyWeights:
    """ Default weights with the terms of an ablation variant switched off """
    if name not in _PRESETS:
        raise InvalidArgumentError(f"unknown weights preset '{name}', expected one of {sorted(_PRESETS)}")
    return EnergyWeights(**_PRESETS[name])


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 1e-3
    epochs: int = 1500
    warmup_epochs: int = 10
    decay_epoch: int = 1000
    decay_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    record_trace: bool = False
    calibrate: bool = True
    progress: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise InvalidArgumentError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.warmup_epochs < self.decay_epoch < self.epochs:
            raise InvalidArgumentError(
                "expected 0 < warmup_epochs < decay_epoch < epochs, got "
                f"{self.warmup_epochs}, {self.decay_epoch}, {self.epochs}"
            )
        if not self.decay_factor > 0:
            raise InvalidArgumentError(f"decay_factor must be positive, got {self.decay_factor}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise InvalidArgumentError("invalid Adam constants")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["weights"] = self.weights.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimConfig":
        doc = dict(doc)
        preset = doc.pop("preset", None)
        weights = weights_preset(preset) if preset else EnergyWeights()
        if "weights" in doc:
            weights = EnergyWeights.from_dict({**weights.to_dict(), **doc.pop("weights")})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(weights=weights, **doc)


@dataclass(frozen=True)
class TraceEntry:
    epoch: int
    energy: EnergyBreakdown
    lr: float


@dataclass(frozen=True)
class RefinementResult:
    refined: MotionSequence
    trace: Optional[List[TraceEntry]]
    final_gradient_norm: float
    wall_time: float
    scale: float = 1.0
    initial_energy: Optional[EnergyBreakdown] = None
    final_energy: Optional[EnergyBreakdown] = None


def learning_rate(epoch: int, cfg: OptimConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    if epoch < cfg.decay_epoch:
        return cfg.lr0
    return cfg.lr0 * cfg.decay_factor


def _root_columns(preds: DynamicsPredictions) -> List[int]:
    """ Prediction columns that follow the root translation """
    root = [k for k, j in enumerate(preds.joint_map) if j == 0]
    return root or list(range(len(preds.joint_map)))


def calibrate_scale(
    init_world: MotionSequence, skel: Skeleton, cam: Camera, preds: DynamicsPredictions
) -> float:
    """Ratio of predicted to induced travel of the root in camera coordinates.

    Both travels are the mean velocity vector of the root over the sequence,
    so per-frame noise averages out instead of inflating the induced speed.
    The ratio is clamped to ``SCALE_CLAMP``. Returns 1 when either travel is
    too short to fix a scale (stationary or returning root paths).
    """
    if init_world.n_frames < 2:
        raise SequenceTooShortError("scale calibration", 2, init_world.n_frames)
    preds.check_length(init_world.n_frames)

    columns = _root_columns(preds)
    joints = joints_camera(init_world, skel, cam).positions[:, [preds.joint_map[k] for k in columns]]
    induced = velocity_field(joints, init_world.dt).mean(axis=(0, 1))
    predicted = preds.vel3d[:, columns].mean(axis=(0, 1))
    duration = init_world.dt * (init_world.n_frames - 1)
    if np.linalg.norm(induced) < _MIN_INDUCED_SPEED:
        logger.info("initial root path is stationary; scale calibration skipped")
        return 1.0
    if np.linalg.norm(predicted) * duration < MIN_CALIBRATION_TRAVEL:
        logger.info("predicted root travel below %.3g m; scale calibration skipped", MIN_CALIBRATION_TRAVEL)
        return 1.0

    scale = float(np.linalg.norm(predicted) / np.linalg.norm(induced))
    clamped = float(np.clip(scale, *SCALE_CLAMP))
    if clamped != scale:
        logger.warning("scale factor %.4g clamped to %.4g", scale, clamped)
    return clamped


def apply_scale(seq: MotionSequence, s: float, cam: Optional[Camera] = None) -> MotionSequence:
    """Scales the root translation path; rotations, shape and timing are untouched.

    With a camera the root is scaled about each frame's camera centre, so the
    camera-frame root translation becomes ``s`` times longer. Without one it is
    scaled about the world origin.
    """
    if not s > 0:
        raise InvalidArgumentError(f"scale must be positive, got {s}")
    if cam is None:
        return seq.replace(root_trans=seq.root_trans * s)
    cam.check_length(seq.n_frames)
    centres = -np.einsum("tji,tj->ti", cam.rotations(), cam.translations())
    return seq.replace(root_trans=centres + s * (seq.root_trans - centres))


def refine(
    init_world: MotionSequence,
    skel: Skeleton,
    cam: Camera,
    preds: DynamicsPredictions,
    cfg: Optional[OptimConfig] = None,
) -> RefinementResult:
    """Minimises the refinement energy starting from (and anchored at) ``init_world``.

    The shape ``beta`` is held fixed; theta, root orientation and root
    translation of every frame are optimised together.
    """
    cfg = cfg or OptimConfig()
    started = time.perf_counter()
    if init_world.frame_tag != FrameTag.WORLD:
        raise InvalidArgumentError("refine expects a world-frame sequence")
    if init_world.n_frames < 4:
        raise SequenceTooShortError("jerk term", 4, init_world.n_frames)

    scale = calibrate_scale(init_world, skel, cam, preds) if cfg.calibrate else 1.0
    start = apply_scale(init_world, scale, cam) if scale != 1.0 else init_world
    logger.info("refining %d frames, scale %.6g", start.n_frames, scale)

    state = RefinementState(start, start, skel, cam, preds)
    model = EnergyModel(state, cfg.weights)
    params = [
        torch.tensor(x, dtype=torch.float64, requires_grad=True)
        for x in (start.theta, start.root_orient, start.root_trans)
    ]
    optimizer = torch.optim.Adam(
        params, lr=cfg.lr0, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )
    last = cfg.epochs - 1
    scheduler = LambdaLR(optimizer, lambda e: learning_rate(min(e, last), cfg) / cfg.lr0)

    trace = [] if cfg.record_trace else None
    initial = None
    for epoch in tqdm(range(cfg.epochs), desc="refine", disable=not cfg.progress):
        optimizer.zero_grad()
        terms = model.terms(*params)
        total = model.total(terms)
        if not torch.isfinite(total):
            raise DivergedError(epoch, float(total))

        if epoch == 0 or trace is not None or epoch % 100 == 0:
            energy = model.breakdown(terms)
            if epoch == 0:
                initial = energy
            if trace is not None:
                trace.append(TraceEntry(epoch, energy, optimizer.param_groups[0]["lr"]))
            if epoch % 100 == 0:
                logger.debug("epoch %d: total %.6g", epoch, energy.total)

        if total.requires_grad:
            total.backward()
        optimizer.step()
        scheduler.step()

    for p in params:
        p.grad = None
    terms = model.terms(*params)
    total = model.total(terms)
    if not torch.isfinite(total):
        raise DivergedError(cfg.epochs, float(total))
    if total.requires_grad:
        total.backward()
    grad_norm = float(np.linalg.norm(flatten_gradient(params)))
    final = model.breakdown(terms)

    theta, root_orient, root_trans = (p.detach().numpy().copy() for p in params)
    refined = start.replace(theta=theta, root_orient=root_orient, root_trans=root_trans)
    elapsed = time.perf_counter() - started
    logger.info(
        "refinement done in %.2fs: energy %.6g -> %.6g", elapsed, initial.total, final.total
    )
    return RefinementResult(refined, trace, grad_norm, elapsed, scale, initial, final)


def write_trace_csv(trace: List[TraceEntry], path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", *TERMS, "total", "lr"])
        for entry in trace:
            e = entry.energy
            writer.writerow(
                [entry.epoch, *(repr(getattr(e, name)) for name in TERMS), repr(e.total), repr(entry.lr)]
            )
