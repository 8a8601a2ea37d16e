"""
Contact stabilisation of feet and hands.

A stationary probability from the predicted speed blends each end effector
towards its next-frame position; damped least-squares IK over the joint
chain then moves the effector to the blended target, one frame at a time.
"""

import csv
import logging
import os
from dataclasses import dataclass
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.linalg import solve

from motion_refine.body import (
    FrameTag,
    JointPositions,
    Skeleton,
    apply_shape,
    batch_global_rotations_and_positions,
)
from motion_refine.dynamics import DynamicsPredictions
from motion_refine.errors import InvalidArgumentError, SequenceTooShortError
from motion_refine.geom import axis_angle_to_matrix, matrix_to_axis_angle
from motion_refine.motion import MotionSequence, joints_world

logger = logging.getLogger(__name__)

_MIN_BACKTRACK = 1.0 / 64.0


@dataclass(frozen=True)
class ContactConfig:
    xi_v: float = 0.1
    end_effectors: Tuple[int, ...] = ()
    ik_iterations: int = 20
    ik_damping: float = 1e-2
    ik_step_tolerance: float = 1e-4

    def __post_init__(self):
        if not self.xi_v > 0:
            raise InvalidArgumentError(f"xi_v must be positive, got {self.xi_v}")
        if not (self.ik_iterations > 0 and self.ik_damping > 0 and self.ik_step_tolerance > 0):
            raise InvalidArgumentError("IK parameters must be positive")
        object.__setattr__(self, "end_effectors", tuple(int(j) for j in self.end_effectors))

    def effectors_for(self, skel: Skeleton) -> Tuple[int, ...]:
        return self.end_effectors or skel.end_effectors

    def to_dict(self) -> dict:
        return {
            "xi_v": self.xi_v,
            "end_effectors": list(self.end_effectors),
            "ik_iterations": self.ik_iterations,
            "ik_damping": self.ik_damping,
            "ik_step_tolerance": self.ik_step_tolerance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ContactConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown contact settings: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class ContactReportRow:
    frame: int
    effector: int
    p_s: float
    pre_error: float
    post_error: float
    reachable: bool = True


@dataclass
class ContactReport:
    rows: List[ContactReportRow]

    def unreachable(self) -> List[ContactReportRow]:
        return [r for r in self.rows if not r.reachable]

    def to_csv(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "effector", "p_s", "pre_error", "post_error", "reachable"])
            for r in self.rows:
                writer.writerow(
                    [r.frame, r.effector, repr(r.p_s), repr(r.pre_error), repr(r.post_error), int(r.reachable)]
                )


def stationary_probability(speed, xi_v: float = 0.1):
    """ p_s = max(0, 1 - speed / xi_v) """
    speed_arr = np.asarray(speed, dtype=np.float64)
    if np.any(speed_arr < 0) or not np.all(np.isfinite(speed_arr)):
        raise InvalidArgumentError("speed must be a finite nonnegative value")
    if not xi_v > 0:
        raise InvalidArgumentError(f"xi_v must be positive, got {xi_v}")
    p = np.maximum(0.0, 1.0 - speed_arr / xi_v)
    return float(p) if p.ndim == 0 else p


def stationary_weights(
    preds: DynamicsPredictions,
    effectors: Sequence[int],
    cfg: ContactConfig,
    skel: Optional[Skeleton] = None,
) -> np.ndarray:
    """p_s per frame and effector, (T, E).

    Frame t uses the predicted speed between t and t+1; the last frame has no
    successor and gets p_s = 1. Effectors outside the prediction joints fall
    back to their nearest predicted ancestor when a skeleton is given.
    """
    T = preds.n_frames
    lookup = {j: k for k, j in enumerate(preds.joint_map)}
    p_s = np.ones((T, len(effectors)))
    speed = np.linalg.norm(preds.vel3d, axis=-1)
    for e, joint in enumerate(effectors):
        k = lookup.get(joint)
        if k is None and skel is not None:
            for ancestor in reversed(skel.chain(joint)):
                if ancestor in lookup:
                    k = lookup[ancestor]
                    break
        if k is None:
            logger.warning("end effector %d has no predicted speed; treated as stationary", joint)
            continue
        p_s[:-1, e] = stationary_probability(speed[:, k], cfg.xi_v)
    return p_s


def contact_targets(
    joints: JointPositions,
    preds: DynamicsPredictions,
    cfg: ContactConfig,
    skel: Optional[Skeleton] = None,
    effectors: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """ Targets Ĵ^t = p_s J^t + (1 - p_s) J^{t+1} for the end effectors, (T, E, 3) """
    if joints.n_frames < 2:
        raise SequenceTooShortError("contact targets", 2, joints.n_frames)
    preds.check_length(joints.n_frames)
    if effectors is None:
        effectors = cfg.end_effectors or (skel.end_effectors if skel is not None else ())
    effectors = list(effectors)

    p_s = stationary_weights(preds, effectors, cfg, skel)[..., None]
    current = joints.positions[:, effectors]
    following = np.concatenate([current[1:], current[-1:]], axis=0)
    return p_s * current + (1.0 - p_s) * following


def _frame_fk(skel: Skeleton, theta: np.ndarray, root_orient: np.ndarray, root_trans: np.ndarray):
    rotations, positions = batch_global_rotations_and_positions(
        skel,
        torch.as_tensor(theta[None]),
        torch.as_tensor(root_orient[None]),
        torch.as_tensor(root_trans[None]),
    )
    return rotations[0].numpy(), positions[0].numpy()


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rotate_chain(
    skel: Skeleton, theta: np.ndarray, rotations: np.ndarray, chain: Sequence[int], omega: np.ndarray
) -> np.ndarray:
    """Applies world-frame angular increments ``omega`` (n, 3) about each chain joint.

    Increments are expressed against the current accumulated rotations, so
    the first-order effector motion is sum_i omega_i x (p_e - p_i).
    """
    theta = theta.copy()
    increments = axis_angle_to_matrix(omega)
    for i, joint in enumerate(chain):
        parent = rotations[skel.parents[joint]]
        local = axis_angle_to_matrix(theta[joint])
        theta[joint] = matrix_to_axis_angle(parent.T @ increments[i] @ parent @ local)
    return theta


def ik_chains(skel: Skeleton, effectors: Sequence[int]) -> Dict[int, List[int]]:
    """Rotating joints per effector: its root path minus the root, the effector
    itself and any joint shared with another effector's path.
    """
    paths = {e: skel.chain(e)[1:-1] for e in effectors}
    counts = Counter(j for path in paths.values() for j in set(path))
    return {e: [j for j in path if counts[j] == 1] for e, path in paths.items()}


def _solve_effector(
    skel: Skeleton,
    theta: np.ndarray,
    root_orient: np.ndarray,
    root_trans: np.ndarray,
    effector: int,
    chain: Sequence[int],
    target: np.ndarray,
    cfg: ContactConfig,
) -> Tuple[np.ndarray, float, float, bool]:
    rotations, positions = _frame_fk(skel, theta, root_orient, root_trans)
    error = float(np.linalg.norm(target - positions[effector]))
    pre_error = error
    if not chain:
        return theta, pre_error, error, False
    base = positions[chain[0]]
    reach = _reach(skel, chain, effector)
    distance = float(np.linalg.norm(target - base))
    reachable = distance <= reach + cfg.ik_step_tolerance
    if error < cfg.ik_step_tolerance:
        return theta, pre_error, error, True

    # out of reach: steer towards full extension on the line to the target
    aim = target if reachable else base + (target - base) * (reach / distance)
    gap = float(np.linalg.norm(aim - positions[effector]))
    damping2 = cfg.ik_damping ** 2
    for iteration in range(cfg.ik_iterations):
        residual = aim - positions[effector]
        jacobian = np.hstack([-_skew(positions[effector] - positions[j]) for j in chain])
        omega = jacobian.T @ solve(jacobian @ jacobian.T + damping2 * np.eye(3), residual, assume_a="pos")
        omega = omega.reshape(len(chain), 3)

        step = 1.0
        while step >= _MIN_BACKTRACK:
            candidate = _rotate_chain(skel, theta, rotations, chain, step * omega)
            cand_rotations, cand_positions = _frame_fk(skel, candidate, root_orient, root_trans)
            cand_error = float(np.linalg.norm(target - cand_positions[effector]))
            if cand_error < error:
                break
            step /= 2
        else:
            break

        cand_gap = float(np.linalg.norm(aim - cand_positions[effector]))
        improvement = gap - cand_gap
        theta, rotations, positions, error, gap = candidate, cand_rotations, cand_positions, cand_error, cand_gap
        logger.debug("IK effector %d iteration %d: error %.3g", effector, iteration, error)
        if improvement < cfg.ik_step_tolerance or gap < cfg.ik_step_tolerance:
            break
    return theta, pre_error, error, bool(reachable)


def _reach(skel: Skeleton, chain: Sequence[int], effector: int) -> float:
    joints = list(chain[1:]) + [effector]
    return float(sum(np.linalg.norm(skel.rest_offsets[j]) for j in joints))


def ik_refine(
    seq: MotionSequence,
    skel: Skeleton,
    targets: np.ndarray,
    cfg: ContactConfig,
    effectors: Optional[Sequence[int]] = None,
    p_s: Optional[np.ndarray] = None,
) -> Tuple[MotionSequence, ContactReport]:
    """Per-frame damped least-squares IK towards end-effector targets.

    Only local rotations on the path from the root to each effector change;
    root orientation and translation stay fixed. An effector's error never
    grows: a step is kept only if it lowers the error, halving it otherwise.
    """
    if seq.frame_tag != FrameTag.WORLD:
        raise InvalidArgumentError("ik_refine expects a world-frame sequence")
    effectors = list(cfg.effectors_for(skel) if effectors is None else effectors)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (seq.n_frames, len(effectors), 3):
        raise InvalidArgumentError(
            f"targets must be ({seq.n_frames}, {len(effectors)}, 3), got {targets.shape}"
        )

    shaped = apply_shape(skel, seq.beta)
    chains = ik_chains(shaped, effectors)
    theta = seq.theta.copy()
    rows = []
    for t in range(seq.n_frames):
        frame_theta = theta[t]
        for e, effector in enumerate(effectors):
            frame_theta, pre, post, reachable = _solve_effector(
                shaped, frame_theta, seq.root_orient[t], seq.root_trans[t], effector, chains[effector], targets[t, e], cfg
            )
            if not reachable:
                logger.warning("frame %d: target of effector %d is out of reach", t, effector)
            rows.append(
                ContactReportRow(
                    t, effector, 1.0 if p_s is None else float(p_s[t, e]), pre, post, reachable
                )
            )
        theta[t] = frame_theta

    return seq.replace(theta=theta), ContactReport(rows)


def postprocess(
    seq: MotionSequence, skel: Skeleton, preds: DynamicsPredictions, cfg: Optional[ContactConfig] = None
) -> Tuple[MotionSequence, ContactReport]:
    """ Contact targets followed by IK for the configured end effectors """
    cfg = cfg or ContactConfig()
    effectors = list(cfg.effectors_for(skel))
    joints = joints_world(seq, skel)
    targets = contact_targets(joints, preds, cfg, skel, effectors)
    p_s = stationary_weights(preds, effectors, cfg, skel)
    refined, report = ik_refine(seq, skel, targets, cfg, effectors, p_s)
    logger.info(
        "contact post-processing: %d effector-frames, %d unreachable",
        len(report.rows),
        len(report.unreachable()),
    )
    return refined, report
