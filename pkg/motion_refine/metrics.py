"""
World-grounded evaluation metrics.

Position errors are in millimeters, root translation error in meters,
dynamics errors in m/s and m/s², jitter in m/s³. Threshold metrics are
percentages.
"""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from motion_refine.body import FrameTag, JointPositions, Skeleton
from motion_refine.dynamics import acceleration_field, jerk_residuals, velocity_field
from motion_refine.errors import InvalidArgumentError, SequenceTooShortError
from motion_refine.geom import Camera
from motion_refine.motion import MotionSequence, joints_world, to_camera_frame

logger = logging.getLogger(__name__)

SEGMENT_LENGTH = 100
PCE_THRESHOLDS = (0.10, 0.05, 0.01)
PCK_THRESHOLDS = (10.0, 5.0)
FOOT_HEIGHT_THRESHOLD = 0.05
_DEGENERATE = 1e-12


class AlignMode(Enum):
    FULL_SEGMENT = "full_segment"
    FIRST_TWO_FRAMES = "first_two_frames"


@dataclass(frozen=True)
class ValueRange:
    r_min: float
    r_max: float

    def __post_init__(self):
        if not self.r_max > self.r_min:
            raise InvalidArgumentError(
                f"degenerate range: r_max {self.r_max} must exceed r_min {self.r_min}"
            )

    @property
    def width(self) -> float:
        return self.r_max - self.r_min


@dataclass(frozen=True)
class DatasetStats:
    velocity: ValueRange
    acceleration: ValueRange

    def to_dict(self) -> dict:
        return {
            "velocity": [self.velocity.r_min, self.velocity.r_max],
            "acceleration": [self.acceleration.r_min, self.acceleration.r_max],
        }


@dataclass(frozen=True)
class Alignment:
    """ x -> scale * R x + t """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes(source: np.ndarray, target: np.ndarray, with_scale: bool = False) -> Alignment:
    """Least-squares alignment of ``source`` (N, 3) onto ``target`` (N, 3).

    Rigid by default, similarity with ``with_scale``. A source whose points
    all coincide has no defined rotation; the alignment is then
    translation-only and flagged ``degenerate``.
    """
    assert source.shape == target.shape and source.ndim == 2
    mean_s = source.mean(axis=0)
    mean_t = target.mean(axis=0)
    centered_s = source - mean_s
    centered_t = target - mean_t

    var_s = float((centered_s ** 2).sum())
    if var_s < _DEGENERATE:
        logger.warning("degenerate alignment set; using translation-only alignment")
        return Alignment(np.eye(3), mean_t - mean_s, 1.0, True)

    cov = centered_t.T @ centered_s
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt

    scale = float(np.trace(np.diag(d) @ s) / var_s) if with_scale else 1.0
    return Alignment(rotation, mean_t - scale * rotation @ mean_s, scale)


def _check_pair(pred: JointPositions, gt: JointPositions, min_frames: int, what: str):
    if pred.positions.shape != gt.positions.shape:
        raise InvalidArgumentError(
            f"pred {pred.positions.shape} and gt {gt.positions.shape} differ in shape"
        )
    if pred.frame != gt.frame:
        raise InvalidArgumentError("pred and gt are expressed in different frames")
    if pred.n_frames < min_frames:
        raise SequenceTooShortError(what, min_frames, pred.n_frames)


def _segments(n_frames: int) -> List[slice]:
    return [
        slice(start, min(start + SEGMENT_LENGTH, n_frames))
        for start in range(0, n_frames, SEGMENT_LENGTH)
        if min(start + SEGMENT_LENGTH, n_frames) - start >= 2
    ]


def segment_align_mpjpe(
    pred: JointPositions, gt: JointPositions, mode: AlignMode = AlignMode.FULL_SEGMENT
) -> float:
    """Mean joint error after per-segment rigid alignment, in mm.

    ``FULL_SEGMENT`` fits the alignment on every frame of a segment (WA-MPJPE),
    ``FIRST_TWO_FRAMES`` only on its first two frames (W-MPJPE).
    """
    _check_pair(pred, gt, 2, "segment alignment")
    mode = AlignMode(mode)
    errors = []
    for segment in _segments(pred.n_frames):
        p = pred.positions[segment]
        g = gt.positions[segment]
        fit = p if mode == AlignMode.FULL_SEGMENT else p[:2]
        ref = g if mode == AlignMode.FULL_SEGMENT else g[:2]
        alignment = procrustes(fit.reshape(-1, 3), ref.reshape(-1, 3))
        aligned = alignment.apply(p.reshape(-1, 3)).reshape(p.shape)
        errors.append(np.linalg.norm(aligned - g, axis=-1).mean())
    return float(np.mean(errors) * 1000.0)


def pa_mpjpe(pred: JointPositions, gt: JointPositions) -> float:
    """ Mean joint error after per-frame similarity alignment, in mm """
    _check_pair(pred, gt, 1, "PA-MPJPE")
    errors = []
    for p, g in zip(pred.positions, gt.positions):
        aligned = procrustes(p, g, with_scale=True).apply(p)
        errors.append(np.linalg.norm(aligned - g, axis=-1).mean())
    return float(np.mean(errors) * 1000.0)


def rte(pred: MotionSequence, gt: MotionSequence) -> float:
    """ Root translation error after one rigid fit over the whole trajectory, in m """
    if pred.n_frames != gt.n_frames:
        raise InvalidArgumentError(f"pred has {pred.n_frames} frames, gt has {gt.n_frames}")
    alignment = procrustes(pred.root_trans, gt.root_trans)
    return float(np.linalg.norm(alignment.apply(pred.root_trans) - gt.root_trans, axis=-1).mean())


def dynamics_errors(pred: JointPositions, gt: JointPositions, dt: float) -> Tuple[float, float]:
    """ (MPJVE m/s, MPJAE m/s²) as mean Euclidean norms of the stencil errors """
    _check_pair(pred, gt, 3, "dynamics errors")
    if pred.frame != FrameTag.CAMERA:
        logger.debug("dynamics errors computed on %s-frame joints", pred.frame.value)
    mpjve = np.linalg.norm(velocity_field(pred, dt) - velocity_field(gt, dt), axis=-1).mean()
    mpjae = np.linalg.norm(acceleration_field(pred, dt) - acceleration_field(gt, dt), axis=-1).mean()
    return float(mpjve), float(mpjae)


def jitter(pred: JointPositions, dt: float) -> float:
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    return float(np.linalg.norm(jerk_residuals(pred), axis=-1).mean() / dt ** 3)


def foot_sliding(
    pred: JointPositions,
    skel: Skeleton,
    height_thresh: float = FOOT_HEIGHT_THRESHOLD,
) -> float:
    """Mean horizontal foot displacement between consecutive contact frames, in mm.

    A foot is in contact while its height above the lowest foot height of the
    sequence is below ``height_thresh``. Returns 0 when no foot stays in
    contact for two consecutive frames.
    """
    if not skel.feet:
        raise InvalidArgumentError("skeleton declares no foot joints")
    if pred.n_frames < 2:
        raise SequenceTooShortError("foot sliding", 2, pred.n_frames)
    if pred.frame != FrameTag.WORLD:
        raise InvalidArgumentError("foot sliding expects world-frame joints")

    feet = pred.positions[:, list(skel.feet)]
    heights = feet[..., skel.up_axis]
    contact = heights - heights.min() < height_thresh
    held = contact[1:] & contact[:-1]
    if not held.any():
        return 0.0

    step = feet[1:] - feet[:-1]
    step[..., skel.up_axis] = 0.0
    return float(np.linalg.norm(step, axis=-1)[held].mean() * 1000.0)


def percentile_range(samples, lo: float = 0.1, hi: float = 99.9) -> ValueRange:
    """ Linear-interpolation percentiles (numpy's default scheme) of flattened samples """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size < 2:
        raise InvalidArgumentError(f"need at least 2 samples, got {samples.size}")
    r_min, r_max = np.percentile(samples, [lo, hi])
    return ValueRange(float(r_min), float(r_max))


def pce(pred, gt, stats: ValueRange, tau: float) -> float:
    """ Percentage of components with |pred - gt| strictly below tau * (r_max - r_min) """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise InvalidArgumentError(f"pred {pred.shape} and gt {gt.shape} must match and be non-empty")
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    return float(100.0 * np.mean(np.abs(pred - gt) < tau * stats.width))


def pck(pred2d, gt2d, thresh: float) -> float:
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    if pred2d.shape != gt2d.shape or pred2d.shape[-1] != 2:
        raise InvalidArgumentError(f"keypoints must share a (..., 2) shape, got {pred2d.shape}, {gt2d.shape}")
    return float(100.0 * np.mean(np.linalg.norm(pred2d - gt2d, axis=-1) < thresh))


def keypoint_accel_error(pred2d, gt2d) -> float:
    """ Mean norm of the second-difference error of 2D keypoints, pixels/frame² """
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    if pred2d.shape != gt2d.shape or pred2d.ndim != 3 or pred2d.shape[-1] != 2:
        raise InvalidArgumentError(f"keypoints must share a (T, K, 2) shape, got {pred2d.shape}, {gt2d.shape}")
    if len(pred2d) < 3:
        raise SequenceTooShortError("keypoint acceleration", 3, len(pred2d))
    # unit frame spacing
    accel = acceleration_field(pred2d - gt2d, 1.0)
    return float(np.linalg.norm(accel, axis=-1).mean())


def _threshold_key(value: float) -> str:
    return f"{value:g}"


@dataclass(frozen=True)
class MetricReport:
    wa_mpjpe: float
    w_mpjpe: float
    pa_mpjpe: float
    rte: float
    jitter: float
    fs: float
    mpjve: float
    mpjae: float
    pce_vel: Dict[float, float] = field(default_factory=dict)
    pce_acc: Dict[float, float] = field(default_factory=dict)
    pck: Dict[float, float] = field(default_factory=dict)
    accel: float = 0.0

    _SCALARS = ("wa_mpjpe", "w_mpjpe", "pa_mpjpe", "rte", "jitter", "fs", "mpjve", "mpjae", "accel")
    _PERCENTAGES = ("pce_vel", "pce_acc", "pck")

    def __post_init__(self):
        for name in self._SCALARS:
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"{name} must be a nonnegative number, got {value}")
        for name in self._PERCENTAGES:
            if not all(0.0 <= v <= 100.0 for v in getattr(self, name).values()):
                raise InvalidArgumentError(f"{name} percentages must lie in [0, 100]")

    def to_dict(self) -> dict:
        doc = {name: getattr(self, name) for name in self._SCALARS}
        for name in self._PERCENTAGES:
            doc[name] = {_threshold_key(k): v for k, v in getattr(self, name).items()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False)

    def columns(self) -> List[Tuple[str, float]]:
        rows = [(name, getattr(self, name)) for name in self._SCALARS]
        for name in self._PERCENTAGES:
            rows += [(f"{name}@{_threshold_key(k)}", v) for k, v in getattr(self, name).items()]
        return rows

    def csv_header(self) -> List[str]:
        return [name for name, _ in self.columns()]

    def to_csv_row(self) -> str:
        out = io.StringIO()
        csv.writer(out, lineterminator="\n").writerow([repr(v) for _, v in self.columns()])
        return out.getvalue()

    def format_table(self, other: Optional["MetricReport"] = None, labels=("value", "other")) -> str:
        """ Aligned text table; with ``other`` the two reports sit side by side """
        rows = self.columns()
        width = max(len(name) for name, _ in rows)
        header = f"{'metric':<{width}}  {labels[0]:>12}"
        if other is not None:
            header += f"  {labels[1]:>12}"
            others = dict(other.columns())
        lines = [header, "-" * len(header)]
        for name, value in rows:
            line = f"{name:<{width}}  {value:>12.4f}"
            if other is not None:
                line += f"  {others.get(name, float('nan')):>12.4f}"
            lines.append(line)
        return "\n".join(lines)


def write_reports_csv(reports: Dict[str, MetricReport], path):
    """ One row per labelled report under a shared header """
    if not reports:
        raise InvalidArgumentError("no metric reports to write")
    headers = {tuple(report.csv_header()) for report in reports.values()}
    if len(headers) != 1:
        raise InvalidArgumentError("metric reports disagree on their columns")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", *headers.pop()])
        for label, report in reports.items():
            writer.writerow([label, *(repr(v) for _, v in report.columns())])


def dataset_stats(gt_cam: JointPositions, dt: float) -> DatasetStats:
    """ Percentile ranges of ground-truth velocity and acceleration components """
    return DatasetStats(
        velocity=percentile_range(velocity_field(gt_cam, dt)),
        acceleration=percentile_range(acceleration_field(gt_cam, dt)),
    )


def evaluate_sequences(
    pred: MotionSequence,
    gt: MotionSequence,
    skel: Skeleton,
    cam: Camera,
    stats: Optional[DatasetStats] = None,
    height_thresh: float = FOOT_HEIGHT_THRESHOLD,
    pce_thresholds: Sequence[float] = PCE_THRESHOLDS,
    pck_thresholds: Sequence[float] = PCK_THRESHOLDS,
) -> MetricReport:
    """Full report for a predicted against a ground-truth world sequence.

    Dynamics and threshold metrics use camera-frame joints; keypoints are the
    projections of the prediction joints.
    """
    if pred.n_frames != gt.n_frames:
        raise InvalidArgumentError(f"pred has {pred.n_frames} frames, gt has {gt.n_frames}")
    if pred.dt != gt.dt:
        raise InvalidArgumentError(f"pred dt {pred.dt} differs from gt dt {gt.dt}")
    if pred.n_frames < 4:
        raise SequenceTooShortError("jitter", 4, pred.n_frames)
    dt = gt.dt

    pred_world = joints_world(pred, skel)
    gt_world = joints_world(gt, skel)
    pred_cam = to_camera_frame(pred_world, cam)
    gt_cam = to_camera_frame(gt_world, cam)
    if stats is None:
        try:
            stats = dataset_stats(gt_cam, dt)
        except InvalidArgumentError:
            logger.warning("ground truth has no dynamics spread; PCE not reported")

    mpjve, mpjae = dynamics_errors(pred_cam, gt_cam, dt)
    vel_p, vel_g = velocity_field(pred_cam, dt), velocity_field(gt_cam, dt)
    acc_p, acc_g = acceleration_field(pred_cam, dt), acceleration_field(gt_cam, dt)

    joint_map = list(skel.prediction_joints)
    kp_pred = cam.project_points(pred_world.positions[:, joint_map])
    kp_gt = cam.project_points(gt_world.positions[:, joint_map])

    report = MetricReport(
        wa_mpjpe=segment_align_mpjpe(pred_world, gt_world, AlignMode.FULL_SEGMENT),
        w_mpjpe=segment_align_mpjpe(pred_world, gt_world, AlignMode.FIRST_TWO_FRAMES),
        pa_mpjpe=pa_mpjpe(pred_world, gt_world),
        rte=rte(pred, gt),
        jitter=jitter(pred_world, dt),
        fs=foot_sliding(pred_world, skel, height_thresh) if skel.feet else 0.0,
        mpjve=mpjve,
        mpjae=mpjae,
        pce_vel={tau: pce(vel_p, vel_g, stats.velocity, tau) for tau in pce_thresholds} if stats else {},
        pce_acc={tau: pce(acc_p, acc_g, stats.acceleration, tau) for tau in pce_thresholds} if stats else {},
        pck={thresh: pck(kp_pred, kp_gt, thresh) for thresh in pck_thresholds},
        accel=keypoint_accel_error(kp_pred, kp_gt),
    )
    logger.info("metrics: WA-MPJPE %.2f mm, MPJAE %.4f m/s^2", report.wa_mpjpe, report.mpjae)
    return report
