"""
Rotations, rigid transforms and the pinhole camera.

Rotations are stored as axis-angle vectors and turned into matrices on
demand. Extrinsics follow one convention everywhere: world-to-camera,
``p_c = R p_w + t``.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from motion_refine.errors import BehindCameraError, InvalidArgumentError
from motion_refine.utils import as_array, read_json, require, write_json

logger = logging.getLogger(__name__)

_SMALL_ANGLE = 1e-7
_ORTHONORMAL_TOL = 1e-6
MIN_DEPTH = 1e-6

ArrayLike = Union[np.ndarray, torch.Tensor]


def _skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )


def rodrigues(aa: torch.Tensor) -> torch.Tensor:
    """Differentiable Rodrigues map for a batch of axis-angle vectors (..., 3).

    Below ``_SMALL_ANGLE`` the coefficients come from their Taylor series so
    that neither the value nor the gradient divides by the angle.
    """
    theta2 = (aa * aa).sum(dim=-1)[..., None, None]
    small = theta2 < _SMALL_ANGLE ** 2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)

    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)

    K = _skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a * K + b * (K @ K)


def axis_angle_to_matrix(aa: ArrayLike) -> ArrayLike:
    """ Maps axis-angle vectors (..., 3) to rotation matrices (..., 3, 3) """
    if isinstance(aa, torch.Tensor):
        return rodrigues(aa)

    aa = np.asarray(aa, dtype=np.float64)
    if aa.shape[-1:] != (3,):
        raise InvalidArgumentError(f"axis-angle must end in a 3-vector, got {aa.shape}")
    if not np.all(np.isfinite(aa)):
        raise InvalidArgumentError("axis-angle contains non-finite components")
    return rodrigues(torch.as_tensor(np.ascontiguousarray(aa))).numpy()


def check_rotation(R: np.ndarray, tol: float = _ORTHONORMAL_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise InvalidArgumentError(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidArgumentError("rotation contains non-finite entries")

    gram = np.swapaxes(R, -1, -2) @ R
    ortho_err = np.abs(gram - np.eye(3)).max() if R.size else 0.0
    det_err = np.abs(np.linalg.det(R) - 1.0).max() if R.size else 0.0
    if ortho_err > tol or det_err > tol:
        raise InvalidArgumentError(
            f"not a rotation matrix (orthonormality error {ortho_err:.3g}, "
            f"determinant error {det_err:.3g})"
        )


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """ Log map of rotation matrices (..., 3, 3); angles lie in [0, pi] """
    R = np.asarray(R, dtype=np.float64)
    check_rotation(R)
    flat = R.reshape(-1, 3, 3)
    if len(flat) == 0:
        return np.zeros(R.shape[:-2] + (3,))
    rotvec = Rotation.from_matrix(flat).as_rotvec()
    return rotvec.reshape(R.shape[:-2] + (3,))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        check_rotation(rotation)
        if not np.all(np.isfinite(translation)):
            raise InvalidArgumentError("translation contains non-finite entries")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """ self ∘ other: applies ``other`` first """
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def transform_points(
    rotations: torch.Tensor, translations: torch.Tensor, points: torch.Tensor
) -> torch.Tensor:
    """ Per-frame rigid transform of points (T, K, 3) by (T, 3, 3), (T, 3) """
    return torch.einsum("tij,tkj->tki", rotations, points) + translations[:, None, :]


def perspective(points_cam: torch.Tensor, intrinsics: Sequence[float]) -> torch.Tensor:
    """ Pinhole projection of camera-frame points (..., 3) to pixels (..., 2) """
    fx, fy, cx, cy = intrinsics
    z = points_cam[..., 2]
    u = fx * points_cam[..., 0] / z + cx
    v = fy * points_cam[..., 1] / z + cy
    return torch.stack([u, v], dim=-1)


def check_depth(points_cam: ArrayLike, joint_ids: Optional[Sequence[int]] = None):
    """ Raises BehindCameraError for the first point with depth <= MIN_DEPTH """
    z = points_cam[..., 2]
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    bad = np.argwhere(~(z > MIN_DEPTH))
    if len(bad):
        index = tuple(bad[0])
        frame = int(index[0]) if len(index) > 1 else 0
        joint = int(index[-1])
        if joint_ids is not None:
            joint = int(joint_ids[joint])
        raise BehindCameraError(frame, joint, float(z[index]))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with per-frame world-to-camera extrinsics.

    :param fx: focal length along x in pixels
    :param fy: focal length along y in pixels
    :param cx: principal point x in pixels
    :param cy: principal point y in pixels
    :param extrinsics: one world-to-camera transform per frame
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: Tuple[RigidTransform, ...]

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(
                f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))

    @classmethod
    def static(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        n_frames: int,
        transform: Optional[RigidTransform] = None,
    ) -> "Camera":
        transform = transform or RigidTransform.identity()
        return cls(fx, fy, cx, cy, n_frames * (transform,))

    @property
    def n_frames(self) -> int:
        return len(self.extrinsics)

    @property
    def intrinsics(self) -> Tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)

    def check_length(self, n_frames: int):
        if self.n_frames != n_frames:
            raise InvalidArgumentError(
                f"camera has {self.n_frames} extrinsics but the sequence has {n_frames} frames"
            )

    def rotations(self) -> np.ndarray:
        return np.stack([e.rotation for e in self.extrinsics])

    def translations(self) -> np.ndarray:
        return np.stack([e.translation for e in self.extrinsics])

    def camera_to_world_pose(self, t: int) -> RigidTransform:
        return self.extrinsics[t].inverse()

    def project(self, t: int, p_world, joint: Optional[int] = None) -> np.ndarray:
        """ Projects a single world point seen at frame ``t`` to pixels """
        p_cam = self.extrinsics[t].apply(np.asarray(p_world, dtype=np.float64))
        if not p_cam[2] > MIN_DEPTH:
            raise BehindCameraError(t, joint, float(p_cam[2]))
        return np.array(
            [
                self.fx * p_cam[0] / p_cam[2] + self.cx,
                self.fy * p_cam[1] / p_cam[2] + self.cy,
            ]
        )

    def project_points(self, points_world: np.ndarray) -> np.ndarray:
        """ Projects world points (T, K, 3) frame by frame to pixels (T, K, 2) """
        self.check_length(len(points_world))
        points = torch.as_tensor(np.asarray(points_world, dtype=np.float64))
        points_cam = transform_points(
            torch.as_tensor(self.rotations()), torch.as_tensor(self.translations()), points
        )
        check_depth(points_cam)
        return perspective(points_cam, self.intrinsics).numpy()

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "extrinsics": [
                {"R": e.rotation.reshape(-1).tolist(), "t": e.translation.tolist()}
                for e in self.extrinsics
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, path=None) -> "Camera":
        intrinsics = [
            float(as_array(require(doc, key, path), key, (), path)) for key in ("fx", "fy", "cx", "cy")
        ]
        extrinsics = []
        for i, item in enumerate(require(doc, "extrinsics", path)):
            R = as_array(require(item, "R", path), f"extrinsics[{i}].R", (9,), path)
            t = as_array(require(item, "t", path), f"extrinsics[{i}].t", (3,), path)
            extrinsics.append(RigidTransform(R.reshape(3, 3), t))
        return cls(*intrinsics, tuple(extrinsics))


def load_camera(path) -> Camera:
    camera = Camera.from_dict(read_json(path), path)
    logger.info("loaded camera with %d frames from %s", camera.n_frames, path)
    return camera


def save_camera(camera: Camera, path):
    write_json(path, camera.to_dict())
