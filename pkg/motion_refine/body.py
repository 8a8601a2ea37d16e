"""
Articulated skeleton with linear shape scaling and forward kinematics.

Only joints are modelled; joint ``i`` sits at its parent's position plus
the parent's accumulated rotation applied to ``rest_offsets[i]``. Joint 0
sits at ``root_trans``; ``t_root`` only enters the camera/world lifting.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import torch

from motion_refine.errors import FileFormatError, InvalidArgumentError
from motion_refine.geom import rodrigues
from motion_refine.utils import as_array, read_json, require, write_json

logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


class FrameTag(Enum):
    WORLD = "world"
    CAMERA = "camera"


@dataclass(frozen=True)
class JointPositions:
    positions: np.ndarray  # (T, J, 3) meters
    frame: FrameTag = FrameTag.WORLD

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 3 or positions.shape[-1] != 3 or len(positions) < 1:
            raise InvalidArgumentError(
                f"joint positions must be (T>=1, J, 3), got {positions.shape}"
            )
        if not np.all(np.isfinite(positions)):
            raise InvalidArgumentError("joint positions contain non-finite values")
        object.__setattr__(self, "positions", positions)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    def select(self, joint_ids: Sequence[int]) -> "JointPositions":
        return JointPositions(self.positions[:, list(joint_ids)], self.frame)


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint tree with rest offsets, a linear shape basis and a root offset.

    :param parents: parent index per joint, ``-1`` for the root
    :param rest_offsets: (J, 3) bone vectors from the parent, meters
    :param shape_basis: (J, 3, B) offset deltas per shape coefficient
    :param t_root: root offset in body coordinates, meters
    :param names: joint names
    :param end_effectors: feet and hands
    :param joint_map: skeleton joints carried by dynamics predictions
    :param feet: foot joints used for contact metrics
    :param up_axis: index of the vertical world axis
    """

    parents: Tuple[int, ...]
    rest_offsets: np.ndarray
    shape_basis: np.ndarray
    t_root: np.ndarray
    names: Tuple[str, ...]
    end_effectors: Tuple[int, ...] = ()
    joint_map: Optional[Tuple[int, ...]] = None
    feet: Tuple[int, ...] = ()
    up_axis: int = 1

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        n = len(parents)
        if n < 2:
            raise InvalidArgumentError(f"a skeleton needs at least 2 joints, got {n}")
        if parents[0] != -1:
            raise InvalidArgumentError("joint 0 must be the root (parent -1)")
        for i, p in enumerate(parents[1:], start=1):
            if not 0 <= p < i:
                raise InvalidArgumentError(
                    f"parent of joint {i} is {p}; parents must precede their children"
                )

        rest_offsets = np.array(self.rest_offsets, dtype=np.float64).reshape(n, 3)
        shape_basis = np.array(self.shape_basis, dtype=np.float64)
        if shape_basis.size == 0:
            shape_basis = np.zeros((n, 3, 0))
        if shape_basis.shape[:2] != (n, 3) or shape_basis.ndim != 3:
            raise InvalidArgumentError(
                f"shape basis must be ({n}, 3, B), got {shape_basis.shape}"
            )
        if np.any(rest_offsets[0] != 0) or np.any(shape_basis[0] != 0):
            raise InvalidArgumentError("the root joint carries no rest offset")

        names = tuple(self.names) if self.names else tuple(f"joint_{i}" for i in range(n))
        if len(names) != n:
            raise InvalidArgumentError(f"expected {n} joint names, got {len(names)}")

        for label, ids in (("end_effectors", self.end_effectors), ("feet", self.feet)):
            if any(not 0 <= j < n for j in ids):
                raise InvalidArgumentError(f"{label} index out of range: {list(ids)}")
        joint_map = None
        if self.joint_map is not None:
            joint_map = tuple(int(j) for j in self.joint_map)
            if any(not 0 <= j < n for j in joint_map):
                raise InvalidArgumentError(f"joint_map index out of range: {list(joint_map)}")
        if self.up_axis not in (0, 1, 2):
            raise InvalidArgumentError(f"up_axis must be 0, 1 or 2, got {self.up_axis}")

        for arr in (rest_offsets, shape_basis):
            arr.setflags(write=False)
        t_root = np.array(self.t_root, dtype=np.float64).reshape(3)
        t_root.setflags(write=False)

        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", rest_offsets)
        object.__setattr__(self, "shape_basis", shape_basis)
        object.__setattr__(self, "t_root", t_root)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "end_effectors", tuple(int(j) for j in self.end_effectors))
        object.__setattr__(self, "feet", tuple(int(j) for j in self.feet))
        object.__setattr__(self, "joint_map", joint_map)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def prediction_joints(self) -> Tuple[int, ...]:
        if self.joint_map is None:
            return tuple(range(self.n_joints))
        return self.joint_map

    @cached_property
    def graph(self) -> nx.DiGraph:
        G = nx.DiGraph()
        G.add_nodes_from(range(self.n_joints))
        G.add_edges_from((p, i) for i, p in enumerate(self.parents) if p >= 0)
        assert nx.is_arborescence(G)
        return G

    def chain(self, joint: int) -> List[int]:
        """ Joints on the path from the root to ``joint``, both included """
        return nx.shortest_path(self.graph, 0, joint)

    def nearest_mapped(self, joint: int) -> Optional[int]:
        """Position in ``prediction_joints`` of ``joint`` or its closest mapped ancestor."""
        lookup = {j: k for k, j in enumerate(self.prediction_joints)}
        for j in reversed(self.chain(joint)):
            if j in lookup:
                return lookup[j]
        return None

    def to_dict(self) -> dict:
        doc = {
            "parents": list(self.parents),
            "rest_offsets": self.rest_offsets.tolist(),
            "t_root": self.t_root.tolist(),
            "names": list(self.names),
            "end_effectors": list(self.end_effectors),
            "feet": list(self.feet),
            "up_axis": self.up_axis,
        }
        if self.n_shape:
            doc["shape_basis"] = self.shape_basis.tolist()
        if self.joint_map is not None:
            doc["joint_map"] = list(self.joint_map)
        return doc

    @classmethod
    def from_dict(cls, doc: dict, path=None) -> "Skeleton":
        parents = [-1 if p is None else int(p) for p in require(doc, "parents", path)]
        n = len(parents)
        shape_basis = doc.get("shape_basis")
        shape_basis = (
            np.zeros((n, 3, 0))
            if shape_basis is None
            else as_array(shape_basis, "shape_basis", (n, 3, None), path)
        )
        try:
            return cls(
                parents=tuple(parents),
                rest_offsets=as_array(require(doc, "rest_offsets", path), "rest_offsets", (n, 3), path),
                shape_basis=shape_basis,
                t_root=as_array(doc.get("t_root", [0.0, 0.0, 0.0]), "t_root", (3,), path),
                names=tuple(doc.get("names", ())),
                end_effectors=tuple(doc.get("end_effectors", ())),
                joint_map=doc.get("joint_map"),
                feet=tuple(doc.get("feet", ())),
                up_axis=int(doc.get("up_axis", 1)),
            )
        except InvalidArgumentError as e:
            raise FileFormatError("skeleton", str(e), path)


def load_skeleton(path) -> Skeleton:
    skeleton = Skeleton.from_dict(read_json(path), path)
    logger.info("loaded %d-joint skeleton from %s", skeleton.n_joints, path)
    return skeleton


def save_skeleton(skeleton: Skeleton, path):
    write_json(path, skeleton.to_dict())


def default_skeleton(name: str = "smpl24") -> Skeleton:
    """ One of the shipped skeletons: ``smpl24`` or ``toy6`` """
    path = os.path.join(DATA_DIR, f"{name}.json")
    if not os.path.exists(path):
        raise InvalidArgumentError(f"unknown skeleton '{name}'")
    return load_skeleton(path)


def resolve_skeleton(ref) -> Skeleton:
    """ Accepts a shipped skeleton name or a path to a skeleton file """
    if isinstance(ref, Skeleton):
        return ref
    if os.path.exists(os.path.join(DATA_DIR, f"{ref}.json")) and not os.path.exists(ref):
        return default_skeleton(ref)
    return load_skeleton(ref)


def apply_shape(skel: Skeleton, beta) -> Skeleton:
    """ Returns a skeleton whose offsets include the shape deltas ``basis · beta`` """
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if len(beta) > skel.n_shape:
        raise InvalidArgumentError(
            f"{len(beta)} shape coefficients for a basis of size {skel.n_shape}"
        )
    if not np.all(np.isfinite(beta)):
        raise InvalidArgumentError("shape coefficients contain non-finite values")
    if len(beta) == 0:
        return skel
    deltas = skel.shape_basis[:, :, : len(beta)] @ beta
    return replace(skel, rest_offsets=skel.rest_offsets + deltas)


def batch_global_rotations_and_positions(
    skel: Skeleton,
    theta: torch.Tensor,
    root_orient: torch.Tensor,
    root_trans: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Differentiable FK over a batch of frames.

    :param theta: (T, J, 3) local joint rotations
    :param root_orient: (T, 3) root orientation
    :param root_trans: (T, 3) root translation
    :return: accumulated rotations (T, J, 3, 3) and positions (T, J, 3)
    """
    local = rodrigues(theta)
    root = rodrigues(root_orient)
    offsets = torch.tensor(skel.rest_offsets, dtype=theta.dtype, device=theta.device)
    rotations = [root @ local[:, 0]]
    positions = [root_trans]
    for i in range(1, skel.n_joints):
        p = skel.parents[i]
        positions.append(positions[p] + rotations[p] @ offsets[i])
        rotations.append(rotations[p] @ local[:, i])
    return torch.stack(rotations, dim=1), torch.stack(positions, dim=1)


def batch_forward_kinematics(
    skel: Skeleton,
    theta: torch.Tensor,
    root_orient: torch.Tensor,
    root_trans: torch.Tensor,
) -> torch.Tensor:
    return batch_global_rotations_and_positions(skel, theta, root_orient, root_trans)[1]


def forward_kinematics(skel: Skeleton, theta, root_orient, root_trans) -> np.ndarray:
    """ Single-frame FK; returns world joint positions (J, 3) """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (skel.n_joints, 3):
        raise InvalidArgumentError(
            f"theta must be ({skel.n_joints}, 3), got {theta.shape}"
        )
    positions = batch_forward_kinematics(
        skel,
        torch.as_tensor(theta[None]),
        torch.as_tensor(np.asarray(root_orient, dtype=np.float64).reshape(1, 3)),
        torch.as_tensor(np.asarray(root_trans, dtype=np.float64).reshape(1, 3)),
    )
    return positions[0].numpy()
