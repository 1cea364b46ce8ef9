"""Kinematic model of a four-finger, 16-joint hand on a free-floating palm.

Conventions:
  finger order : (index, middle, ring, thumb) everywhere, including the
                 contact vector and demo files
  palm frame   : x towards the index/middle/ring side, z out of the back of
                 the palm; fingers curl towards -z, so a palm with identity
                 orientation grasps downwards (top grasp)
  joints       : per finger, joint 0 is abduction about the mount z axis,
                 joints 1-3 are flexion about the local y axis; positive
                 flexion curls the fingertip towards -z
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .rotations import quat_normalize, quat_to_matrix

FINGER_NAMES = ("index", "middle", "ring", "thumb")
N_FINGERS = 4
N_JOINTS_PER_FINGER = 4
N_JOINTS = N_FINGERS * N_JOINTS_PER_FINGER

HAND_CONFIG_VERSION = 1

# Type aliases for readability; shapes are part of the contract.
JointVector = np.ndarray  # (16,) rad, finger-major: q[4*f + j]
FingertipSet = np.ndarray  # (4, 3) m, robot base frame, finger order as above


@dataclass
class Pose:
    """Rigid transform: position (m) plus unit quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.orientation = np.asarray(self.orientation, dtype=float)
        if self.position.shape != (3,):
            raise ValueError(f"position must be a 3-vector, got {self.position.shape}")
        if self.orientation.shape != (4,):
            raise ValueError(f"orientation must be a quaternion, got {self.orientation.shape}")
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
            raise ValueError("orientation quaternion is not normalized")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to one point (3,) or a stack (..., 3)."""
        return points @ self.matrix().T + self.position

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (points - self.position) @ self.matrix()

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())


@dataclass
class HandModel:
    """Geometry of the hand: mounts, joint axes/offsets/limits, tip offsets.

    Array layouts: finger-major, (4, 4, ...) = (finger, joint, ...).
    """

    mount_pos: np.ndarray  # (4, 3) palm frame
    mount_quat: np.ndarray  # (4, 4) palm frame
    joint_offsets: np.ndarray  # (4, 4, 3) parent-frame translation before each joint
    joint_axes: np.ndarray  # (4, 4, 3) unit rotation axes, local frame
    joint_limits: np.ndarray  # (4, 4, 2) [lo, hi] rad
    tip_offsets: np.ndarray  # (4, 3) last joint frame -> fingertip center
    fingertip_radius: float
    _mount_rot: np.ndarray = field(init=False, repr=False)
    _axis_cross: np.ndarray = field(init=False, repr=False)
    _axis_cross_sq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("mount_pos", "mount_quat", "joint_offsets", "joint_axes",
                     "joint_limits", "tip_offsets"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.joint_limits.shape != (N_FINGERS, N_JOINTS_PER_FINGER, 2):
            raise ValueError("expected limits for exactly 16 joints")
        if np.any(self.joint_limits[..., 0] >= self.joint_limits[..., 1]):
            raise ValueError("every joint limit must satisfy lo < hi")
        norms = np.linalg.norm(self.joint_axes, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("all joint axes must be unit vectors")
        if self.fingertip_radius <= 0.0:
            raise ValueError("fingertip_radius must be positive")
        self._mount_rot = np.stack([quat_to_matrix(q) for q in self.mount_quat])
        # Precomputed cross-product generators so per-joint rotations reduce to
        # R = I + sin(q) K + (1 - cos(q)) K^2.
        ax = self.joint_axes
        k = np.zeros((N_FINGERS, N_JOINTS_PER_FINGER, 3, 3))
        k[..., 0, 1] = -ax[..., 2]
        k[..., 0, 2] = ax[..., 1]
        k[..., 1, 0] = ax[..., 2]
        k[..., 1, 2] = -ax[..., 0]
        k[..., 2, 0] = -ax[..., 1]
        k[..., 2, 1] = ax[..., 0]
        self._axis_cross = k
        self._axis_cross_sq = k @ k

    @property
    def limits_flat(self) -> np.ndarray:
        return self.joint_limits.reshape(N_JOINTS, 2)

    def chain_length(self, finger: int) -> float:
        """Total kinematic length from mount to fingertip center."""
        return float(np.linalg.norm(self.joint_offsets[finger], axis=-1).sum()
                     + np.linalg.norm(self.tip_offsets[finger]))

    def chain_lengths(self) -> np.ndarray:
        return np.array([self.chain_length(f) for f in range(N_FINGERS)])


@dataclass
class HandState:
    """Instantaneous hand configuration."""

    palm: Pose
    q: JointVector  # (16,) rad
    qdot: np.ndarray  # (16,) rad/s
    contacts: np.ndarray  # (4,) bool

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        self.contacts = np.asarray(self.contacts, dtype=bool)
        if self.contacts.shape != (N_FINGERS,):
            raise ValueError("contacts must have exactly 4 entries")

    def copy(self) -> "HandState":
        return HandState(self.palm.copy(), self.q.copy(), self.qdot.copy(),
                         self.contacts.copy())


def clamp_joints(model: HandModel, q: np.ndarray) -> JointVector:
    """Clip a 16-vector to the joint limit box. Idempotent."""
    q = np.asarray(q, dtype=float)
    lim = model.limits_flat
    return np.clip(q, lim[:, 0], lim[:, 1])


def forward_kinematics(model: HandModel, palm: Pose, q: JointVector) -> FingertipSet:
    """Fingertip centers in the robot base frame, all four fingers batched."""
    if abs(np.linalg.norm(palm.orientation) - 1.0) > 1e-9:
        raise ValueError("palm quaternion is not normalized")
    q = np.asarray(q, dtype=float).reshape(N_FINGERS, N_JOINTS_PER_FINGER)
    palm_rot = quat_to_matrix(palm.orientation)
    return batched_tips(model, palm_rot, palm.position, q)


def batched_tips(model: HandModel, palm_rot: np.ndarray, palm_pos: np.ndarray,
                 q: np.ndarray) -> FingertipSet:
    """FK inner loop: palm rotation precomputed, q of shape (4, 4)."""
    rot = palm_rot @ model._mount_rot  # (4, 3, 3)
    pos = palm_pos + model.mount_pos @ palm_rot.T  # (4, 3)
    s = np.sin(q)
    c = 1.0 - np.cos(q)
    for j in range(N_JOINTS_PER_FINGER):
        pos = pos + np.einsum("fij,fj->fi", rot, model.joint_offsets[:, j])
        joint_rot = (_EYE3 + s[:, j, None, None] * model._axis_cross[:, j]
                     + c[:, j, None, None] * model._axis_cross_sq[:, j])
        rot = rot @ joint_rot
    return pos + np.einsum("fij,fj->fi", rot, model.tip_offsets)


_EYE3 = np.eye(3)


def finger_tip(model: HandModel, palm_rot: np.ndarray, palm_pos: np.ndarray,
               finger: int, q_finger: np.ndarray) -> np.ndarray:
    """Single-finger tip position; palm rotation passed in to avoid rework."""
    rot = palm_rot @ model._mount_rot[finger]
    pos = palm_pos + palm_rot @ model.mount_pos[finger]
    cross = model._axis_cross[finger]
    cross_sq = model._axis_cross_sq[finger]
    offsets = model.joint_offsets[finger]
    for j in range(N_JOINTS_PER_FINGER):
        pos = pos + rot @ offsets[j]
        qj = float(q_finger[j])
        joint_rot = _EYE3 + math.sin(qj) * cross[j] + (1.0 - math.cos(qj)) * cross_sq[j]
        rot = rot @ joint_rot
    return pos + rot @ model.tip_offsets[finger]


# ---------------------------------------------------------------------------
# Model config IO
# ---------------------------------------------------------------------------

def load_hand_model(path: str | Path) -> HandModel:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return hand_model_from_dict(raw)


def hand_model_from_dict(raw: dict) -> HandModel:
    version = raw.get("format_version")
    if version != HAND_CONFIG_VERSION:
        raise ValueError(f"unsupported hand config format_version: {version!r}")
    fingers = raw["fingers"]
    if [f["name"] for f in fingers] != list(FINGER_NAMES):
        raise ValueError(f"fingers must be listed in order {FINGER_NAMES}")
    mount_pos, mount_quat = [], []
    offsets, axes, limits, tips = [], [], [], []
    for f in fingers:
        mount_pos.append(f["mount_position"])
        mount_quat.append(quat_normalize(np.asarray(f["mount_orientation"], dtype=float)))
        joints = f["joints"]
        if len(joints) != N_JOINTS_PER_FINGER:
            raise ValueError("each finger must have exactly 4 joints")
        offsets.append([j["offset"] for j in joints])
        axes.append([j["axis"] for j in joints])
        limits.append([j["limits"] for j in joints])
        tips.append(f["tip_offset"])
    return HandModel(
        mount_pos=np.array(mount_pos),
        mount_quat=np.array(mount_quat),
        joint_offsets=np.array(offsets),
        joint_axes=np.array(axes),
        joint_limits=np.array(limits),
        tip_offsets=np.array(tips),
        fingertip_radius=float(raw["fingertip_radius"]),
    )


def default_hand_model() -> HandModel:
    with resources.files("grasplab.data").joinpath("hand_default.yaml").open() as fh:
        return hand_model_from_dict(yaml.safe_load(fh))


def default_hand_config() -> dict:
    """Raw dict of the shipped hand config (tests read reference values from it)."""
    with resources.files("grasplab.data").joinpath("hand_default.yaml").open() as fh:
        return yaml.safe_load(fh)
