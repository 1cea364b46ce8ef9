"""Quasi-static grasping environment.

Mechanics: palm and joints track action targets under per-step rate limits;
fingertips are stopped at the object surface (motion truncated at first
contact); the object is frozen during the reach phase and translates rigidly
with the palm during the lift phase while the grasp-retention rule holds.
The vertical axis is z; "height" always means the z coordinate in the robot
base frame. There is no gravity integration and no table collision for the
fingers; the object rests at its support height until the hand holds it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sdf
from .hand import (
    HandModel,
    HandState,
    N_FINGERS,
    Pose,
    batched_tips,
    clamp_joints,
    finger_tip,
    forward_kinematics,
)
from .rotations import (
    clip_norm,
    quat_from_axis_angle,
    quat_step_towards,
    quat_to_matrix,
)

OBJECT_KINDS = ("cuboid", "cylinder", "cone", "sphere")

PHASE_REACH = "reach_grasp"
PHASE_LIFT = "lift"

ACTION_DIM = 22

# Bounding-box corner ordering: bottom face counterclockwise (viewed from +z)
# starting at (-x, -y), then the top face in the same order.
CORNER_SIGNS = np.array([
    [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
    [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
], dtype=float)

Keypoints = np.ndarray  # (8, 3) m, robot base frame, CORNER_SIGNS order


@dataclass
class ObjectSpec:
    """Object primitive with physical parameters and a world pose.

    dims by kind: cuboid (dx, dy, dz); cylinder (radius, height);
    cone (radius, height), base down, apex up; sphere (radius,).
    """

    kind: str
    dims: np.ndarray
    mass: float
    friction: float
    pose: Pose

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")
        self.dims = np.atleast_1d(np.asarray(self.dims, dtype=float))
        expected = {"cuboid": 3, "cylinder": 2, "cone": 2, "sphere": 1}[self.kind]
        if self.dims.shape != (expected,):
            raise ValueError(f"{self.kind} expects {expected} dims, got {self.dims.shape}")
        if np.any(self.dims <= 0.0):
            raise ValueError("dims must be positive")
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if self.friction < 0.0:
            raise ValueError("friction must be non-negative")

    @property
    def half_extents(self) -> np.ndarray:
        """Bounding-box half extents in the object frame."""
        if self.kind == "cuboid":
            return self.dims / 2.0
        if self.kind == "cylinder" or self.kind == "cone":
            r, h = self.dims
            return np.array([r, r, h / 2.0])
        r = self.dims[0]
        return np.array([r, r, r])

    @property
    def rest_height(self) -> float:
        """Center height when the object rests on the table plane z=0."""
        return float(self.half_extents[2])

    def at_pose(self, pose: Pose) -> "ObjectSpec":
        return ObjectSpec(self.kind, self.dims.copy(), self.mass, self.friction, pose)


def object_sdf(spec: ObjectSpec, point_world: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed distance and outward world-frame normal at the closest point."""
    p = spec.pose.inverse_transform(point_world)
    if spec.kind == "cuboid":
        d, n = sdf.sdf_cuboid(p, spec.dims / 2.0)
    elif spec.kind == "cylinder":
        d, n = sdf.sdf_cylinder(p, spec.dims[0], spec.dims[1] / 2.0)
    elif spec.kind == "cone":
        d, n = sdf.sdf_cone(p, spec.dims[0], spec.dims[1] / 2.0)
    else:
        d, n = sdf.sdf_sphere(p, spec.dims[0])
    return d, quat_to_matrix(spec.pose.orientation) @ n


def compute_keypoints(spec: ObjectSpec) -> Keypoints:
    """The 8 bounding-box corners in the robot base frame, canonical order."""
    corners_obj = CORNER_SIGNS * spec.half_extents
    return spec.pose.transform(corners_obj)


def kappa_offset(keypoints: Keypoints) -> np.ndarray:
    """Mean of the four top-face corners; the palm approach target."""
    return np.asarray(keypoints)[4:8].mean(axis=0)


def add_keypoint_noise(keypoints: Keypoints, sigma: float, rng: np.random.Generator) -> Keypoints:
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return np.array(keypoints, dtype=float)
    return keypoints + rng.normal(0.0, sigma, size=(8, 3))


def context_from_keypoints(keypoints: Keypoints) -> np.ndarray:
    """Flatten to the 24-d context vector (corner-major, xyz per corner)."""
    return np.asarray(keypoints, dtype=float).reshape(24).copy()


def keypoints_from_context(context: np.ndarray) -> Keypoints:
    return np.asarray(context, dtype=float).reshape(8, 3).copy()


@dataclass
class Action:
    """Absolute tracking targets: 6-d palm pose + 16 joint positions."""

    palm_target: np.ndarray  # (6,) position (m) + axis-angle rotation (rad)
    joint_targets: np.ndarray  # (16,) rad

    def __post_init__(self):
        self.palm_target = np.asarray(self.palm_target, dtype=float)
        self.joint_targets = np.asarray(self.joint_targets, dtype=float)
        if self.palm_target.shape != (6,) or self.joint_targets.shape != (16,):
            raise ValueError("action must have 6 palm + 16 joint entries")

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "Action":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (ACTION_DIM,):
            raise ValueError(f"action vector must have {ACTION_DIM} entries, got {vec.shape}")
        return cls(vec[:6], vec[6:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.palm_target, self.joint_targets])


@dataclass
class SimParams:
    """Per-episode simulator parameters (gains/damping are randomized copies)."""

    dt: float = 0.05
    max_palm_step: float = 0.012  # m per step
    max_palm_rot_step: float = 0.05  # rad per step
    max_joint_step: float = 0.08  # rad per step
    pd_gain_scale: float = 1.0
    joint_damping: float = 0.1
    episode_length: int = 140
    reach_steps: int = 100
    lift_height: float = 0.07  # m above the start height for success
    hold_steps: int = 20
    closing_steps: int = 60  # maps episode progress to demo phase
    contact_tol: float = 1e-3  # contact band around the surface
    penetration_tol: float = 1e-4
    opposition_angle_deg: float = 45.0
    lift_ramp_steps: int = 15
    lift_margin: float = 0.025  # raised past lift_height so the hold test can run

    def __post_init__(self):
        positive = ("dt", "max_palm_step", "max_palm_rot_step", "max_joint_step",
                    "pd_gain_scale", "episode_length", "lift_height", "hold_steps",
                    "closing_steps", "lift_ramp_steps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.joint_damping < 0.0:
            raise ValueError("joint_damping must be non-negative")
        if self.hold_steps < 1:
            raise ValueError("hold_steps must be at least 1")
        if not 0 < self.reach_steps < self.episode_length:
            raise ValueError("reach_steps must lie inside the episode")

    @property
    def lift_steps(self) -> int:
        return self.episode_length - self.reach_steps


@dataclass
class WorldState:
    hand: HandState
    object_pose: Pose
    object_start_height: float
    phase: str
    step_index: int
    held: bool
    lift_anchor: Pose | None = None  # palm pose frozen at the reach->lift switch
    hold_count: int = 0  # consecutive steps held above the lift threshold
    best_hold_count: int = 0
    max_object_height: float = field(default=-math.inf)

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")
        if self.max_object_height == -math.inf:
            self.max_object_height = float(self.object_pose.position[2])

    def copy(self) -> "WorldState":
        return WorldState(
            hand=self.hand.copy(),
            object_pose=self.object_pose.copy(),
            object_start_height=self.object_start_height,
            phase=self.phase,
            step_index=self.step_index,
            held=self.held,
            lift_anchor=None if self.lift_anchor is None else self.lift_anchor.copy(),
            hold_count=self.hold_count,
            best_hold_count=self.best_hold_count,
            max_object_height=self.max_object_height,
        )


def initial_world_state(model: HandModel, spec: ObjectSpec, palm: Pose,
                        q: np.ndarray) -> WorldState:
    q = clamp_joints(model, q)
    hand = HandState(palm=palm.copy(), q=q, qdot=np.zeros(16), contacts=np.zeros(4, dtype=bool))
    contacts, _, _ = detect_contacts(model, hand, spec)
    hand.contacts = contacts
    return WorldState(
        hand=hand,
        object_pose=spec.pose.copy(),
        object_start_height=float(spec.pose.position[2]),
        phase=PHASE_REACH,
        step_index=0,
        held=False,
    )


def detect_contacts(model: HandModel, hand: HandState, spec: ObjectSpec,
                    contact_tol: float = 1e-3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-fingertip contact booleans, outward normals, and surface distances."""
    tips = forward_kinematics(model, hand.palm, hand.q)
    return _contacts_at_tips(tips, spec, model.fingertip_radius, contact_tol)


def _contacts_at_tips(tips: np.ndarray, spec: ObjectSpec, radius: float,
                      contact_tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    contacts = np.zeros(N_FINGERS, dtype=bool)
    normals = np.zeros((N_FINGERS, 3))
    dists = np.zeros(N_FINGERS)
    for f in range(N_FINGERS):
        d, n = object_sdf(spec, tips[f])
        dists[f] = d - radius
        normals[f] = n
        contacts[f] = dists[f] <= contact_tol
    return contacts, normals, dists


def update_held(state: WorldState, contacts: np.ndarray, normals: np.ndarray,
                opposition_angle_deg: float = 45.0) -> bool:
    """Grasp-retention rule: an opposing contact pair, or three contacts."""
    idx = np.flatnonzero(contacts)
    if idx.size >= 3:
        return True
    if idx.size == 2:
        threshold = -math.cos(math.radians(opposition_angle_deg))
        return float(np.dot(normals[idx[0]], normals[idx[1]])) <= threshold
    return False


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

_FLEX_RETRACT = np.array([0.0, 1.0, 1.0, 1.0])  # retraction acts on flexion joints


def step(state: WorldState, action: Action, params: SimParams, model: HandModel,
         spec: ObjectSpec) -> WorldState:
    """Advance the world by one control step. Deterministic."""
    radius = model.fingertip_radius
    in_lift = state.step_index >= params.reach_steps
    palm = state.hand.palm

    if in_lift:
        anchor = state.lift_anchor if state.lift_anchor is not None else palm.copy()
        steps_into_lift = state.step_index - params.reach_steps
        ramp = min(1.0, (steps_into_lift + 1) / params.lift_ramp_steps)
        target_pos = anchor.position + np.array(
            [0.0, 0.0, (params.lift_height + params.lift_margin) * ramp])
        target_quat = anchor.orientation
    else:
        anchor = None
        target_pos = action.palm_target[:3]
        target_quat = quat_from_axis_angle(action.palm_target[3:6])

    new_pos = palm.position + clip_norm(target_pos - palm.position, params.max_palm_step)
    new_quat = quat_step_towards(palm.orientation, target_quat, params.max_palm_rot_step)
    palm_delta = new_pos - palm.position

    # Held objects ride with the palm during the lift phase, so relative
    # geometry is preserved and the grasp persists unless the fingers move.
    obj_pos = state.object_pose.position.copy()
    if in_lift and state.held:
        obj_pos = obj_pos + palm_delta
    new_obj_pose = Pose(obj_pos, state.object_pose.orientation.copy())
    shape = _LocalShape.from_spec(spec.at_pose(new_obj_pose))

    # Palm motion may press resting fingertips into the object. Resolve by
    # retracting flexion; if some finger cannot escape, block the palm instead.
    q = state.hand.q.copy().reshape(N_FINGERS, 4)
    lim = model.joint_limits
    palm_rot = quat_to_matrix(new_quat)
    gaps = shape.gaps(batched_tips(model, palm_rot, new_pos, q), radius)
    retracted = q.copy()
    resolvable = True
    for f in range(N_FINGERS):
        if gaps[f] >= -params.penetration_tol:
            continue
        qf = _resolve_penetration(model, palm_rot, new_pos, f, q[f], lim[f],
                                  shape, radius)
        if qf is None:
            resolvable = False
            break
        retracted[f] = qf
    if resolvable:
        q = retracted
        new_palm = Pose(new_pos, new_quat)
    else:
        new_palm = palm.copy()
        palm_rot = quat_to_matrix(new_palm.orientation)
        new_obj_pose = state.object_pose.copy()
        shape = _LocalShape.from_spec(spec.at_pose(new_obj_pose))

    # Joint tracking towards clamped targets, truncated at first contact.
    targets = clamp_joints(model, action.joint_targets).reshape(N_FINGERS, 4)
    delta = np.clip(targets - q, -params.max_joint_step, params.max_joint_step)
    delta *= params.pd_gain_scale / (1.0 + params.joint_damping)
    q_new = q + delta
    tips = batched_tips(model, palm_rot, new_palm.position, q_new)
    full_gaps = shape.gaps(tips, radius)
    for f in range(N_FINGERS):
        if full_gaps[f] >= 0.0 or not np.any(delta[f]):
            continue
        q_new[f], tips[f] = _truncated_motion(model, palm_rot, new_palm.position, f,
                                              q[f], delta[f], shape, radius)

    q_new_flat = clamp_joints(model, q_new.reshape(16))
    qdot = (q_new_flat - state.hand.q) / params.dt

    contacts, normals = shape.contacts(tips, radius, params.contact_tol)
    held = update_held(state, contacts, normals, params.opposition_angle_deg)

    new_index = state.step_index + 1
    obj_height = float(new_obj_pose.position[2])
    lifted_now = held and obj_height > state.object_start_height + params.lift_height
    hold_count = state.hold_count + 1 if lifted_now else 0
    anchor_out = anchor if in_lift else state.lift_anchor

    return WorldState(
        hand=HandState(new_palm, q_new_flat, qdot, contacts),
        object_pose=new_obj_pose,
        object_start_height=state.object_start_height,
        phase=PHASE_LIFT if new_index >= params.reach_steps else PHASE_REACH,
        step_index=new_index,
        held=held,
        lift_anchor=anchor_out,
        hold_count=hold_count,
        best_hold_count=max(state.best_hold_count, hold_count),
        max_object_height=max(state.max_object_height, obj_height),
    )


def episode_success(state: WorldState, params: SimParams) -> bool:
    """Held above start + lift_height for hold_steps consecutive steps."""
    return state.best_hold_count >= params.hold_steps


class _LocalShape:
    """Per-step object snapshot; distance queries run on scalar math because
    they sit on the innermost contact-resolution loop."""

    __slots__ = ("kind", "dims", "rot", "pos", "_r", "_t", "_h")

    def __init__(self, kind, dims, rot, pos):
        self.kind = kind
        self.dims = dims
        self.rot = rot
        self.pos = pos
        self._r = tuple(float(v) for v in rot.reshape(9))
        self._t = (float(pos[0]), float(pos[1]), float(pos[2]))
        if kind == "cuboid":
            self._h = (dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0)
        elif kind == "sphere":
            self._h = (float(dims[0]),)
        else:
            self._h = (float(dims[0]), float(dims[1]) / 2.0)

    @classmethod
    def from_spec(cls, spec: ObjectSpec) -> "_LocalShape":
        return cls(spec.kind, spec.dims, quat_to_matrix(spec.pose.orientation),
                   spec.pose.position)

    def _local(self, point) -> tuple[float, float, float]:
        x = float(point[0]) - self._t[0]
        y = float(point[1]) - self._t[1]
        z = float(point[2]) - self._t[2]
        r = self._r
        return (r[0] * x + r[3] * y + r[6] * z,
                r[1] * x + r[4] * y + r[7] * z,
                r[2] * x + r[5] * y + r[8] * z)

    def distance(self, point) -> float:
        px, py, pz = self._local(point)
        h = self._h
        if self.kind == "cuboid":
            qx = abs(px) - h[0]
            qy = abs(py) - h[1]
            qz = abs(pz) - h[2]
            if qx > 0.0 or qy > 0.0 or qz > 0.0:
                ox = qx if qx > 0.0 else 0.0
                oy = qy if qy > 0.0 else 0.0
                oz = qz if qz > 0.0 else 0.0
                return math.sqrt(ox * ox + oy * oy + oz * oz)
            return max(qx, qy, qz)
        if self.kind == "sphere":
            return math.sqrt(px * px + py * py + pz * pz) - h[0]
        rho = math.hypot(px, py)
        if self.kind == "cylinder":
            dr = rho - h[0]
            dz = abs(pz) - h[1]
            if dr > 0.0 and dz > 0.0:
                return math.hypot(dr, dz)
            return dr if dr > dz else dz
        return _cone_distance_2d(rho, pz, h[0], h[1])

    def gaps(self, tips: np.ndarray, radius: float) -> np.ndarray:
        return np.array([self.distance(tips[f]) for f in range(N_FINGERS)]) - radius

    def contacts(self, tips: np.ndarray, radius: float,
                 contact_tol: float) -> tuple[np.ndarray, np.ndarray]:
        contacts = np.zeros(N_FINGERS, dtype=bool)
        normals = np.zeros((N_FINGERS, 3))
        for f in range(N_FINGERS):
            p = self.rot.T @ (tips[f] - self.pos)
            if self.kind == "cuboid":
                d, n = sdf.sdf_cuboid(p, self.dims / 2.0)
            elif self.kind == "cylinder":
                d, n = sdf.sdf_cylinder(p, self.dims[0], self.dims[1] / 2.0)
            elif self.kind == "cone":
                d, n = sdf.sdf_cone(p, self.dims[0], self.dims[1] / 2.0)
            else:
                d, n = sdf.sdf_sphere(p, self.dims[0])
            contacts[f] = d - radius <= contact_tol
            normals[f] = self.rot @ n
        return contacts, normals


def _cone_distance_2d(rho: float, z: float, radius: float, half_height: float) -> float:
    """Scalar twin of sdf.sdf_cone's distance; same segment construction."""
    # base segment (0,-h)..(r,-h)
    t = rho / radius
    t = 1.0 if t > 1.0 else (0.0 if t < 0.0 else t)
    bx, bz = rho - t * radius, z + half_height
    d_base = math.hypot(bx, bz)
    # slant segment (r,-h)..(0,+h)
    sx, sz = -radius, 2.0 * half_height
    ss = sx * sx + sz * sz
    t = ((rho - radius) * sx + (z + half_height) * sz) / ss
    t = 1.0 if t > 1.0 else (0.0 if t < 0.0 else t)
    cx, cz = radius + t * sx, -half_height + t * sz
    d_slant = math.hypot(rho - cx, z - cz)
    d = d_base if d_base < d_slant else d_slant
    inside = (-half_height <= z <= half_height
              and rho <= radius * (half_height - z) / (2.0 * half_height))
    return -d if inside else d


def _resolve_penetration(model, palm_rot, palm_pos, finger, qf, lim,
                         shape: _LocalShape, radius):
    """Open the finger until its tip clears the surface; None if impossible."""
    def gap(q_test):
        return shape.distance(finger_tip(model, palm_rot, palm_pos, finger, q_test)) - radius

    beta_max = float(np.min((qf - lim[:, 0])[1:]))  # flexion room down to the limits
    if beta_max <= 0.0:
        return None
    if gap(qf - beta_max * _FLEX_RETRACT) < 0.0:
        return None
    lo, hi = 0.0, beta_max
    for _ in range(24):
        mid = 0.5 * (lo + hi)
        if gap(qf - mid * _FLEX_RETRACT) >= 0.0:
            hi = mid
        else:
            lo = mid
    return qf - hi * _FLEX_RETRACT


def _truncated_motion(model, palm_rot, palm_pos, finger, qf, delta,
                      shape: _LocalShape, radius):
    """Largest feasible fraction of the joint delta that avoids penetration.

    The returned configuration is always on the feasible side of the bisection
    bracket, so penetration never exceeds the starting configuration's.
    """
    lo, hi = 0.0, 1.0
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        tip = finger_tip(model, palm_rot, palm_pos, finger, qf + mid * delta)
        if shape.distance(tip) - radius >= 0.0:
            lo = mid
        else:
            hi = mid
    q_out = qf + lo * delta
    return q_out, finger_tip(model, palm_rot, palm_pos, finger, q_out)
