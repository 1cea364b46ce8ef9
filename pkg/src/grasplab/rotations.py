"""Quaternion and rotation helpers shared by the kinematics and simulator code.

Conventions:
  quaternion  : (w, x, y, z), unit norm
  axis-angle  : 3-vector, direction = axis, norm = angle in rad
  all frames  : right-handed, z up in the robot base frame
"""

from __future__ import annotations

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion q. v may be (3,) or (..., 3)."""
    return v @ quat_to_matrix(q).T


def quat_from_axis_angle(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return QUAT_IDENTITY.copy()
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def axis_angle_from_quat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    if q[0] < 0.0:  # keep angle in [0, pi]
        q = -q
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s * angle


def quat_angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle of the relative rotation between two unit quaternions."""
    dot = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(min(1.0, dot))


def quat_step_towards(q_from: np.ndarray, q_to: np.ndarray, max_angle: float) -> np.ndarray:
    """Move q_from towards q_to along the geodesic, by at most max_angle rad."""
    if float(np.dot(q_from, q_to)) < 0.0:
        q_to = -q_to
    total = quat_angle_between(q_from, q_to)
    if total <= max_angle or total < 1e-12:
        return quat_normalize(q_to.copy())
    rel = quat_multiply(quat_conjugate(q_from), q_to)
    aa = axis_angle_from_quat(rel)
    step = aa / total * max_angle
    return quat_normalize(quat_multiply(q_from, quat_from_axis_angle(step)))


def rodrigues_batch(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotation matrices about unit axes (..., 3) by angles (...,). Returns (..., 3, 3)."""
    axes = np.asarray(axes, dtype=float)
    angles = np.asarray(angles, dtype=float)
    kx, ky, kz = axes[..., 0], axes[..., 1], axes[..., 2]
    zero = np.zeros_like(kx)
    k = np.stack([
        np.stack([zero, -kz, ky], axis=-1),
        np.stack([kz, zero, -kx], axis=-1),
        np.stack([-ky, kx, zero], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    s = np.sin(angles)[..., None, None]
    c = (1.0 - np.cos(angles))[..., None, None]
    return eye + s * k + c * (k @ k)


def clip_norm(v: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.linalg.norm(v)
    if n <= max_norm or n == 0.0:
        return v
    return v * (max_norm / n)
