"""Signed distances and outward surface normals for the object primitives.

All primitive functions work in the object frame with the shape centered at
the origin; cylinder and cone axes are local z, the cone apex at +h/2 and its
base (radius r) at -h/2. Distances are negative inside. Normals are the
outward surface normal at the closest surface point; on the (measure-zero)
medial axis a fixed fallback direction is returned.
"""

from __future__ import annotations

import numpy as np

_AXIS_FALLBACK = np.array([1.0, 0.0, 0.0])


def sdf_sphere(p: np.ndarray, radius: float) -> tuple[float, np.ndarray]:
    r = np.linalg.norm(p)
    if r < 1e-12:
        return -radius, _AXIS_FALLBACK.copy()
    return r - radius, p / r


def sdf_cuboid(p: np.ndarray, half_extents: np.ndarray) -> tuple[float, np.ndarray]:
    q = np.abs(p) - half_extents
    if np.any(q > 0.0):
        closest = np.clip(p, -half_extents, half_extents)
        delta = p - closest
        d = np.linalg.norm(delta)
        return d, delta / d
    k = int(np.argmax(q))  # nearest face
    n = np.zeros(3)
    n[k] = 1.0 if p[k] >= 0.0 else -1.0
    return float(q[k]), n


def sdf_cylinder(p: np.ndarray, radius: float, half_height: float) -> tuple[float, np.ndarray]:
    rho = np.hypot(p[0], p[1])
    radial_dir = np.array([p[0] / rho, p[1] / rho, 0.0]) if rho > 1e-12 else _AXIS_FALLBACK
    dr = rho - radius
    dz = abs(p[2]) - half_height
    zsign = 1.0 if p[2] >= 0.0 else -1.0
    if dr > 0.0 and dz > 0.0:  # outside the rim
        d = np.hypot(dr, dz)
        n = radial_dir * dr + np.array([0.0, 0.0, zsign * dz])
        return d, n / d
    if dr > dz:  # lateral surface closest (covers inside too)
        return dr, radial_dir.copy() if rho > 1e-12 else radial_dir
    return dz, np.array([0.0, 0.0, zsign])


def sdf_cone(p: np.ndarray, radius: float, half_height: float) -> tuple[float, np.ndarray]:
    """Cone with base radius at z=-h/2 and apex at z=+h/2."""
    rho = np.hypot(p[0], p[1])
    radial_dir = np.array([p[0] / rho, p[1] / rho, 0.0]) if rho > 1e-12 else _AXIS_FALLBACK
    q = np.array([rho, p[2]])
    base = np.array([radius, -half_height])
    apex = np.array([0.0, half_height])

    d_base, c_base = _segment_distance(q, np.array([0.0, -half_height]), base)
    d_slant, c_slant = _segment_distance(q, base, apex)

    inside = (-half_height <= p[2] <= half_height
              and rho <= radius * (half_height - p[2]) / (2.0 * half_height))
    if inside:
        # Nearest boundary feature decides the outward normal.
        if d_base <= d_slant:
            return -d_base, np.array([0.0, 0.0, -1.0])
        slant_n = np.array([2.0 * half_height, radius])
        slant_n /= np.linalg.norm(slant_n)
        n = radial_dir * slant_n[0]
        n[2] = slant_n[1]
        return -d_slant, n
    if d_base <= d_slant:
        d, c = d_base, c_base
    else:
        d, c = d_slant, c_slant
    delta = q - c
    if d < 1e-12:
        return 0.0, np.array([0.0, 0.0, -1.0]) if d_base <= d_slant else radial_dir
    n = radial_dir * delta[0]
    n[2] = delta[1]
    return d, n / d


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    ab = b - a
    t = float(np.dot(p - a, ab) / np.dot(ab, ab))
    t = min(1.0, max(0.0, t))
    c = a + t * ab
    return float(np.linalg.norm(p - c)), c
