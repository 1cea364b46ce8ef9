"""Demonstration trajectories, grasp styles, re-scaling, and synthesis.

A demonstration is a sequence of target fingertip positions in the *palm
frame*, indexed by a phase in [0, 1]. Styles restrict which fingers take part
in the grasp; inactive fingers hold a retracted pose above the palm plane so
they stay clear of the object. Demos recorded on other hands are re-scaled
radially by per-finger kinematic chain length ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .hand import FINGER_NAMES, HandModel, N_FINGERS, Pose, forward_kinematics

DEMO_FORMAT_VERSION = 1
STYLE_FORMAT_VERSION = 1

THUMB = 3  # index into FINGER_NAMES

# Joint keyframes for synthesized demos, per finger (abduction, 3 flexions).
_OPEN_POSE = np.array([0.0, 0.15, 0.15, 0.10])
_PRE_POSE = np.array([0.0, 0.85, 0.50, 0.35])
_CLOSED_POSE = np.array([0.0, 1.50, 0.90, 0.60])
_RETRACTED_POSE = np.array([0.0, -0.28, -0.25, -0.25])
_KEYFRAME_PHASES = (0.0, 0.45, 1.0)


class DemoGenerationError(RuntimeError):
    """A synthesized target is outside the hand's reachable workspace."""


@dataclass(frozen=True)
class StyleSpec:
    """A finger-subset constraint on the grasp."""

    id: str
    active_fingers: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        active = tuple(bool(a) for a in self.active_fingers)
        object.__setattr__(self, "active_fingers", active)
        if not active[THUMB] or sum(active) < 2:
            raise ValueError("a style needs the thumb plus at least one other finger")

    @property
    def n_active(self) -> int:
        return sum(self.active_fingers)


@dataclass
class DemoTrajectory:
    """Time-indexed target fingertip positions in the palm frame."""

    frames: np.ndarray  # (T, 4, 3) m
    phase: np.ndarray  # (T,) strictly increasing, 0 to 1
    style: StyleSpec
    source_scale: np.ndarray  # (4,) source-hand chain lengths, m

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        self.source_scale = np.asarray(self.source_scale, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_FINGERS, 3):
            raise ValueError("frames must have shape (T, 4, 3)")
        if self.frames.shape[0] < 2:
            raise ValueError("a demo needs at least 2 frames")
        if self.phase.shape != (self.frames.shape[0],):
            raise ValueError("phase must have one entry per frame")
        if self.phase[0] != 0.0 or self.phase[-1] != 1.0 or np.any(np.diff(self.phase) <= 0):
            raise ValueError("phase must increase strictly from 0 to 1")
        if np.any(self.source_scale <= 0.0):
            raise ValueError("source_scale entries must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def retarget_demo(demo: DemoTrajectory, model: HandModel) -> DemoTrajectory:
    """Re-scale fingertip positions radially by chain length ratios."""
    ratios = model.chain_lengths() / demo.source_scale
    frames = demo.frames * ratios[None, :, None]
    return DemoTrajectory(frames, demo.phase.copy(), demo.style, model.chain_lengths())


def demo_target(demo: DemoTrajectory, phase: float) -> np.ndarray:
    """Linearly interpolated fingertip targets (4, 3) at the given phase."""
    if not 0.0 <= phase <= 1.0:
        raise ValueError(f"phase must lie in [0, 1], got {phase}")
    if phase == 0.0:
        return demo.frames[0].copy()
    if phase == 1.0:
        return demo.frames[-1].copy()
    hi = int(np.searchsorted(demo.phase, phase, side="right"))
    hi = min(hi, demo.n_frames - 1)
    lo = hi - 1
    t = (phase - demo.phase[lo]) / (demo.phase[hi] - demo.phase[lo])
    return (1.0 - t) * demo.frames[lo] + t * demo.frames[hi]


def synthesize_demo(style: StyleSpec, model: HandModel, n_frames: int = 50) -> DemoTrajectory:
    """Procedural open-to-closed demo for the style, in the palm frame.

    Active fingers sweep open -> pre-grasp -> closed through joint-space
    keyframes with cosine easing; inactive fingers hold a retracted pose.
    Deterministic given (style, model).
    """
    phases = np.linspace(0.0, 1.0, n_frames)
    q_frames = np.zeros((n_frames, N_FINGERS, 4))
    for t, phi in enumerate(phases):
        q_active = _ease_keyframes(phi)
        for f in range(N_FINGERS):
            q_frames[t, f] = q_active if style.active_fingers[f] else _RETRACTED_POSE

    palm = Pose.identity()
    frames = np.stack([
        forward_kinematics(model, palm, q_frames[t].reshape(16)) for t in range(n_frames)
    ])
    _check_reachable(frames, model)
    return DemoTrajectory(frames, phases, style, model.chain_lengths())


def _ease_keyframes(phi: float) -> np.ndarray:
    keys = (_OPEN_POSE, _PRE_POSE, _CLOSED_POSE)
    for k in range(len(_KEYFRAME_PHASES) - 1):
        lo, hi = _KEYFRAME_PHASES[k], _KEYFRAME_PHASES[k + 1]
        if phi <= hi or k == len(_KEYFRAME_PHASES) - 2:
            s = np.clip((phi - lo) / (hi - lo), 0.0, 1.0)
            s = 0.5 - 0.5 * np.cos(np.pi * s)  # cosine ease, C1 at the keyframes
            return (1.0 - s) * keys[k] + s * keys[k + 1]
    return keys[-1].copy()


def _check_reachable(frames: np.ndarray, model: HandModel) -> None:
    r_min = _min_reach(model)
    r_max = model.chain_lengths()
    for f in range(N_FINGERS):
        dist = np.linalg.norm(frames[:, f, :] - model.mount_pos[f], axis=-1)
        if np.any(dist > r_max[f] + 1e-9) or np.any(dist < r_min[f] - 1e-9):
            raise DemoGenerationError(
                f"finger {FINGER_NAMES[f]!r} target outside the reachable annulus")
        if not np.all(np.isfinite(frames[:, f, :])):
            raise DemoGenerationError(f"finger {FINGER_NAMES[f]!r} target is not finite")


def _min_reach(model: HandModel, grid: int = 9) -> np.ndarray:
    """Coarse minimum mount-to-tip distance per finger over the flexion box."""
    palm = Pose.identity()
    r_min = np.zeros(N_FINGERS)
    for f in range(N_FINGERS):
        lims = model.joint_limits[f]
        best = np.inf
        for a in np.linspace(lims[1, 0], lims[1, 1], grid):
            for b in np.linspace(lims[2, 0], lims[2, 1], grid):
                for c in np.linspace(lims[3, 0], lims[3, 1], grid):
                    q = np.zeros(16)
                    q[4 * f + 1:4 * f + 4] = (a, b, c)
                    tip = forward_kinematics(model, palm, q)[f]
                    best = min(best, float(np.linalg.norm(tip - model.mount_pos[f])))
        r_min[f] = best
    return r_min


# ---------------------------------------------------------------------------
# Styles
# ---------------------------------------------------------------------------

def builtin_styles() -> dict[str, StyleSpec]:
    with resources.files("grasplab.data").joinpath("styles.yaml").open() as fh:
        return parse_styles(fh.read())


def parse_styles(text: str) -> dict[str, StyleSpec]:
    raw = yaml.safe_load(text)
    if raw.get("format_version") != STYLE_FORMAT_VERSION:
        raise ValueError(f"unsupported style file format_version: {raw.get('format_version')!r}")
    styles = {}
    for entry in raw["styles"]:
        spec = StyleSpec(entry["id"], tuple(entry["active_fingers"]))
        styles[spec.id] = spec
    return styles


def dump_styles(styles: dict[str, StyleSpec]) -> str:
    payload = {
        "format_version": STYLE_FORMAT_VERSION,
        "styles": [
            {"id": s.id, "active_fingers": [bool(a) for a in s.active_fingers]}
            for s in styles.values()
        ],
    }
    return yaml.safe_dump(payload, sort_keys=False)


def load_styles(path: str | Path) -> dict[str, StyleSpec]:
    return parse_styles(Path(path).read_text())


def save_styles(styles: dict[str, StyleSpec], path: str | Path) -> None:
    Path(path).write_text(dump_styles(styles))


# ---------------------------------------------------------------------------
# Demo file IO (.demo)
# ---------------------------------------------------------------------------

def save_demo(demo: DemoTrajectory, path: str | Path) -> None:
    """Write the structured-text demo format (uniform phase only).

    Header: format_version, style id, active fingers, source_scale, frame
    count; then one line of 12 floats per frame (4 tips x xyz, palm frame, m).
    """
    if not np.allclose(demo.phase, np.linspace(0.0, 1.0, demo.n_frames), atol=1e-12):
        raise ValueError("demo files store uniformly phased trajectories only")
    lines = [
        f"format_version: {DEMO_FORMAT_VERSION}",
        f"style: {demo.style.id}",
        "active_fingers: " + " ".join(str(int(a)) for a in demo.style.active_fingers),
        "source_scale: " + " ".join(repr(float(v)) for v in demo.source_scale),
        f"frames: {demo.n_frames}",
    ]
    for t in range(demo.n_frames):
        lines.append(" ".join(repr(float(v)) for v in demo.frames[t].reshape(12)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demo(path: str | Path) -> DemoTrajectory:
    text = Path(path).read_text().strip().splitlines()
    header = {}
    body_start = 0
    for i, line in enumerate(text):
        if ":" not in line:
            body_start = i
            break
        key, _, value = line.partition(":")
        header[key.strip()] = value.strip()
        body_start = i + 1
    if int(header.get("format_version", -1)) != DEMO_FORMAT_VERSION:
        raise ValueError(f"unsupported demo format_version: {header.get('format_version')!r}")
    active = tuple(bool(int(v)) for v in header["active_fingers"].split())
    style = StyleSpec(header["style"], active)
    source_scale = np.array([float(v) for v in header["source_scale"].split()])
    n = int(header["frames"])
    rows = text[body_start:body_start + n]
    if len(rows) != n:
        raise ValueError(f"expected {n} frame lines, found {len(rows)}")
    frames = np.array([[float(v) for v in row.split()] for row in rows]).reshape(n, 4, 3)
    return DemoTrajectory(frames, np.linspace(0.0, 1.0, n), style, source_scale)
