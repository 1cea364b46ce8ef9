"""Reward terms for the grasping task and their weighted combination.

Four per-step terms: palm-to-object proximity, demo fingertip tracking, a
lift bonus above the start height, and the fingertip contact count. The
total is a mixing-weighted sum; ablation switches zero out the demo term
(the contact *observation* ablation lives in the policy module).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import Keypoints, WorldState, kappa_offset


@dataclass(frozen=True)
class AblationFlags:
    """Baseline switches; all off reproduces the full method."""

    no_contact_obs: bool = False  # zero the contact entries of the observation
    no_demo_reward: bool = False  # drop the demo-tracking reward term
    pose_context: bool = False  # replace keypoints with a 6-DoF pose context

    @classmethod
    def for_variant(cls, variant: str) -> "AblationFlags":
        table = {
            "goat": cls(),
            "no_contact": cls(no_contact_obs=True),
            "no_demo": cls(no_demo_reward=True),
            "pose_context": cls(pose_context=True),
        }
        if variant not in table:
            raise ValueError(f"unknown ablation variant {variant!r}")
        return table[variant]


@dataclass
class RewardWeights:
    """Term weights; defaults chosen so per-step maxima have similar scale."""

    w1: float = 20.0  # 1/m, palm proximity falloff
    w2: float = 5.0  # 1/m, tracking falloff
    w3: float = 2.0  # lift bonus magnitude
    mix: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.5)

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w3 < 0 or any(m < 0 for m in self.mix):
            raise ValueError("reward weights must be non-negative")


@dataclass
class RewardBreakdown:
    r_pos: float
    r_hand: float
    r_lift: float
    r_contact: float
    total: float = field(default=float("nan"))

    def as_array(self) -> np.ndarray:
        return np.array([self.r_pos, self.r_hand, self.r_lift, self.r_contact])


def r_pos(palm_pos: np.ndarray, keypoints: Keypoints, w1: float) -> float:
    """exp(-w1 * distance from the palm to the top-face keypoint mean)."""
    return float(np.exp(-w1 * np.linalg.norm(palm_pos - kappa_offset(keypoints))))


def r_pos_to_point(palm_pos: np.ndarray, target: np.ndarray, w1: float) -> float:
    return float(np.exp(-w1 * np.linalg.norm(palm_pos - target)))


def r_hand(tips: np.ndarray, demo_tips: np.ndarray, w2: float,
           active: tuple[bool, ...] = (True, True, True, True)) -> float:
    """exp(-w2 * summed tracking error) over the style's active fingers."""
    err = 0.0
    for f in range(4):
        if active[f]:
            err += float(np.linalg.norm(tips[f] - demo_tips[f]))
    return float(np.exp(-w2 * err))


def r_lift(object_height: float, start_height: float, w3: float) -> float:
    """w3 while the object sits strictly above its start height."""
    return w3 if object_height > start_height else 0.0


def r_contact(contacts: np.ndarray) -> float:
    return float(np.sum(np.asarray(contacts, dtype=bool)))


def total_reward(state: WorldState, tips: np.ndarray, palm_goal: np.ndarray,
                 demo_tips_world: np.ndarray, active: tuple[bool, ...],
                 weights: RewardWeights, flags: AblationFlags = AblationFlags(),
                 ) -> RewardBreakdown:
    """Weighted per-step reward.

    palm_goal is the fixed per-episode approach point (the top-face keypoint
    mean, or the pose-context substitute under that ablation); demo targets
    are already transformed into the robot base frame.
    """
    pos = r_pos_to_point(state.hand.palm.position, palm_goal, weights.w1)
    hand = r_hand(tips, demo_tips_world, weights.w2, active)
    lift = r_lift(float(state.object_pose.position[2]), state.object_start_height,
                  weights.w3)
    contact = r_contact(state.hand.contacts)
    lam = weights.mix
    hand_term = 0.0 if flags.no_demo_reward else hand
    total = (lam[0] * pos + lam[1] * hand_term + lam[2] * lift + lam[3] * contact)
    return RewardBreakdown(pos, hand, lift, contact, total)
