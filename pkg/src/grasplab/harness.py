"""Evaluation protocols, the scripted baseline controller, and experiment suites.

Trials are derived deterministically from a protocol seed: each (object,
pose) pair gets its own RNG stream, so reports are reproducible and trials
can be evaluated in any order or in parallel. The pose estimate handed to a
controller (keypoints for the policy, center for the scripted baseline) is
the true pose perturbed by pose_noise_sigma, mirroring a noisy perception
stack. Mesh-database objects are not supported; reports note the omission.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .demos import StyleSpec, builtin_styles
from .hand import HandModel, Pose, default_hand_model
from .policy import Normalizer, PolicyParams, act, init_policy_params, load_checkpoint
from .ppo import (
    GraspEnv,
    RandomizationRanges,
    TrainConfig,
    TrainResult,
    build_env,
    start_joints,
    train,
)
from .rewards import AblationFlags, RewardWeights
from .rotations import quat_from_axis_angle
from .world import (
    ObjectSpec,
    SimParams,
    compute_keypoints,
    episode_success,
    initial_world_state,
    kappa_offset,
)

NON_CUBOID_KINDS = ("cylinder", "cone", "sphere")

MESH_CATEGORY_NOTE = ("object-database mesh category omitted: "
                      "this simulator supports primitive shapes only")


@dataclass
class EvalProtocol:
    n_objects: int = 100
    poses_per_object: int = 5
    orientation_range_deg: tuple[float, float] = (-30.0, 30.0)
    pose_noise_sigma: float = 0.001  # m, std of the pose-estimate error
    object_mix: float = 0.0  # fraction of non-cuboid objects
    seed: int = 0
    dims_range: tuple[float, float] = (0.03, 0.12)
    workspace_xy: float = 0.05  # m, uniform +- table placement
    mass_range: tuple[float, float] = (0.05, 0.50)
    friction_range: tuple[float, float] = (0.40, 1.20)

    def __post_init__(self):
        if self.n_objects < 1 or self.poses_per_object < 1:
            raise ValueError("n_objects and poses_per_object must be at least 1")
        if not 0.0 <= self.object_mix <= 1.0:
            raise ValueError("object_mix must lie in [0, 1]")

    @property
    def n_trials(self) -> int:
        return self.n_objects * self.poses_per_object


@dataclass
class TrialRecord:
    object_id: int
    category: str
    pose_xy_yaw: tuple[float, float, float]
    success: bool
    steps_to_contact: int  # -1 if no contact
    max_height: float

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "category": self.category,
            "pose": [round(v, 6) for v in self.pose_xy_yaw],
            "success": bool(self.success),
            "steps_to_contact": self.steps_to_contact,
            "max_height": round(self.max_height, 6),
        }


@dataclass
class EvalReport:
    trials: list[TrialRecord]
    success_rate: float
    ci_low: float
    ci_high: float
    per_category: dict[str, dict]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_trials": len(self.trials),
            "success_rate": round(self.success_rate, 6),
            "wilson_ci_95": [round(self.ci_low, 6), round(self.ci_high, 6)],
            "per_category": self.per_category,
            "notes": self.notes,
            "trials": [t.to_dict() for t in self.trials],
        }


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054,
                    ) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _aggregate(trials: list[TrialRecord], notes: list[str]) -> EvalReport:
    k = sum(t.success for t in trials)
    n = len(trials)
    lo, hi = wilson_interval(k, n)
    per_category: dict[str, dict] = {}
    for cat in sorted({t.category for t in trials}):
        sub = [t for t in trials if t.category == cat]
        ck = sum(t.success for t in sub)
        clo, chi = wilson_interval(ck, len(sub))
        per_category[cat] = {
            "n": len(sub),
            "successes": ck,
            "success_rate": round(ck / len(sub), 6),
            "wilson_ci_95": [round(clo, 6), round(chi, 6)],
        }
    return EvalReport(trials, k / n if n else 0.0, lo, hi, per_category, notes)


# ---------------------------------------------------------------------------
# Trial generation
# ---------------------------------------------------------------------------

def _category_for_index(i: int, protocol: EvalProtocol) -> str:
    n_non = round(protocol.n_objects * protocol.object_mix)
    if i < protocol.n_objects - n_non:
        return "cuboid"
    return NON_CUBOID_KINDS[(i - (protocol.n_objects - n_non)) % len(NON_CUBOID_KINDS)]


def _sample_eval_object(kind: str, protocol: EvalProtocol,
                        rng: np.random.Generator) -> ObjectSpec:
    lo, hi = protocol.dims_range
    if kind == "cuboid":
        dims = rng.uniform(lo, hi, size=3)
    elif kind in ("cylinder", "cone"):
        dims = np.array([rng.uniform(lo / 2, hi / 2), rng.uniform(lo, hi)])
    else:
        dims = np.array([rng.uniform(lo / 2, hi / 2)])
    mass = rng.uniform(*protocol.mass_range)
    friction = rng.uniform(*protocol.friction_range)
    return ObjectSpec(kind, dims, mass, friction, Pose.identity())


def generate_eval_objects(protocol: EvalProtocol) -> list[ObjectSpec]:
    """The protocol's object set at canonical poses; reproducible from seed."""
    objects = []
    for i in range(protocol.n_objects):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((protocol.seed, 11, i))))
        objects.append(_sample_eval_object(_category_for_index(i, protocol), protocol, rng))
    return objects


@dataclass
class Trial:
    object_id: int
    pose_id: int
    spec: ObjectSpec  # posed on the table
    estimate: Pose  # noisy pose estimate handed to controllers


def iter_trials(protocol: EvalProtocol, objects: list[ObjectSpec] | None = None,
                ) -> list[Trial]:
    objects = objects if objects is not None else generate_eval_objects(protocol)
    lo_deg, hi_deg = protocol.orientation_range_deg
    trials = []
    for i, base in enumerate(objects):
        for p in range(protocol.poses_per_object):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((protocol.seed, 13, i, p))))
            x, y = rng.uniform(-protocol.workspace_xy, protocol.workspace_xy, size=2)
            yaw = math.radians(rng.uniform(lo_deg, hi_deg))
            pose = Pose(np.array([x, y, base.rest_height]),
                        quat_from_axis_angle(np.array([0.0, 0.0, yaw])))
            spec = base.at_pose(pose)
            offset = rng.normal(0.0, protocol.pose_noise_sigma, size=3)
            estimate = Pose(pose.position + offset, pose.orientation.copy())
            trials.append(Trial(i, p, spec, estimate))
    return trials


# ---------------------------------------------------------------------------
# Policy evaluation
# ---------------------------------------------------------------------------

def run_policy_trial(params: PolicyParams, normalizer: Normalizer, env: GraspEnv,
                     trial: Trial, start_height: float = 0.12) -> TrialRecord:
    spec = trial.spec
    est_spec = spec.at_pose(trial.estimate)
    keypoints = compute_keypoints(est_spec)
    palm = Pose(trial.estimate.position
                + np.array([0.0, 0.0, spec.half_extents[2] + start_height]),
                quat_from_axis_angle(np.zeros(3)))
    state0 = initial_world_state(env.model, spec, palm, start_joints(env.demo.style))
    obs = env.reset_to(spec, keypoints, state0)
    steps_to_contact = -1
    done = False
    while not done:
        action, _, _ = act(params, obs, False, normalizer=normalizer)
        obs, _, done, info = env.step(action)
        if steps_to_contact < 0 and env.state.hand.contacts.any():
            steps_to_contact = env.state.step_index
    yaw = 2.0 * math.atan2(spec.pose.orientation[3], spec.pose.orientation[0])
    return TrialRecord(
        object_id=trial.object_id,
        category=spec.kind,
        pose_xy_yaw=(float(spec.pose.position[0]), float(spec.pose.position[1]), yaw),
        success=bool(info["success"]),
        steps_to_contact=steps_to_contact,
        max_height=float(info["max_height"]),
    )


def evaluate(params: PolicyParams, normalizer: Normalizer, protocol: EvalProtocol,
             model: HandModel | None = None, sim: SimParams | None = None,
             weights: RewardWeights | None = None, style_id: str = "all_fingers",
             flags: AblationFlags = AblationFlags(),
             objects: list[ObjectSpec] | None = None) -> EvalReport:
    """Deterministic policy evaluation over the protocol's trials."""
    model = model or default_hand_model()
    sim = sim or SimParams()
    env, _ = build_env(model, sim, weights or RewardWeights(), style_id, flags)
    trials = iter_trials(protocol, objects)
    records = [run_policy_trial(params, normalizer, env, t) for t in trials]
    return _aggregate(records, notes=[MESH_CATEGORY_NOTE])


def evaluate_checkpoint(path: str | Path, protocol: EvalProtocol,
                        model: HandModel | None = None, sim: SimParams | None = None,
                        weights: RewardWeights | None = None) -> EvalReport:
    params, normalizer, meta = load_checkpoint(path)
    flags = AblationFlags(**meta.get("ablation", {}))
    return evaluate(params, normalizer, protocol, model, sim, weights,
                    style_id=meta.get("style_id", "all_fingers"), flags=flags)


def random_policy(seed: int = 0) -> tuple[PolicyParams, Normalizer]:
    """Freshly initialized (untrained) policy; the evaluation floor."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 99))))
    params = init_policy_params(rng)
    return params, Normalizer.for_dim(params.pi.weights[0].shape[0])


# ---------------------------------------------------------------------------
# Scripted baseline
# ---------------------------------------------------------------------------

_SCRIPT_CLOSED = np.tile([0.0, 1.50, 0.90, 0.60], 4)
_SCRIPT_SQUEEZE = np.array([0.0, 0.25, 0.25, 0.25])
_SCRIPT_HOVER = 0.06  # m above the estimated center
_SCRIPT_REACH_EPS = 0.004


class ScriptedController:
    """Move above the estimated center, close until contact, squeeze, lift.

    Per-finger latching: each finger stops driving towards the closed pose
    the moment its contact fires, then presses a fixed extra displacement.
    The world's automatic lift phase performs the 7 cm raise.
    """

    def __init__(self, estimate: Pose, model: HandModel):
        self.approach = estimate.position + np.array([0.0, 0.0, _SCRIPT_HOVER])
        self.open_q = start_joints(builtin_styles()["all_fingers"])
        self.latched: list[np.ndarray | None] = [None] * 4
        self.steps = 0

    def action(self, state) -> np.ndarray:
        palm_err = np.linalg.norm(state.hand.palm.position - self.approach)
        closing = palm_err < _SCRIPT_REACH_EPS or self.steps >= 45 \
            or bool(state.hand.contacts.any())
        if not closing:
            joints = self.open_q.copy()
        else:
            joints = _SCRIPT_CLOSED.copy()
            for f in range(4):
                if self.latched[f] is None and state.hand.contacts[f]:
                    self.latched[f] = state.hand.q[4 * f:4 * f + 4].copy()
                if self.latched[f] is not None:
                    joints[4 * f:4 * f + 4] = self.latched[f] + _SCRIPT_SQUEEZE
        self.steps += 1
        return np.concatenate([self.approach, np.zeros(3), joints])


def run_scripted_trial(trial: Trial, model: HandModel, sim: SimParams,
                       start_height: float = 0.12) -> TrialRecord:
    from .world import step as world_step  # local import keeps module load light
    spec = trial.spec
    palm = Pose(trial.estimate.position
                + np.array([0.0, 0.0, spec.half_extents[2] + start_height]),
                quat_from_axis_angle(np.zeros(3)))
    controller = ScriptedController(trial.estimate, model)
    state = initial_world_state(model, spec, palm, controller.open_q)
    steps_to_contact = -1
    from .world import Action
    for _ in range(sim.episode_length):
        state = world_step(state, Action.from_vector(controller.action(state)), sim,
                           model, spec)
        if steps_to_contact < 0 and state.hand.contacts.any():
            steps_to_contact = state.step_index
    yaw = 2.0 * math.atan2(spec.pose.orientation[3], spec.pose.orientation[0])
    return TrialRecord(
        object_id=trial.object_id,
        category=spec.kind,
        pose_xy_yaw=(float(spec.pose.position[0]), float(spec.pose.position[1]), yaw),
        success=episode_success(state, sim),
        steps_to_contact=steps_to_contact,
        max_height=float(state.max_object_height),
    )


def scripted_baseline_eval(protocol: EvalProtocol, model: HandModel | None = None,
                           sim: SimParams | None = None) -> EvalReport:
    model = model or default_hand_model()
    sim = sim or SimParams()
    records = [run_scripted_trial(t, model, sim) for t in iter_trials(protocol)]
    return _aggregate(records, notes=[MESH_CATEGORY_NOTE, "controller: scripted baseline"])


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("goat", "no_contact", "no_demo", "pose_context")


def run_ablation(base_config: TrainConfig, protocol: EvalProtocol,
                 variants: tuple[str, ...] = ABLATION_VARIANTS, n_seeds: int = 4,
                 ranges: RandomizationRanges | None = None,
                 weights: RewardWeights | None = None, sim: SimParams | None = None,
                 model: HandModel | None = None, log_fn=None) -> dict:
    """Equal-budget training of all variants over n_seeds, shared evaluation."""
    results: dict = {"variants": {}, "n_seeds": n_seeds,
                     "budget": {"iterations": base_config.iterations,
                                "samples_per_iteration": base_config.samples_per_iteration}}
    for variant in variants:
        flags = AblationFlags.for_variant(variant)
        rates, curves = [], []
        for s in range(n_seeds):
            config = replace(base_config, ablation=flags, seed=base_config.seed + s)
            run = train(config, ranges=ranges, weights=weights, sim=sim, model=model)
            report = evaluate(run.params, run.normalizer, protocol, model, sim, weights,
                              style_id=config.style_id, flags=flags)
            rates.append(report.success_rate)
            curves.append([m["mean_reward"] for m in run.metrics])
            if log_fn is not None:
                log_fn({"variant": variant, "seed": config.seed,
                        "success_rate": report.success_rate})
        results["variants"][variant] = {
            "success_rates": [round(r, 6) for r in rates],
            "mean_success": round(float(np.mean(rates)), 6),
            "learning_curves": curves,
        }
    return results


def style_eval(style_ids: list[str], base_config: TrainConfig, protocol: EvalProtocol,
               ranges: RandomizationRanges | None = None,
               weights: RewardWeights | None = None, sim: SimParams | None = None,
               model: HandModel | None = None, log_fn=None) -> dict:
    """Train one policy per style, evaluate each on the shared object mix."""
    styles = builtin_styles()
    out: dict = {"styles": {}}
    for style_id in style_ids:
        if style_id not in styles:
            raise ValueError(f"unknown style {style_id!r}")
        config = replace(base_config, style_id=style_id)
        run = train(config, ranges=ranges, weights=weights, sim=sim, model=model)
        report = evaluate(run.params, run.normalizer, protocol, model, sim, weights,
                          style_id=style_id, flags=config.ablation)
        out["styles"][style_id] = {
            "n_active_fingers": styles[style_id].n_active,
            "success_rate": round(report.success_rate, 6),
            "per_category": report.per_category,
        }
        if log_fn is not None:
            log_fn({"style": style_id, "success_rate": report.success_rate})
    return out


# ---------------------------------------------------------------------------
# Object set files
# ---------------------------------------------------------------------------

def save_object_set(path: str | Path, objects: list[ObjectSpec],
                    generator: dict | None = None) -> None:
    payload = {
        "format_version": 1,
        "generator": generator or {},
        "objects": [
            {
                "kind": o.kind,
                "dims": [float(v) for v in o.dims],
                "mass": float(o.mass),
                "friction": float(o.friction),
                "position": [float(v) for v in o.pose.position],
                "orientation": [float(v) for v in o.pose.orientation],
            }
            for o in objects
        ],
    }
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=False))


def load_object_set(path: str | Path) -> tuple[list[ObjectSpec], dict]:
    raw = yaml.safe_load(Path(path).read_text())
    if raw.get("format_version") != 1:
        raise ValueError(f"unsupported object set format_version: {raw.get('format_version')!r}")
    objects = [
        ObjectSpec(o["kind"], np.array(o["dims"], dtype=float), float(o["mass"]),
                   float(o["friction"]),
                   Pose(np.array(o["position"], dtype=float),
                        np.array(o["orientation"], dtype=float)))
        for o in raw["objects"]
    ]
    return objects, raw.get("generator", {})


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def write_report(path: str | Path, payload: dict) -> None:
    """Canonical JSON serialization so identical runs byte-compare equal."""
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
