"""Training loop: domain-randomized rollouts, GAE, clipped-surrogate updates.

Episodes are fixed length (reach phase then automatic lift). Each rollout
samples a fresh object, noisy keypoints (the per-episode context), and
actuation gains per the randomization ranges. Collection fans out over
workers with per-(iteration, worker) RNG streams and merges in worker order,
so results are identical whether workers run inline or in a process pool.
"""

from __future__ import annotations

import csv
import json
import math
import os
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .demos import DemoTrajectory, StyleSpec, builtin_styles, retarget_demo, synthesize_demo
from .hand import HandModel, Pose, default_hand_model, forward_kinematics
from .policy import (
    ACT_DIM,
    OBS_DIM,
    Normalizer,
    PolicyParams,
    act,
    config_digest,
    flatten_params,
    init_policy_params,
    observe,
    policy_gradient,
    save_checkpoint,
    unflatten_params,
)
from .rewards import AblationFlags, RewardBreakdown, RewardWeights, total_reward
from .rotations import quat_from_axis_angle
from .world import (
    Action,
    Keypoints,
    ObjectSpec,
    SimParams,
    WorldState,
    add_keypoint_noise,
    compute_keypoints,
    context_from_keypoints,
    episode_success,
    initial_world_state,
    kappa_offset,
    step,
)

_START_FLEX = np.array([0.0, 0.15, 0.15, 0.10])
_START_RETRACT = np.array([0.0, -0.28, -0.25, -0.25])


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss is hit; the minibatch is dumped first."""


@dataclass
class RandomizationRanges:
    """Uniform sampling ranges for per-episode domain randomization."""

    dims_range: tuple[float, float] = (0.03, 0.12)  # m, cuboid side lengths
    keypoint_noise_sigma: float = 0.005  # m
    mass_range: tuple[float, float] = (0.05, 0.50)  # kg
    friction_range: tuple[float, float] = (0.40, 1.20)
    pd_gain_range: tuple[float, float] = (0.75, 1.00)
    damping_range: tuple[float, float] = (0.00, 0.40)
    object_xy: float = 0.05  # m, uniform +- on table placement
    object_yaw_deg: float = 30.0
    palm_height_range: tuple[float, float] = (0.10, 0.15)  # m above object top
    palm_xy_jitter: float = 0.04  # m
    palm_yaw_jitter: float = 0.15  # rad
    joint_start_jitter: float = 0.03  # rad
    kinds: tuple[str, ...] = ("cuboid",)

    def __post_init__(self):
        for name in ("dims_range", "mass_range", "friction_range", "pd_gain_range",
                     "damping_range", "palm_height_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo must not exceed hi")
        if self.keypoint_noise_sigma < 0.0:
            raise ValueError("keypoint_noise_sigma must be non-negative")


@dataclass
class TrainConfig:
    iterations: int = 100
    samples_per_iteration: int = 2000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_iter: int = 10
    minibatch_size: int = 2048
    workers: int = 4
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    style_id: str = "all_fingers"
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    value_clip: float | None = None  # None disables value-loss clipping
    hidden: tuple[int, ...] = (128, 128)
    log_std_init: float = -1.0
    reward_scale: float = 0.1  # optimizer-side scaling; logged metrics stay raw
    checkpoint_every: int = 0  # iterations; 0 = final only

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.iterations < 1 or self.workers < 1:
            raise ValueError("iterations and workers must be positive")

    def validate_against(self, sim: SimParams) -> None:
        if self.samples_per_iteration < sim.episode_length:
            raise ValueError("samples_per_iteration must cover at least one episode")


def paper_scale_config(**overrides) -> TrainConfig:
    """The full-scale constants: 1.2e6 samples across 500 iterations."""
    cfg = dict(iterations=500, samples_per_iteration=2400, workers=4)
    cfg.update(overrides)
    return TrainConfig(**cfg)


# ---------------------------------------------------------------------------
# Episode setup and the environment wrapper
# ---------------------------------------------------------------------------

def start_joints(style: StyleSpec, jitter: float = 0.0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Initial joint vector: active fingers open, inactive retracted."""
    q = np.zeros(16)
    for f in range(4):
        base = _START_FLEX if style.active_fingers[f] else _START_RETRACT
        q[4 * f:4 * f + 4] = base
    if jitter > 0.0 and rng is not None:
        q = q + rng.uniform(-jitter, jitter, size=16)
    return q


def sample_object(ranges: RandomizationRanges, rng: np.random.Generator) -> ObjectSpec:
    kind = ranges.kinds[int(rng.integers(len(ranges.kinds)))]
    lo, hi = ranges.dims_range
    if kind == "cuboid":
        dims = rng.uniform(lo, hi, size=3)
    elif kind in ("cylinder", "cone"):
        dims = np.array([rng.uniform(lo / 2, hi / 2), rng.uniform(lo, hi)])
    else:
        dims = np.array([rng.uniform(lo / 2, hi / 2)])
    mass = rng.uniform(*ranges.mass_range)
    friction = rng.uniform(*ranges.friction_range)
    x, y = rng.uniform(-ranges.object_xy, ranges.object_xy, size=2)
    yaw = math.radians(rng.uniform(-ranges.object_yaw_deg, ranges.object_yaw_deg))
    spec = ObjectSpec(kind, dims, mass, friction, Pose.identity())
    pose = Pose(np.array([x, y, spec.rest_height]),
                quat_from_axis_angle(np.array([0.0, 0.0, yaw])))
    return spec.at_pose(pose)


def sample_start_palm(spec: ObjectSpec, ranges: RandomizationRanges,
                      rng: np.random.Generator) -> Pose:
    top = spec.pose.position[2] + spec.half_extents[2]
    x, y = spec.pose.position[:2] + rng.uniform(-ranges.palm_xy_jitter,
                                                ranges.palm_xy_jitter, size=2)
    z = top + rng.uniform(*ranges.palm_height_range)
    yaw = rng.uniform(-ranges.palm_yaw_jitter, ranges.palm_yaw_jitter)
    return Pose(np.array([x, y, z]), quat_from_axis_angle(np.array([0.0, 0.0, yaw])))


def sample_episode_setup(ranges: RandomizationRanges, base_params: SimParams,
                         model: HandModel, style: StyleSpec,
                         rng: np.random.Generator,
                         ) -> tuple[ObjectSpec, Keypoints, SimParams, WorldState]:
    """Object, noisy context keypoints, randomized params, initial state."""
    spec = sample_object(ranges, rng)
    keypoints = add_keypoint_noise(compute_keypoints(spec),
                                   ranges.keypoint_noise_sigma, rng)
    params = replace(base_params,
                     pd_gain_scale=rng.uniform(*ranges.pd_gain_range),
                     joint_damping=rng.uniform(*ranges.damping_range))
    palm = sample_start_palm(spec, ranges, rng)
    q0 = start_joints(style, ranges.joint_start_jitter, rng)
    state = initial_world_state(model, spec, palm, q0)
    return spec, keypoints, params, state


# Affine map from policy action units (roughly [-1, 1] per dimension) to
# physical targets. Joint entries are filled per-model from the limit boxes.
_PALM_POS_SCALE = np.array([0.20, 0.20, 0.12])
_PALM_POS_OFFSET = np.array([0.0, 0.0, 0.12])
_PALM_ROT_SCALE = 0.6  # rad


def action_to_targets(vec: np.ndarray, model: HandModel) -> Action:
    """Physical 22-d Action from a policy-space action vector."""
    vec = np.asarray(vec, dtype=float)
    lim = model.limits_flat
    center = 0.5 * (lim[:, 0] + lim[:, 1])
    half = 0.5 * (lim[:, 1] - lim[:, 0])
    palm = np.concatenate([vec[:3] * _PALM_POS_SCALE + _PALM_POS_OFFSET,
                           vec[3:6] * _PALM_ROT_SCALE])
    return Action(palm, center + vec[6:] * half)


class GraspEnv:
    """One grasping episode at a time; context is fixed per episode.

    Policy actions arrive in normalized units and are mapped affinely to
    absolute palm/joint targets before the world applies its rate limits.
    """

    def __init__(self, model: HandModel, sim: SimParams, weights: RewardWeights,
                 demo: DemoTrajectory, flags: AblationFlags = AblationFlags()):
        self.model = model
        self.sim = sim
        self.weights = weights
        self.demo = demo
        self.flags = flags
        self.spec: ObjectSpec | None = None
        self.state: WorldState | None = None
        self.context: np.ndarray | None = None
        self.palm_goal: np.ndarray | None = None
        self.episode_params: SimParams = sim

    def reset_to(self, spec: ObjectSpec, keypoints: Keypoints, state: WorldState,
                 params: SimParams | None = None) -> np.ndarray:
        self.spec = spec
        self.state = state
        self.episode_params = params if params is not None else self.sim
        self.context = context_from_keypoints(keypoints)
        if self.flags.pose_context:
            center = keypoints.mean(axis=0)
            self.palm_goal = center + np.array([0.0, 0.0, spec.half_extents[2]])
        else:
            self.palm_goal = kappa_offset(keypoints)
        return observe(self.state, self.context, self.flags)

    def reset_random(self, ranges: RandomizationRanges, style: StyleSpec,
                     rng: np.random.Generator) -> np.ndarray:
        spec, keypoints, params, state = sample_episode_setup(
            ranges, self.sim, self.model, style, rng)
        return self.reset_to(spec, keypoints, state, params)

    def step(self, action_vec: np.ndarray) -> tuple[np.ndarray, RewardBreakdown, bool, dict]:
        state = step(self.state, action_to_targets(action_vec, self.model),
                     self.episode_params, self.model, self.spec)
        self.state = state
        tips = forward_kinematics(self.model, state.hand.palm, state.hand.q)
        phase = min(1.0, state.step_index / self.episode_params.closing_steps)
        demo_tips = state.hand.palm.transform(_demo_frame(self.demo, phase))
        reward = total_reward(state, tips, self.palm_goal, demo_tips,
                              self.demo.style.active_fingers, self.weights, self.flags)
        done = state.step_index >= self.episode_params.episode_length
        info = {}
        if done:
            info["success"] = episode_success(state, self.episode_params)
            info["max_height"] = state.max_object_height
            info["held"] = state.held
        obs = observe(state, self.context, self.flags)
        return obs, reward, done, info


def _demo_frame(demo: DemoTrajectory, phase: float) -> np.ndarray:
    # demo_target without the input checks; phase is already clamped
    if phase >= 1.0:
        return demo.frames[-1]
    idx = phase * (demo.n_frames - 1)
    lo = int(idx)
    t = idx - lo
    return (1.0 - t) * demo.frames[lo] + t * demo.frames[lo + 1]


def build_env(model: HandModel, sim: SimParams, weights: RewardWeights,
              style_id: str, flags: AblationFlags) -> tuple[GraspEnv, StyleSpec]:
    styles = builtin_styles()
    if style_id not in styles:
        raise ValueError(f"unknown style {style_id!r}")
    style = styles[style_id]
    demo = retarget_demo(synthesize_demo(style, model), model)
    return GraspEnv(model, sim, weights, demo, flags), style


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------

def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a flat array of transitions.

    dones mark episode ends; the value after a terminal step is zero (all
    episodes here end by truncation at a fixed horizon with no bootstrap).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    n = rewards.shape[0]
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        next_value = 0.0 if t == n - 1 else values[t + 1]
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        last = delta + gamma * lam * not_done * last
        adv[t] = last
    return adv, adv + values


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: np.ndarray  # (N, 67) raw, pre-normalization
    actions: np.ndarray  # (N, 22)
    log_probs: np.ndarray  # (N,)
    values: np.ndarray  # (N,)
    rewards: np.ndarray  # (N,)
    reward_terms: np.ndarray  # (N, 4)
    dones: np.ndarray  # (N,)
    successes: np.ndarray  # (episodes,)
    episode_rewards: np.ndarray  # (episodes,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @staticmethod
    def concatenate(batches: list["RolloutBatch"]) -> "RolloutBatch":
        return RolloutBatch(
            obs=np.concatenate([b.obs for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            log_probs=np.concatenate([b.log_probs for b in batches]),
            values=np.concatenate([b.values for b in batches]),
            rewards=np.concatenate([b.rewards for b in batches]),
            reward_terms=np.concatenate([b.reward_terms for b in batches]),
            dones=np.concatenate([b.dones for b in batches]),
            successes=np.concatenate([b.successes for b in batches]),
            episode_rewards=np.concatenate([b.episode_rewards for b in batches]),
        )


def collect_rollouts(params: PolicyParams, normalizer: Normalizer, env: GraspEnv,
                     ranges: RandomizationRanges, style: StyleSpec, n_episodes: int,
                     rng: np.random.Generator) -> RolloutBatch:
    horizon = env.sim.episode_length
    n = n_episodes * horizon
    obs_buf = np.zeros((n, OBS_DIM))
    act_buf = np.zeros((n, ACT_DIM))
    logp_buf = np.zeros(n)
    val_buf = np.zeros(n)
    rew_buf = np.zeros(n)
    term_buf = np.zeros((n, 4))
    done_buf = np.zeros(n)
    successes = np.zeros(n_episodes)
    ep_rewards = np.zeros(n_episodes)
    i = 0
    for ep in range(n_episodes):
        obs = env.reset_random(ranges, style, rng)
        total = 0.0
        for _ in range(horizon):
            action, log_prob, value = act(params, obs, True, rng, normalizer)
            next_obs, reward, done, info = env.step(action)
            obs_buf[i] = obs
            act_buf[i] = action
            logp_buf[i] = log_prob
            val_buf[i] = value
            rew_buf[i] = reward.total
            term_buf[i] = reward.as_array()
            done_buf[i] = float(done)
            total += reward.total
            obs = next_obs
            i += 1
            if done:
                successes[ep] = float(info["success"])
                break
        ep_rewards[ep] = total
    return RolloutBatch(obs_buf[:i], act_buf[:i], logp_buf[:i], val_buf[:i],
                        rew_buf[:i], term_buf[:i], done_buf[:i], successes, ep_rewards)


def _worker_seed(seed: int, iteration: int, worker: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, 1000003, iteration, worker))))


def _collect_task(payload: bytes) -> bytes:
    (params, normalizer, model, sim, weights, demo, flags, ranges, style,
     n_episodes, seed, iteration, worker) = pickle.loads(payload)
    env = GraspEnv(model, sim, weights, demo, flags)
    rng = _worker_seed(seed, iteration, worker)
    batch = collect_rollouts(params, normalizer, env, ranges, style, n_episodes, rng)
    return pickle.dumps(batch)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: PolicyParams
    normalizer: Normalizer
    metrics: list[dict]
    config: TrainConfig
    checkpoint_path: Path | None = None


def train(config: TrainConfig, ranges: RandomizationRanges | None = None,
          weights: RewardWeights | None = None, sim: SimParams | None = None,
          model: HandModel | None = None, out_dir: str | Path | None = None,
          log_fn=None, pool=None) -> TrainResult:
    """Run PPO training; fully reproducible from config.seed."""
    ranges = ranges or RandomizationRanges()
    weights = weights or RewardWeights()
    sim = sim or SimParams()
    model = model or default_hand_model()
    config.validate_against(sim)

    env, style = build_env(model, sim, weights, config.style_id, config.ablation)
    init_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((config.seed, 4242))))
    params = init_policy_params(init_rng, OBS_DIM, ACT_DIM, tuple(config.hidden),
                                config.log_std_init)
    normalizer = Normalizer.for_dim(OBS_DIM)
    theta = flatten_params(params)
    adam = Adam(config.learning_rate)
    eps_per_worker = max(1, math.ceil(
        config.samples_per_iteration / config.workers / sim.episode_length))

    own_pool = False
    if pool is None and config.workers > 1:
        import multiprocessing as mp
        pool = mp.get_context("fork").Pool(config.workers)
        own_pool = True

    metrics: list[dict] = []
    total_samples = 0
    try:
        for iteration in range(config.iterations):
            if pool is not None:
                payloads = [pickle.dumps((params, normalizer, model, sim, weights,
                                          env.demo, config.ablation, ranges, style,
                                          eps_per_worker, config.seed, iteration, w))
                            for w in range(config.workers)]
                batches = [pickle.loads(b) for b in pool.map(_collect_task, payloads)]
            else:
                batches = []
                for w in range(config.workers):
                    rng = _worker_seed(config.seed, iteration, w)
                    batches.append(collect_rollouts(params, normalizer, env, ranges,
                                                    style, eps_per_worker, rng))
            batch = RolloutBatch.concatenate(batches)
            total_samples += batch.obs.shape[0]

            adv, returns = gae(batch.rewards * config.reward_scale, batch.values,
                               batch.dones, config.gamma, config.gae_lambda)
            batch.advantages = (adv - adv.mean()) / (adv.std() + 1e-8)
            batch.returns = returns

            obs_norm = normalizer.normalize(batch.obs)
            update_rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((config.seed, 777, iteration))))
            n = obs_norm.shape[0]
            stats = {}
            for _ in range(config.epochs_per_iter):
                order = update_rng.permutation(n)
                for lo in range(0, n, config.minibatch_size):
                    idx = order[lo:lo + config.minibatch_size]
                    mb = {
                        "obs": obs_norm[idx],
                        "actions": batch.actions[idx],
                        "log_probs": batch.log_probs[idx],
                        "advantages": batch.advantages[idx],
                        "returns": batch.returns[idx],
                        "values": batch.values[idx],
                    }
                    grad, stats = policy_gradient(params, mb, config.clip_epsilon,
                                                  config.value_coef, config.entropy_coef,
                                                  config.value_clip)
                    if not np.isfinite(stats["loss"]) or not np.all(np.isfinite(grad)):
                        dump = _dump_minibatch(out_dir, iteration, mb)
                        raise TrainingDiverged(
                            f"non-finite loss at iteration {iteration}; minibatch dumped to {dump}")
                    theta = adam.step(theta, grad)
                    params = unflatten_params(theta, params)
                    params.log_std = np.clip(params.log_std, -5.0, 2.0)
                    theta = flatten_params(params)

            normalizer.update(batch.obs)

            row = {
                "iteration": iteration,
                "samples": total_samples,
                "mean_reward": float(batch.episode_rewards.mean()),
                "success_rate": float(batch.successes.mean()),
                "r_pos": float(batch.reward_terms[:, 0].mean()),
                "r_hand": float(batch.reward_terms[:, 1].mean()),
                "r_lift": float(batch.reward_terms[:, 2].mean()),
                "r_contact": float(batch.reward_terms[:, 3].mean()),
                "loss": stats.get("loss", float("nan")),
                "value_loss": stats.get("value_loss", float("nan")),
                "entropy": stats.get("entropy", float("nan")),
                "log_std_mean": float(params.log_std.mean()),
            }
            metrics.append(row)
            if log_fn is not None:
                log_fn(row)
            if out_dir is not None and config.checkpoint_every > 0 \
                    and (iteration + 1) % config.checkpoint_every == 0:
                _write_checkpoint(out_dir, f"checkpoint_{iteration + 1:04d}.ckpt",
                                  params, normalizer, config)
    finally:
        if own_pool:
            pool.close()
            pool.join()

    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = _write_checkpoint(out_dir, "checkpoint.ckpt", params, normalizer, config)
        write_metrics_csv(out_dir / "metrics.csv", metrics)
        write_plotdata(out_dir / "plotdata.json", metrics)
    return TrainResult(params, normalizer, metrics, config, ckpt_path)


def _write_checkpoint(out_dir, name, params, normalizer, config) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    meta = {
        "obs_dim": OBS_DIM,
        "act_dim": ACT_DIM,
        "hidden": list(config.hidden),
        "style_id": config.style_id,
        "ablation": vars(config.ablation),
        "config_digest": config_digest(_config_dict(config)),
    }
    save_checkpoint(path, params, normalizer, meta)
    return path


def _config_dict(config: TrainConfig) -> dict:
    d = dict(vars(config))
    d["ablation"] = dict(vars(config.ablation))
    d["hidden"] = list(config.hidden)
    return d


def _dump_minibatch(out_dir, iteration, mb) -> str:
    directory = Path(out_dir) if out_dir is not None else Path.cwd()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"diverged_minibatch_iter{iteration}.npz"
    np.savez(path, **mb)
    return str(path)


def write_metrics_csv(path: str | Path, metrics: list[dict]) -> None:
    if not metrics:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(metrics[0].keys()))
        writer.writeheader()
        writer.writerows(metrics)


def write_plotdata(path: str | Path, metrics: list[dict]) -> None:
    payload = {
        "iterations": [m["iteration"] for m in metrics],
        "mean_reward": [m["mean_reward"] for m in metrics],
        "success_rate": [m["success_rate"] for m in metrics],
        "reward_terms": {
            key: [m[key] for m in metrics] for key in ("r_pos", "r_hand", "r_lift", "r_contact")
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
