"""Observation assembly and the diagonal-Gaussian MLP policy.

Observation layout (67 = 43 state + 24 context), frozen by OBS_SLICES:
  [0:3)   palm position (m)
  [3:7)   palm orientation quaternion (w, x, y, z)
  [7:23)  joint positions (rad)
  [23:39) joint velocities (rad/s)
  [39:43) fingertip contacts as 0/1
  [43:67) context: 24 keypoint coordinates (or a zero-padded 6-DoF pose
          under the pose-context ablation)

Networks are plain numpy MLPs with tanh hidden layers; gradients are exact
reverse-mode, implemented by hand so the update is dependency-free and easy
to check against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rewards import AblationFlags
from .world import WorldState, keypoints_from_context

STATE_DIM = 43
CONTEXT_DIM = 24
OBS_DIM = STATE_DIM + CONTEXT_DIM
ACT_DIM = 22

OBS_SLICES = {
    "palm_pos": slice(0, 3),
    "palm_quat": slice(3, 7),
    "joints": slice(7, 23),
    "joint_vel": slice(23, 39),
    "contacts": slice(39, 43),
    "context": slice(43, 67),
}

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

_LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"GRASPLAB-CKPT-1\n"


def observe(state: WorldState, context: np.ndarray,
            flags: AblationFlags = AblationFlags()) -> np.ndarray:
    """Assemble the 67-d observation vector from world state and context."""
    context = np.asarray(context, dtype=float).reshape(CONTEXT_DIM)
    obs = np.empty(OBS_DIM)
    obs[OBS_SLICES["palm_pos"]] = state.hand.palm.position
    obs[OBS_SLICES["palm_quat"]] = state.hand.palm.orientation
    obs[OBS_SLICES["joints"]] = state.hand.q
    obs[OBS_SLICES["joint_vel"]] = state.hand.qdot
    obs[OBS_SLICES["contacts"]] = 0.0 if flags.no_contact_obs else state.hand.contacts
    if flags.pose_context:
        obs[OBS_SLICES["context"]] = pose_context_vector(context)
    else:
        obs[OBS_SLICES["context"]] = context
    return obs


def pose_context_vector(context: np.ndarray) -> np.ndarray:
    """Center + axis-angle of the box implied by the keypoints, zero-padded."""
    corners = keypoints_from_context(context)
    center = corners.mean(axis=0)
    x_dir = corners[[1, 2, 5, 6]].mean(axis=0) - corners[[0, 3, 4, 7]].mean(axis=0)
    y_dir = corners[[2, 3, 6, 7]].mean(axis=0) - corners[[0, 1, 4, 5]].mean(axis=0)
    x_dir /= max(np.linalg.norm(x_dir), 1e-12)
    y_dir -= x_dir * np.dot(x_dir, y_dir)
    y_dir /= max(np.linalg.norm(y_dir), 1e-12)
    z_dir = np.cross(x_dir, y_dir)
    rot = np.column_stack([x_dir, y_dir, z_dir])
    out = np.zeros(CONTEXT_DIM)
    out[:3] = center
    out[3:6] = _axis_angle_from_matrix(rot)
    return out


def _axis_angle_from_matrix(rot: np.ndarray) -> np.ndarray:
    cos_angle = min(1.0, max(-1.0, (np.trace(rot) - 1.0) / 2.0))
    angle = math.acos(cos_angle)
    if angle < 1e-9:
        return np.zeros(3)
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    n = np.linalg.norm(axis)
    if n < 1e-12:
        # 180-degree rotation: take the dominant diagonal direction.
        k = int(np.argmax(np.diag(rot)))
        axis = np.zeros(3)
        axis[k] = 1.0
        return axis * angle
    return axis / n * angle


# ---------------------------------------------------------------------------
# MLP with manual reverse mode
# ---------------------------------------------------------------------------

@dataclass
class MLP:
    """Fully connected net, tanh hidden activations, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes: tuple[int, ...], rng: np.random.Generator,
             out_scale: float = 1.0) -> "MLP":
        """Orthogonal init, gain sqrt(2) on hidden layers, out_scale on the last."""
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            a = rng.normal(size=(fan_in, fan_out))
            q, r = np.linalg.qr(a if fan_in >= fan_out else a.T)
            q = q * np.sign(np.diag(r))  # fix the sign ambiguity
            if fan_in < fan_out:
                q = q.T
            gain = out_scale if i == len(sizes) - 2 else math.sqrt(2.0)
            weights.append(q[:fan_in, :fan_out] * gain)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns output and the activation cache for backward()."""
        cache = [x]
        h = x
        for i in range(self.n_layers - 1):
            h = np.tanh(h @ self.weights[i] + self.biases[i])
            cache.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> "MLP":
        """Exact gradient of sum(out * grad_out) w.r.t. the parameters."""
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        g = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            gw[i] = cache[i].T @ g
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (1.0 - cache[i] ** 2)
        return MLP(gw, gb)

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class PolicyParams:
    """Policy mean net, value net, and state-independent action log-stds."""

    pi: MLP
    vf: MLP
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=float)
        if not all(np.all(np.isfinite(w)) for w in self.pi.weights + self.vf.weights):
            raise ValueError("policy parameters must be finite")
        if np.any(self.log_std < LOG_STD_MIN - 1e-12) or np.any(self.log_std > LOG_STD_MAX + 1e-12):
            raise ValueError(f"log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.pi.copy(), self.vf.copy(), self.log_std.copy())


def init_policy_params(rng: np.random.Generator, obs_dim: int = OBS_DIM,
                       act_dim: int = ACT_DIM, hidden: tuple[int, ...] = (128, 128),
                       log_std_init: float = -1.0) -> PolicyParams:
    pi = MLP.init((obs_dim, *hidden, act_dim), rng, out_scale=0.01)
    vf = MLP.init((obs_dim, *hidden, 1), rng)
    return PolicyParams(pi, vf, np.full(act_dim, log_std_init))


# --- flat parameter view (optimizer + finite differences) -------------------

def flatten_params(params: PolicyParams) -> np.ndarray:
    parts = [w.ravel() for w in params.pi.weights] + [b for b in params.pi.biases]
    parts += [w.ravel() for w in params.vf.weights] + [b for b in params.vf.biases]
    parts.append(params.log_std)
    return np.concatenate(parts)


def unflatten_params(vec: np.ndarray, template: PolicyParams) -> PolicyParams:
    idx = 0

    def take(shape):
        nonlocal idx
        size = int(np.prod(shape))
        out = vec[idx:idx + size].reshape(shape).copy()
        idx += size
        return out

    pi = MLP([take(w.shape) for w in template.pi.weights],
             [take(b.shape) for b in template.pi.biases])
    vf = MLP([take(w.shape) for w in template.vf.weights],
             [take(b.shape) for b in template.vf.biases])
    log_std = take(template.log_std.shape)
    return PolicyParams(pi, vf, log_std)


# ---------------------------------------------------------------------------
# Acting
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Running mean/variance standardization of observations."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 1e-4
    clip: float = 10.0

    @classmethod
    def for_dim(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)

    def update(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(batch)
        n = batch.shape[0]
        mean = batch.mean(axis=0)
        var = batch.var(axis=0)
        delta = mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * (n / total)
        m_a = self.var * self.count
        m_b = var * n
        self.var = (m_a + m_b + delta ** 2 * self.count * n / total) / total
        self.count = total

    def copy(self) -> "Normalizer":
        return Normalizer(self.mean.copy(), self.var.copy(), self.count, self.clip)


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray,
                      actions: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * np.sum(z ** 2, axis=-1) - np.sum(log_std) - 0.5 * _LOG_2PI * mean.shape[-1]


def act(params: PolicyParams, obs: np.ndarray, stochastic: bool,
        rng: np.random.Generator | None = None,
        normalizer: Normalizer | None = None) -> tuple[np.ndarray, float, float]:
    """Sample (or take the mean) action; returns (action, log_prob, value)."""
    x = normalizer.normalize(obs) if normalizer is not None else np.asarray(obs, dtype=float)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite observation")
    mean = params.pi(x[None, :])[0]
    value = float(params.vf(x[None, :])[0, 0])
    if stochastic:
        if rng is None:
            raise ValueError("stochastic action sampling needs an rng")
        action = mean + np.exp(params.log_std) * rng.standard_normal(mean.shape[0])
    else:
        action = mean.copy()
    log_prob = float(gaussian_log_prob(mean, params.log_std, action))
    return action, log_prob, value


# ---------------------------------------------------------------------------
# PPO surrogate loss and its exact gradient
# ---------------------------------------------------------------------------

def ppo_loss(params: PolicyParams, batch: dict, clip_epsilon: float,
             value_coef: float, entropy_coef: float,
             value_clip: float | None = None) -> tuple[float, dict]:
    """Clipped-surrogate + clipped-value + entropy objective (minimized)."""
    if value_clip is None:
        value_clip = clip_epsilon
    obs = batch["obs"]

    mean, _ = params.pi.forward(obs)
    log_prob = gaussian_log_prob(mean, params.log_std, batch["actions"])
    ratio = np.exp(log_prob - batch["log_probs"])
    adv = batch["advantages"]
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv
    policy_loss = -np.minimum(surr1, surr2).mean()

    values, _ = params.vf.forward(obs)
    values = values[:, 0]
    v_old = batch["values"]
    returns = batch["returns"]
    v_clipped = v_old + np.clip(values - v_old, -value_clip, value_clip)
    value_loss = np.maximum((values - returns) ** 2, (v_clipped - returns) ** 2).mean()

    entropy = np.sum(params.log_std + 0.5 * (_LOG_2PI + 1.0))
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "clip_fraction": float(np.mean(surr2 < surr1)),
        "approx_kl": float(np.mean(batch["log_probs"] - log_prob)),
    }
    return float(loss), stats


def policy_gradient(params: PolicyParams, batch: dict, clip_epsilon: float,
                    value_coef: float, entropy_coef: float,
                    value_clip: float | None = None) -> tuple[np.ndarray, dict]:
    """Exact reverse-mode gradient of ppo_loss, flattened like flatten_params."""
    if value_clip is None:
        value_clip = clip_epsilon
    obs = batch["obs"]
    actions = batch["actions"]
    n = obs.shape[0]

    mean, pi_cache = params.pi.forward(obs)
    std = np.exp(params.log_std)
    z = (actions - mean) / std
    log_prob = -0.5 * np.sum(z ** 2, axis=1) - np.sum(params.log_std) \
        - 0.5 * _LOG_2PI * actions.shape[1]
    ratio = np.exp(log_prob - batch["log_probs"])
    adv = batch["advantages"]
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv
    active = surr1 <= surr2  # gradient flows only through the unclipped branch

    # d(policy_loss)/d(log_prob) per sample
    dl_dlogp = -(active * ratio * adv) / n
    # d(log_prob)/d(mean) = z / std ; d(log_prob)/d(log_std) = z^2 - 1
    grad_mean = dl_dlogp[:, None] * (z / std)
    pi_grads = params.pi.backward(pi_cache, grad_mean)
    grad_log_std = (dl_dlogp[:, None] * (z ** 2 - 1.0)).sum(axis=0)
    grad_log_std -= entropy_coef  # entropy bonus: d(-c_e * sum(log_std))/d(log_std)

    values, vf_cache = params.vf.forward(obs)
    values = values[:, 0]
    v_old = batch["values"]
    returns = batch["returns"]
    dv = values - v_old
    v_clipped = v_old + np.clip(dv, -value_clip, value_clip)
    e1 = values - returns
    e2 = v_clipped - returns
    use_raw = e1 ** 2 >= e2 ** 2
    passthrough = np.abs(dv) < value_clip
    grad_v = np.where(use_raw, 2.0 * e1, 2.0 * e2 * passthrough)
    grad_v = grad_v * (value_coef / n)
    vf_grads = params.vf.backward(vf_cache, grad_v[:, None])

    flat = np.concatenate(
        [w.ravel() for w in pi_grads.weights] + list(pi_grads.biases)
        + [w.ravel() for w in vf_grads.weights] + list(vf_grads.biases)
        + [grad_log_std])

    _, stats = _loss_stats(ratio, surr1, surr2, e1, e2, params, value_coef, entropy_coef,
                           log_prob, batch)
    return flat, stats


def _loss_stats(ratio, surr1, surr2, e1, e2, params, value_coef, entropy_coef,
                log_prob, batch) -> tuple[float, dict]:
    policy_loss = -np.minimum(surr1, surr2).mean()
    value_loss = np.maximum(e1 ** 2, e2 ** 2).mean()
    entropy = np.sum(params.log_std + 0.5 * (_LOG_2PI + 1.0))
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "clip_fraction": float(np.mean(surr2 < surr1)),
        "approx_kl": float(np.mean(batch["log_probs"] - log_prob)),
    }
    return float(loss), stats


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: PolicyParams, normalizer: Normalizer,
                    meta: dict | None = None) -> None:
    """Deterministic single-file container: JSON header + raw float64 arrays."""
    arrays: list[tuple[str, np.ndarray]] = []
    for i, (w, b) in enumerate(zip(params.pi.weights, params.pi.biases)):
        arrays.append((f"pi_w{i}", w))
        arrays.append((f"pi_b{i}", b))
    for i, (w, b) in enumerate(zip(params.vf.weights, params.vf.biases)):
        arrays.append((f"vf_w{i}", w))
        arrays.append((f"vf_b{i}", b))
    arrays.append(("log_std", params.log_std))
    arrays.append(("norm_mean", normalizer.mean))
    arrays.append(("norm_var", normalizer.var))
    arrays.append(("norm_count", np.array([normalizer.count])))
    header = {
        "format_version": 1,
        "meta": meta or {},
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, Normalizer, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a grasplab checkpoint")
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        arrays[name] = arr.astype(float)
        offset += size * 8
    pi_layers = sum(1 for k in arrays if k.startswith("pi_w"))
    vf_layers = sum(1 for k in arrays if k.startswith("vf_w"))
    pi = MLP([arrays[f"pi_w{i}"] for i in range(pi_layers)],
             [arrays[f"pi_b{i}"] for i in range(pi_layers)])
    vf = MLP([arrays[f"vf_w{i}"] for i in range(vf_layers)],
             [arrays[f"vf_b{i}"] for i in range(vf_layers)])
    params = PolicyParams(pi, vf, arrays["log_std"])
    normalizer = Normalizer(arrays["norm_mean"], arrays["norm_var"],
                            float(arrays["norm_count"][0]))
    return params, normalizer, header["meta"]


def config_digest(config: dict) -> str:
    """Stable digest of a JSON-serializable config for checkpoint metadata."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]
