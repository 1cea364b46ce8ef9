"""CMA-ES search over the 24 keypoint-context parameters.

Adapts a frozen policy to a novel object: the context starts at the object's
bounding-box keypoints and is optimized to maximize the height the object
reaches in one deterministic rollout per candidate. Keypoints are
unconstrained 3-D points during the search (no box structure is enforced).
An elite archive keeps the best candidate ever seen, the initial bounding
box included, so the adapted context is never worse than the starting one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .hand import HandModel, Pose
from .policy import Normalizer, PolicyParams, act
from .ppo import GraspEnv, build_env, start_joints
from .rewards import AblationFlags, RewardWeights
from .rotations import quat_from_axis_angle
from .world import (
    ObjectSpec,
    SimParams,
    compute_keypoints,
    context_from_keypoints,
    initial_world_state,
    keypoints_from_context,
)

logger = logging.getLogger(__name__)

EIGENVALUE_FLOOR = 1e-12


@dataclass
class CmaState:
    """Distribution state plus the standard derived constants for its size."""

    mean: np.ndarray
    step_size: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    population_size: int
    weights: np.ndarray = field(repr=False, default=None)
    mu_eff: float = 0.0
    c_sigma: float = 0.0
    d_sigma: float = 0.0
    c_c: float = 0.0
    c_1: float = 0.0
    c_mu: float = 0.0
    chi_n: float = 0.0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def cma_init(mean: np.ndarray, step_size: float, population_size: int = 5) -> CmaState:
    """Fresh CMA-ES state with the standard constants for this dimension."""
    mean = np.asarray(mean, dtype=float).copy()
    n = mean.shape[0]
    if step_size <= 0.0:
        raise ValueError("step_size must be positive")
    if population_size < 2:
        raise ValueError("population_size must be at least 2")
    lam = population_size
    mu = lam // 2
    raw = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / np.sum(weights ** 2)
    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
    return CmaState(
        mean=mean, step_size=float(step_size), cov=np.eye(n),
        p_sigma=np.zeros(n), p_c=np.zeros(n), generation=0,
        population_size=lam, weights=weights, mu_eff=mu_eff, c_sigma=c_sigma,
        d_sigma=d_sigma, c_c=c_c, c_1=c_1, c_mu=c_mu, chi_n=chi_n)


def _decompose(state: CmaState) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with PD repair by eigenvalue flooring."""
    cov = 0.5 * (state.cov + state.cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if np.any(eigvals < EIGENVALUE_FLOOR):
        logger.warning("covariance repair: flooring %d eigenvalue(s) at generation %d",
                       int(np.sum(eigvals < EIGENVALUE_FLOOR)), state.generation)
        eigvals = np.maximum(eigvals, EIGENVALUE_FLOOR)
        state.cov = (eigvecs * eigvals) @ eigvecs.T
    return eigvals, eigvecs


def cma_ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    """population_size samples from N(mean, step_size^2 * cov)."""
    eigvals, eigvecs = _decompose(state)
    scale = np.sqrt(eigvals)
    z = rng.standard_normal((state.population_size, state.dim))
    return state.mean + state.step_size * (z * scale) @ eigvecs.T


def cma_tell(state: CmaState, population: np.ndarray, fitnesses: np.ndarray) -> CmaState:
    """Rank-based distribution update; higher fitness is better."""
    population = np.asarray(population, dtype=float)
    fitnesses = np.asarray(fitnesses, dtype=float)
    if population.shape != (state.population_size, state.dim):
        raise ValueError("population shape mismatch")
    if fitnesses.shape != (state.population_size,):
        raise ValueError("one fitness per sample required")
    new = CmaState(**{**vars(state)})
    new.generation = state.generation + 1
    if np.all(fitnesses == fitnesses[0]):
        return new  # no ranking information; leave the distribution alone

    order = np.argsort(-fitnesses, kind="stable")
    mu = state.weights.shape[0]
    y = (population[order[:mu]] - state.mean) / state.step_size
    y_w = state.weights @ y

    new.mean = state.mean + state.step_size * y_w

    eigvals, eigvecs = _decompose(state)
    inv_sqrt = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    new.p_sigma = ((1.0 - state.c_sigma) * state.p_sigma
                   + math.sqrt(state.c_sigma * (2.0 - state.c_sigma) * state.mu_eff)
                   * (inv_sqrt @ y_w))
    new.step_size = state.step_size * math.exp(
        (state.c_sigma / state.d_sigma)
        * (np.linalg.norm(new.p_sigma) / state.chi_n - 1.0))

    expected = math.sqrt(1.0 - (1.0 - state.c_sigma) ** (2 * (state.generation + 1)))
    h_sigma = float(np.linalg.norm(new.p_sigma) / expected
                    < (1.4 + 2.0 / (state.dim + 1.0)) * state.chi_n)
    new.p_c = ((1.0 - state.c_c) * state.p_c
               + h_sigma * math.sqrt(state.c_c * (2.0 - state.c_c) * state.mu_eff) * y_w)

    rank_one = np.outer(new.p_c, new.p_c)
    rank_mu = (y * state.weights[:, None]).T @ y
    delta_h = (1.0 - h_sigma) * state.c_c * (2.0 - state.c_c)
    cov = ((1.0 - state.c_1 - state.c_mu) * state.cov
           + state.c_1 * (rank_one + delta_h * state.cov)
           + state.c_mu * rank_mu)
    new.cov = 0.5 * (cov + cov.T)
    return new


def cma_optimize(objective, mean0: np.ndarray, step_size: float, budget: int,
                 population_size: int = 5, seed: int = 0,
                 initial_fitness: float | None = None,
                 ) -> tuple[np.ndarray, float, list[dict]]:
    """Maximize objective(x) under an evaluation budget; returns the elite."""
    state = cma_init(mean0, step_size, population_size)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 555))))
    best_x = np.asarray(mean0, dtype=float).copy()
    best_f = float(objective(best_x)) if initial_fitness is None else float(initial_fitness)
    history: list[dict] = []
    generations = budget // population_size
    if generations < 1:
        raise ValueError("budget must cover at least one generation")
    for gen in range(generations):
        population = cma_ask(state, rng)
        fitnesses = np.array([float(objective(x)) for x in population])
        gen_best = int(np.argmax(fitnesses))
        if fitnesses[gen_best] > best_f:
            best_f = float(fitnesses[gen_best])
            best_x = population[gen_best].copy()
        state = cma_tell(state, population, fitnesses)
        history.append({
            "generation": gen + 1,
            "generation_best": float(fitnesses[gen_best]),
            "elite": best_f,
            "step_size": state.step_size,
        })
    return best_x, best_f, history


# ---------------------------------------------------------------------------
# Context adaptation for a novel object
# ---------------------------------------------------------------------------

@dataclass
class AdaptResult:
    best_context: np.ndarray  # (24,)
    best_fitness: float
    baseline_fitness: float  # fitness of the bounding-box context
    history: list[dict]
    evaluations: int


def rollout_max_height(params: PolicyParams, normalizer: Normalizer, env: GraspEnv,
                       spec: ObjectSpec, context: np.ndarray,
                       palm_height: float = 0.12) -> float:
    """Deterministic mean-action rollout; returns height gained by the object."""
    palm = Pose(spec.pose.position + np.array([0.0, 0.0, spec.half_extents[2] + palm_height]),
                quat_from_axis_angle(np.zeros(3)))
    state0 = initial_world_state(env.model, spec, palm, start_joints(env.demo.style))
    obs = env.reset_to(spec, keypoints_from_context(context), state0)
    done = False
    while not done:
        action, _, _ = act(params, obs, False, normalizer=normalizer)
        obs, _, done, _ = env.step(action)
    return float(env.state.max_object_height - env.state.object_start_height)


def adapt_context(params: PolicyParams, normalizer: Normalizer, spec: ObjectSpec,
                  budget: int, model: HandModel, sim: SimParams,
                  weights: RewardWeights | None = None, style_id: str = "all_fingers",
                  flags: AblationFlags = AblationFlags(), step_size: float = 0.02,
                  population_size: int = 5, seed: int = 0) -> AdaptResult:
    """CMA-ES over the 24 context parameters, fitness = lifted height."""
    if budget < population_size:
        raise ValueError("budget must cover at least one generation")
    env, _ = build_env(model, sim, weights or RewardWeights(), style_id, flags)

    def objective(context: np.ndarray) -> float:
        return rollout_max_height(params, normalizer, env, spec, context)

    mean0 = context_from_keypoints(compute_keypoints(spec))
    baseline = objective(mean0)
    best_x, best_f, history = cma_optimize(objective, mean0, step_size, budget,
                                           population_size, seed,
                                           initial_fitness=baseline)
    if baseline >= best_f:
        best_x, best_f = mean0, baseline
    evaluations = (budget // population_size) * population_size
    return AdaptResult(best_x, best_f, baseline, history, evaluations)
