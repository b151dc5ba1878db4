"""Sampling-based MPC over a latent dynamics model: MPPI, CEM and random shooting."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import V_MAX
from .vision import DimensionMismatch


class EmptyReference(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    N: int = 1000
    M: int = 3
    H: int = 10
    beta: float = 0.7
    sigma: float = 0.1  # per-axis std of the action noise, m/s
    gamma: float = 10.0
    v_max: float = V_MAX
    select: str = "best"  # "best" sampled sequence or final "mean"
    elite_frac: float = 0.1
    cem_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.N, self.M, self.H) < 1:
            raise ValueError("N, M and H must be at least 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.sigma < 0 or self.gamma <= 0 or self.v_max <= 0:
            raise ValueError("sigma must be >= 0, gamma and v_max > 0")
        if self.select not in ("best", "mean"):
            raise ValueError("select must be 'best' or 'mean'")

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class RewardSpec:
    """Goal reaching (``goal`` is z*) or tracking of ``reference`` (L, dim) from step ``offset``.

    ``weights`` optionally scales the per-step terms of the horizon sum; None
    weighs every predicted step equally.
    """

    variant: str
    goal: np.ndarray | None = None
    reference: np.ndarray | None = None
    offset: int = 0
    weights: np.ndarray | None = None

    @classmethod
    def to_goal(cls, z_star, weights=None) -> "RewardSpec":
        return cls("goal", goal=np.asarray(z_star, dtype=float),
                   weights=None if weights is None else np.asarray(weights, dtype=float))

    @classmethod
    def tracking(cls, reference, offset: int = 0) -> "RewardSpec":
        ref = np.asarray(reference, dtype=float)
        if ref.ndim != 2 or len(ref) == 0:
            raise EmptyReference("reference trajectory is empty")
        return cls("tracking", reference=ref, offset=offset)

    def at(self, offset: int) -> "RewardSpec":
        return replace(self, offset=offset)

    def targets(self, H: int) -> np.ndarray:
        """(H, dim) targets for the predicted latents z_{t+1..t+H}."""
        if self.variant == "goal":
            return np.broadcast_to(self.goal, (H, len(self.goal)))
        idx = np.minimum(self.offset + 1 + np.arange(H), len(self.reference) - 1)
        return self.reference[idx]


@dataclass
class Plan:
    actions: np.ndarray  # (H, 2)
    rollout: np.ndarray  # (H, dim)
    reward: float
    diagnostics: list = field(default_factory=list)


def goal_reward(z, z_star) -> float:
    z, z_star = np.asarray(z, float), np.asarray(z_star, float)
    if z.shape != z_star.shape:
        raise DimensionMismatch("latent and goal differ in dimension")
    d = z - z_star
    return -float(d @ d)


def tracking_reward(z_t, reference, t: int) -> float:
    reference = np.asarray(reference, dtype=float)
    if len(reference) == 0:
        raise EmptyReference("reference trajectory is empty")
    if t < 0:
        raise ValueError("t must be non-negative")
    return goal_reward(z_t, reference[min(t, len(reference) - 1)])


class LinearSystem:
    """Analytic dynamics z' = z + B a, used as a planning and training oracle."""

    def __init__(self, B):
        self.B = np.asarray(B, dtype=float)

    @property
    def z_dim(self) -> int:
        return self.B.shape[0]

    def step(self, z, a):
        return np.asarray(z) + np.asarray(a) @ self.B.T

    def rollout_batch(self, z0, z_prev, actions):
        z = np.asarray(z0, float) + np.cumsum(actions @ self.B.T, axis=1)
        return z


def predict(model, z0, z_prev, actions) -> np.ndarray:
    """Batched open-loop predictions (N, H, dim) for ``actions`` (N, H, 2)."""
    if hasattr(model, "rollout_batch"):
        return np.asarray(model.rollout_batch(z0, z_prev, actions), dtype=float)
    from .dynamics import rollout_batch
    return rollout_batch(model, z0, z_prev, actions).astype(float)


def sequence_rewards(rollouts, reward: RewardSpec) -> np.ndarray:
    tgt = reward.targets(rollouts.shape[1])
    if tgt.shape[-1] != rollouts.shape[-1]:
        raise DimensionMismatch("reward target and model latent differ in dimension")
    d = rollouts - tgt
    per_step = np.einsum("nhd,nhd->nh", d, d)
    if reward.weights is not None:
        per_step = per_step * reward.weights[: per_step.shape[1]]
    return -per_step.sum(axis=1)


def clamp(actions, v_max: float) -> np.ndarray:
    """Radial clamp of every action to speed ``v_max`` (in place safe copy)."""
    speed = np.linalg.norm(actions, axis=-1, keepdims=True)
    return actions * np.minimum(1.0, v_max / np.maximum(speed, 1e-300))


def shift(actions) -> np.ndarray:
    """Advance a plan by one step, repeating its final action."""
    actions = np.asarray(actions, dtype=float)
    return np.concatenate([actions[1:], actions[-1:]], axis=0)


def reweight(R, gamma: float) -> np.ndarray:
    """Normalized exp(gamma R) weights, computed with max-subtraction."""
    x = gamma * (np.asarray(R, dtype=float) - np.max(R))
    w = np.exp(x)
    return w / w.sum()


def _rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


def filtered_noise(rng, N: int, H: int, sigma: float, beta: float, a_dim: int = 2) -> np.ndarray:
    """Temporally smoothed Gaussian noise, n_t = beta u_t + (1 - beta) n_{t-1}, n_{-1} = 0."""
    u = rng.standard_normal((N, H, a_dim)) * sigma
    n = np.empty_like(u)
    prev = np.zeros((N, a_dim))
    for t in range(H):
        prev = beta * u[:, t] + (1.0 - beta) * prev
        n[:, t] = prev
    return n


def _initial_mean(warm_start, H: int, a_dim: int = 2) -> np.ndarray:
    if warm_start is None:
        return np.zeros((H, a_dim))
    mu = shift(warm_start)
    if len(mu) != H:
        raise ValueError("warm start length must equal the horizon")
    return mu


def mppi_plan(model, z_hist, reward: RewardSpec, cfg: PlannerConfig, warm_start=None) -> Plan:
    """MPPI with filtered noise.

    ``z_hist`` is (z_t, z_{t-1}). ``warm_start`` is the previous plan's action
    sequence; it is shifted by one step and used as the initial mean.
    """
    z0, z_prev = (np.asarray(z, dtype=float) for z in z_hist)
    mu = _initial_mean(warm_start, cfg.H)
    best = None
    diag = []
    for m in range(cfg.M):
        noise = filtered_noise(_rng(cfg.seed, m), cfg.N, cfg.H, cfg.sigma, cfg.beta)
        acts = clamp(mu[None] + noise, cfg.v_max)
        rolls = predict(model, z0, z_prev, acts)
        R = sequence_rewards(rolls, reward)
        k = int(np.argmax(R))
        if best is None or R[k] > best[2]:
            best = (acts[k].copy(), rolls[k].copy(), float(R[k]))
        w = reweight(R, cfg.gamma)
        mu = np.einsum("n,nhd->hd", w, acts)
        diag.append({"iteration": m, "best": best[2], "mean": float(R.mean()),
                     "ess": float(1.0 / np.sum(w * w))})
    if cfg.select == "mean":
        acts = clamp(mu, cfg.v_max)
        rolls = predict(model, z0, z_prev, acts[None])[0]
        return Plan(acts, rolls, float(sequence_rewards(rolls[None], reward)[0]), diag)
    return Plan(best[0], best[1], best[2], diag)


def cem_plan(model, z_hist, reward: RewardSpec, cfg: PlannerConfig, warm_start=None) -> Plan:
    """Cross-entropy method: refit a diagonal Gaussian to the elite samples each iteration."""
    if not 0.0 < cfg.elite_frac <= 1.0:
        raise ValueError("elite fraction must lie in (0, 1]")
    z0, z_prev = (np.asarray(z, dtype=float) for z in z_hist)
    mu = _initial_mean(warm_start, cfg.H)
    std = np.full_like(mu, cfg.cem_std)
    n_elite = max(1, int(round(cfg.elite_frac * cfg.N)))
    best = None
    diag = []
    for m in range(cfg.M):
        eps = _rng(cfg.seed, m).standard_normal((cfg.N, cfg.H, mu.shape[1]))
        acts = clamp(mu[None] + std[None] * eps, cfg.v_max)
        rolls = predict(model, z0, z_prev, acts)
        R = sequence_rewards(rolls, reward)
        order = np.argsort(-R, kind="stable")
        k = int(order[0])
        if best is None or R[k] > best[2]:
            best = (acts[k].copy(), rolls[k].copy(), float(R[k]))
        elite = acts[order[:n_elite]]
        mu = elite.mean(axis=0)
        std = np.sqrt(np.maximum(elite.var(axis=0), 1e-6))
        diag.append({"iteration": m, "best": best[2], "mean": float(R.mean()),
                     "elite_mean": float(R[order[:n_elite]].mean())})
    if cfg.select == "mean":
        acts = clamp(mu, cfg.v_max)
        rolls = predict(model, z0, z_prev, acts[None])[0]
        return Plan(acts, rolls, float(sequence_rewards(rolls[None], reward)[0]), diag)
    return Plan(best[0], best[1], best[2], diag)


def uniform_actions(rng, shape, v_max: float) -> np.ndarray:
    """Actions uniform over the disc of radius ``v_max``."""
    r = v_max * np.sqrt(rng.random(shape))
    th = rng.uniform(-np.pi, np.pi, shape)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


def shoot_plan(model, z_hist, reward: RewardSpec, cfg: PlannerConfig, warm_start=None) -> Plan:
    """Random shooting over N*M independent uniform sequences."""
    z0, z_prev = (np.asarray(z, dtype=float) for z in z_hist)
    acts = uniform_actions(_rng(cfg.seed, 0), (cfg.N * cfg.M, cfg.H), cfg.v_max)
    rolls = predict(model, z0, z_prev, acts)
    R = sequence_rewards(rolls, reward)
    k = int(np.argmax(R))
    return Plan(acts[k], rolls[k], float(R[k]), [{"iteration": 0, "best": float(R[k]),
                                                  "mean": float(R.mean())}])


PLANNERS = {"mppi": mppi_plan, "cem": cem_plan, "shooting": shoot_plan}


def diagnostics_rows(plan: Plan, step: int | None = None):
    """Flatten per-iteration diagnostics for CSV output."""
    rows = []
    for d in plan.diagnostics:
        row = {"step": step} if step is not None else {}
        row.update(d)
        rows.append(row)
    return rows
