"""Mean-variability REINFORCE and PPO training loops for tabular mazes."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidInputError
from .grad_estimators import GradientBatch, GradientEstimate, combined_objective_gradient
from .risk_metrics import Metric, MetricKind, QuantileMethod, empirical_metric
from .softmax_policy import (
    OptimizerState,
    PolicyParams,
    ValueParams,
    apply_gradient,
    gae_padded,
    trajectory_scores,
)
from .tabular_env import EpisodeBatch, GridMaze, NoiseKind, risk_averse_rate, rollout_batch

# (learning rate, lambda) per noise kind and metric, tuned for the default maze
MAZE_HYPERPARAMS = {
    NoiseKind.GAUSSIAN: {
        Metric.CVAR_DEV: (1e-3, 0.6), Metric.GINI_DEV: (1e-3, 1.0), Metric.IQR: (1e-3, 0.3),
        Metric.MEAN_DEV: (1e-3, 0.8), Metric.MEAN_MEDIAN_DEV: (1e-3, 0.7),
        Metric.VARIANCE: (1e-4, 0.1), Metric.STD: (1e-3, 0.7), Metric.SEMI_VAR: (5e-4, 0.1),
        Metric.SEMI_STD: (1e-3, 1.2),
    },
    NoiseKind.PARETO: {
        Metric.CVAR_DEV: (1e-3, 0.6), Metric.GINI_DEV: (1e-3, 1.3), Metric.IQR: (1e-3, 0.3),
        Metric.MEAN_DEV: (1e-3, 0.9), Metric.MEAN_MEDIAN_DEV: (1e-3, 0.8),
        Metric.VARIANCE: (1e-4, 0.1), Metric.STD: (7e-4, 1.0), Metric.SEMI_VAR: (5e-4, 0.1),
        Metric.SEMI_STD: (1e-3, 1.2),
    },
    NoiseKind.UNIFORM: {
        Metric.CVAR_DEV: (1e-3, 0.7), Metric.GINI_DEV: (1e-4, 1.4), Metric.IQR: (7e-4, 0.3),
        Metric.MEAN_DEV: (1e-3, 0.9), Metric.MEAN_MEDIAN_DEV: (1e-3, 0.8),
        Metric.VARIANCE: (1e-4, 0.1), Metric.STD: (7e-4, 1.0), Metric.SEMI_VAR: (5e-4, 0.1),
        Metric.SEMI_STD: (1e-3, 1.3),
    },
    NoiseKind.HANDCRAFT: {
        Metric.CVAR_DEV: (1e-3, 0.6), Metric.GINI_DEV: (1e-3, 1.3), Metric.IQR: (5e-4, 0.3),
        Metric.MEAN_DEV: (1e-3, 0.8), Metric.MEAN_MEDIAN_DEV: (7e-4, 0.8),
        Metric.VARIANCE: (1e-4, 0.1), Metric.STD: (1e-3, 1.0), Metric.SEMI_VAR: (5e-4, 0.1),
        Metric.SEMI_STD: (1e-3, 1.2),
    },
}


@dataclass(frozen=True)
class TrainConfig:
    metric: MetricKind
    lam: float = 0.0
    iterations: int = 3000
    batch_size: int = 50
    inner_updates: int = 1
    lr_policy: float = 1e-3
    lr_value: Optional[float] = None  # defaults to 10x lr_policy
    gamma: float = 0.999
    is_clip: float = 10.0
    ppo_clip: float = 0.2
    gae_lambda: float = 0.95
    qmethod: QuantileMethod = QuantileMethod.LINEAR
    seed: int = 0
    optimizer: str = "sgd"
    value_minibatch: int = 64

    def __post_init__(self):
        if not isinstance(self.metric, MetricKind):
            object.__setattr__(self, "metric", MetricKind.default(self.metric))
        object.__setattr__(self, "qmethod", QuantileMethod(self.qmethod))
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise InvalidInputError(f"lambda must be a finite non-negative number, got {self.lam}")
        for name in ("iterations", "batch_size", "inner_updates", "value_minibatch"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        if not self.lr_policy > 0 or (self.lr_value is not None and not self.lr_value > 0):
            raise InvalidInputError("learning rates must be positive")
        if not (0 < self.gamma <= 1):
            raise InvalidInputError("gamma must lie in (0, 1]")
        if not self.is_clip >= 1:
            raise InvalidInputError("IS clip must be at least 1")
        if not (0 < self.ppo_clip < 1):
            raise InvalidInputError("PPO clip range must lie in (0, 1)")
        if not (0 <= self.gae_lambda <= 1):
            raise InvalidInputError("GAE lambda must lie in [0, 1]")

    @property
    def value_lr(self) -> float:
        return 10.0 * self.lr_policy if self.lr_value is None else self.lr_value


def maze_defaults(metric, noise=NoiseKind.GAUSSIAN, **overrides) -> TrainConfig:
    """Tuned learning rate and lambda for ``metric`` under ``noise``."""
    kind = metric if isinstance(metric, MetricKind) else MetricKind.default(metric)
    lr, lam = MAZE_HYPERPARAMS[NoiseKind(noise)][kind.kind]
    cfg = TrainConfig(metric=kind, lam=lam, lr_policy=lr)
    return replace(cfg, **overrides)


@dataclass
class IterationLog:
    iteration: int
    return_mean: float
    variability: float
    risk_averse_rate: float
    grad_variance: float
    mean_grad_norm: float
    variability_grad_norm: float
    wall_clock: float
    degenerate: bool = False
    # ascent direction applied at this iteration (last inner epoch for PPO)
    grad: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def record(self) -> dict:
        d = asdict(self)
        d.pop("grad")
        return d


def _check_env(env: GridMaze, cfg: TrainConfig) -> GridMaze:
    if env.gamma != cfg.gamma:
        env = env.with_options(gamma=cfg.gamma)
    return env


def _episode_arrays(policy: PolicyParams, batch: EpisodeBatch, probs=None):
    return trajectory_scores(policy, batch.states, batch.actions, batch.mask, probs=probs)


def reinforce_mean_gradient(policy: PolicyParams, value: ValueParams, batch: EpisodeBatch,
                            gamma: float, probs=None) -> GradientEstimate:
    """(1/n) sum_i sum_t gamma^t (R_{i,t} - V(s_{i,t})) grad log pi, via tabular counts."""
    T = batch.states.shape[1]
    w = (gamma ** np.arange(T))[None, :] * (batch.rewards_to_go - value.upsilon[batch.states])
    per = trajectory_scores(policy, batch.states, batch.actions, batch.mask, weights=w, probs=probs)
    return GradientEstimate(per.mean(axis=0), {}, None, per)


def _log(it, cfg, returns, batch, est, t0) -> IterationLog:
    aux = est.aux
    return IterationLog(
        iteration=it,
        return_mean=float(np.mean(returns)),
        variability=float(empirical_metric(cfg.metric, returns, qmethod=cfg.qmethod)),
        risk_averse_rate=risk_averse_rate(batch),
        grad_variance=float(aux.get("grad_variance", 0.0)),
        mean_grad_norm=aux["mean_norm"],
        variability_grad_norm=aux["variability_norm"],
        wall_clock=time.perf_counter() - t0,
        degenerate=bool(aux.get("degenerate", False)),
        grad=est.grad,
    )


def _sequential_value_fit(value: ValueParams, batch: EpisodeBatch, lr: float):
    u = value.upsilon
    for i in range(batch.n):
        L = int(batch.lengths[i])
        s = batch.states[i, :L]
        err = u[s] - batch.rewards_to_go[i, :L]
        g = np.zeros_like(u)
        np.add.at(g, s, 2.0 * err / L)
        u -= lr * g


def train_reinforce_variability(env: GridMaze, policy: PolicyParams, value: ValueParams,
                                config: TrainConfig) -> Iterator[IterationLog]:
    """Mean-variability REINFORCE with a state-value baseline.

    ``policy`` and ``value`` are updated in place; one IterationLog is yielded
    per update. The baseline only enters the mean term.
    """
    cfg = config
    env = _check_env(env, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.optimizer, cfg.lr_policy)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        batch = rollout_batch(env, policy, cfg.batch_size, rng)
        probs = policy.probs_table()
        mean = reinforce_mean_gradient(policy, value, batch, cfg.gamma, probs)
        gb = GradientBatch(batch.returns, _episode_arrays(policy, batch, probs))
        est = combined_objective_gradient(cfg.metric, gb, cfg.lam, mean=mean, rng=rng,
                                          qmethod=cfg.qmethod)
        policy.theta[:] = apply_gradient(policy, opt, est.grad, ascent=True).theta
        _sequential_value_fit(value, batch, cfg.value_lr)
        yield _log(it, cfg, batch.returns, batch, est, t0)


def is_ratios_clipped(old_policy: PolicyParams, new_policy: PolicyParams, trajectories,
                      zeta: float) -> np.ndarray:
    """min(prod_t pi_new/pi_old, zeta) per trajectory, computed in the log domain."""
    if not zeta >= 1:
        raise InvalidInputError("zeta must be at least 1")
    lp_old = old_policy.log_probs_table()
    lp_new = new_policy.log_probs_table()
    if isinstance(trajectories, EpisodeBatch):
        b = trajectories
        diff = np.where(b.mask, lp_new[b.states, b.actions] - lp_old[b.states, b.actions], 0.0)
        log_rho = diff.sum(axis=1)
    else:
        log_rho = np.array([
            np.sum(lp_new[tr.states, tr.actions] - lp_old[tr.states, tr.actions])
            for tr in trajectories
        ])
    cap = math.log(zeta)
    return np.where(log_rho >= cap, float(zeta), np.exp(np.minimum(log_rho, cap)))


def ppo_clip_gradient(batch: EpisodeBatch, advantages: np.ndarray, old_policy: PolicyParams,
                      policy: PolicyParams, clip_range: float,
                      reduction: str = "steps") -> GradientEstimate:
    """Gradient of the clipped surrogate min(r A, clip(r, 1-eps, 1+eps) A).

    ``reduction='steps'`` averages over all steps; ``'trajectories'`` sums within
    an episode and averages over episodes (the REINFORCE scale).
    """
    lp_old = old_policy.log_probs_table()
    probs = policy.probs_table()
    lp_new = policy.log_probs_table()
    mask = batch.mask
    s, a = batch.states, batch.actions
    ratio = np.where(mask, np.exp(lp_new[s, a] - lp_old[s, a]), 0.0)
    adv = np.where(mask, advantages, 0.0)
    # the min() picks the unclipped branch unless the ratio has left the band
    # in the direction the advantage rewards
    live = np.where(adv > 0, ratio < 1.0 + clip_range, ratio > 1.0 - clip_range)
    w = ratio * adv * live
    per = trajectory_scores(policy, s, a, mask, weights=w, probs=probs)
    if reduction == "steps":
        n_steps = int(batch.lengths.sum())
        per = per * (batch.n / n_steps)
    elif reduction != "trajectories":
        raise InvalidInputError(f"unknown reduction {reduction!r}")
    return GradientEstimate(per.mean(axis=0), {}, None, per)


def _minibatch_value_fit(value: ValueParams, batch: EpisodeBatch, targets, lr, size, rng):
    m = batch.mask
    s_all = batch.states[m]
    y_all = targets[m]
    order = rng.permutation(s_all.size)
    u = value.upsilon
    for start in range(0, order.size, size):
        idx = order[start:start + size]
        s, y = s_all[idx], y_all[idx]
        g = np.zeros_like(u)
        np.add.at(g, s, 2.0 * (u[s] - y) / idx.size)
        u -= lr * g


def train_ppo_variability(env: GridMaze, policy: PolicyParams, value: ValueParams,
                          config: TrainConfig) -> Iterator[IterationLog]:
    """Mean-variability PPO: M inner epochs over each batch with clipped IS ratios
    on the variability term and IS-weighted quantiles."""
    cfg = config
    env = _check_env(env, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.optimizer, cfg.lr_policy)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        batch = rollout_batch(env, policy, cfg.batch_size, rng)
        old = policy.copy()
        values = value.upsilon[batch.states]
        adv = gae_padded(batch.rewards, values, batch.lengths, cfg.gamma, cfg.gae_lambda)
        targets = adv + np.where(batch.mask, values, 0.0)
        for _ in range(cfg.inner_updates):
            probs = policy.probs_table()
            mean = ppo_clip_gradient(batch, adv, old, policy, cfg.ppo_clip, reduction="trajectories")
            rho = is_ratios_clipped(old, policy, batch, cfg.is_clip)
            gb = GradientBatch(batch.returns, _episode_arrays(policy, batch, probs), is_ratios=rho)
            est = combined_objective_gradient(cfg.metric, gb, cfg.lam, mean=mean, rng=rng,
                                              qmethod=cfg.qmethod)
            policy.theta[:] = apply_gradient(policy, opt, est.grad, ascent=True).theta
        for _ in range(cfg.inner_updates):
            _minibatch_value_fit(value, batch, targets, cfg.value_lr, cfg.value_minibatch, rng)
        yield _log(it, cfg, batch.returns, batch, est, t0)
