"""Brute-force ground truth for tiny MDPs.

Exact return laws come from exhaustive enumeration of (trajectory, noise
outcome) paths; metric gradients come from central finite differences of the
exact metric values. Used by the verification suite and the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError, OracleTooLargeError
from .grad_estimators import GradientBatch, variability_gradient
from .risk_metrics import MetricKind, QuantileMethod, exact_metric_on_atoms
from .softmax_policy import PolicyParams
from .tabular_env import (
    GAUSSIAN_SCALE,
    HANDCRAFT_COMPONENTS,
    PARETO_SCALE,
    PARETO_SHAPE,
    UNIFORM_RANGE,
    GridMaze,
    NoiseKind,
    NoiseSpec,
)

DEFAULT_BUDGET = 10**6


class AtomDistribution:
    """Finite law: sorted distinct values with probabilities summing to one."""

    def __init__(self, values, probs, merge_tol: float = 1e-12):
        v = np.asarray(values, dtype=float).reshape(-1)
        p = np.asarray(probs, dtype=float).reshape(-1)
        if v.size == 0 or v.size != p.size:
            raise InvalidInputError("values and probs must be non-empty and aligned")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(p))):
            raise InvalidInputError("atoms must be finite")
        if np.any(p < 0):
            raise InvalidInputError("negative atom probability")
        if abs(p.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"probabilities sum to {p.sum()!r}, not 1")
        order = np.argsort(v, kind="stable")
        v, p = v[order], p[order]
        keep = p > 0
        v, p = v[keep], p[keep]
        # merge neighbours closer than merge_tol
        start = np.concatenate([[True], np.diff(v) > merge_tol])
        groups = np.cumsum(start) - 1
        self.values = v[start]
        self.probs = np.bincount(groups, weights=p)

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"AtomDistribution({len(self)} atoms, mean={self.mean():.6g})"

    @classmethod
    def point(cls, x: float) -> "AtomDistribution":
        return cls([x], [1.0])

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(self.values, size=size, p=self.probs)


@dataclass(frozen=True)
class UniformMixture:
    """Continuous law: mixture of uniform intervals ``(weight, low, high)``."""

    components: Tuple[Tuple[float, float, float], ...]

    def __post_init__(self):
        w = np.array([c[0] for c in self.components], dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError("mixture weights must be non-negative and sum to 1")
        if any(not hi > lo for _, lo, hi in self.components):
            raise InvalidInputError("every interval needs high > low")

    def mean(self) -> float:
        return float(sum(w * 0.5 * (lo + hi) for w, lo, hi in self.components))

    def sample(self, rng: np.random.Generator, size=None):
        w = [c[0] for c in self.components]
        comp = rng.choice(len(w), size=size, p=w)
        lo = np.array([c[1] for c in self.components])[comp]
        hi = np.array([c[2] for c in self.components])[comp]
        return lo + (hi - lo) * rng.random(size)

    def discretize(self, m: int) -> AtomDistribution:
        """Midpoint grid with ``m`` atoms per component."""
        vals, probs = [], []
        mid = (np.arange(m) + 0.5) / m
        for w, lo, hi in self.components:
            vals.append(lo + (hi - lo) * mid)
            probs.append(np.full(m, w / m))
        p = np.concatenate(probs)
        return AtomDistribution(np.concatenate(vals), p / p.sum())


RewardLaw = Union[float, AtomDistribution, UniformMixture]


def _as_atoms(law: RewardLaw, resolution: int) -> AtomDistribution:
    if isinstance(law, AtomDistribution):
        return law
    if isinstance(law, UniformMixture):
        return law.discretize(resolution)
    return AtomDistribution.point(float(law))


class TabularMDP:
    """Finite MDP with deterministic transitions and per-(s, a) reward laws.

    ``next_state[s, a]`` is the successor (negative for "episode over"); ``rewards[(s, a)]`` a constant,
    an AtomDistribution or a UniformMixture. Episodes end on a terminal state
    or after ``horizon`` steps.
    """

    def __init__(self, next_state, rewards: Dict[Tuple[int, int], RewardLaw], start: int,
                 terminal: Sequence[int], gamma: float = 1.0, horizon: int = 1,
                 resolution: int = 2000):
        self.next_state = np.asarray(next_state, dtype=np.int64)
        if self.next_state.ndim != 2:
            raise InvalidInputError("next_state must be an (S, A) table")
        self.n_states, self.n_actions = self.next_state.shape
        self.rewards = dict(rewards)
        self.start = int(start)
        self.terminal = frozenset(int(t) for t in terminal)
        self.gamma = float(gamma)
        self.horizon = int(horizon)
        self.resolution = int(resolution)
        self._atoms = {k: _as_atoms(v, resolution) for k, v in self.rewards.items()}

    @classmethod
    def bandit(cls, arms: Sequence[RewardLaw], resolution: int = 2000) -> "TabularMDP":
        """A single decision state; every arm ends the episode."""
        k = len(arms)
        nxt = np.full((1, k), -1)
        rewards = {(0, a): law for a, law in enumerate(arms)}
        return cls(nxt, rewards, 0, [], gamma=1.0, horizon=1, resolution=resolution)

    @classmethod
    def from_maze(cls, maze: GridMaze, noise_atoms: Optional[AtomDistribution] = None,
                  horizon: Optional[int] = None) -> "TabularMDP":
        """Maze as a finite MDP; the risky cell's law is ``noise_atoms``."""
        if noise_atoms is None:
            noise_atoms = AtomDistribution.point(maze.step_reward)
        rewards = {}
        for s in range(maze.n_states):
            for a in range(maze.n_actions):
                s2 = int(maze.transitions[s, a])
                rewards[(s, a)] = noise_atoms if maze.risky_mask[s2] else maze.step_reward
        return cls(maze.transitions, rewards, maze.start, [maze.goal], gamma=maze.gamma,
                   horizon=maze.max_steps if horizon is None else horizon)

    def reward_atoms(self, s: int, a: int) -> AtomDistribution:
        return self._atoms.get((s, a), AtomDistribution.point(0.0))

    def reward_law(self, s: int, a: int) -> RewardLaw:
        return self.rewards.get((s, a), 0.0)

    def is_single_step_bandit(self) -> bool:
        return self.horizon == 1 or all(
            self.is_terminal(int(s2)) for s2 in self.next_state[self.start]
        )

    def is_terminal(self, s: int) -> bool:
        return s < 0 or s in self.terminal


def _probs(policy, mdp: TabularMDP) -> np.ndarray:
    if isinstance(policy, PolicyParams):
        return policy.probs_table()
    if hasattr(policy, "probs_table"):
        return policy.probs_table()
    table = np.asarray(policy, dtype=float)
    if table.ndim == 1:
        table = table.reshape(mdp.n_states, mdp.n_actions)
    return table


def enumerate_return_distribution(mdp: TabularMDP, policy, horizon: Optional[int] = None,
                                  budget: int = DEFAULT_BUDGET) -> AtomDistribution:
    """Exact law of the discounted return by exhaustive path expansion."""
    probs = _probs(policy, mdp)
    H = mdp.horizon if horizon is None else int(horizon)
    values, weights = [], []
    count = 0
    # stack of (state, t, probability, return so far, discount)
    stack = [(mdp.start, 0, 1.0, 0.0, 1.0)]
    while stack:
        s, t, pr, ret, disc = stack.pop()
        if mdp.is_terminal(s) or t >= H:
            values.append(ret)
            weights.append(pr)
            count += 1
            if count > budget:
                raise OracleTooLargeError(f"more than {budget} paths to enumerate")
            continue
        for a in range(mdp.n_actions):
            pa = probs[s, a]
            if pa <= 0.0:
                continue
            atoms = mdp.reward_atoms(s, a)
            if count + len(stack) + atoms.values.size > budget:
                raise OracleTooLargeError(f"more than {budget} paths to enumerate")
            s2 = int(mdp.next_state[s, a])
            for r, pr_r in zip(atoms.values, atoms.probs):
                stack.append((s2, t + 1, pr * pa * pr_r, ret + disc * r, disc * mdp.gamma))
    w = np.array(weights)
    return AtomDistribution(values, w / w.sum())


def _metric_value(kind, dist, qmethod):
    if kind is None:
        return dist.mean()
    return exact_metric_on_atoms(kind, dist, qmethod)


def finite_diff_gradient(metric: Optional[MetricKind], env: TabularMDP, theta, h: float = 1e-5,
                         qmethod=QuantileMethod.LOWER, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Central differences of the exact metric (or the mean when ``metric`` is None)."""
    if metric is not None and not isinstance(metric, MetricKind):
        metric = MetricKind.default(metric)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        vals = []
        for sgn in (1.0, -1.0):
            th = theta.copy()
            th[k] += sgn * h
            pol = PolicyParams(th, env.n_states, env.n_actions)
            dist = enumerate_return_distribution(env, pol, budget=budget)
            vals.append(_metric_value(metric, dist, qmethod))
        grad[k] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


def sample_bandit_batch(env: TabularMDP, theta, n: int, rng: np.random.Generator) -> GradientBatch:
    """n one-step episodes: returns and score vectors onehot(a) - pi at the start state."""
    if not env.is_single_step_bandit():
        raise InvalidInputError("sample_bandit_batch needs a one-step MDP")
    pol = PolicyParams(np.asarray(theta, dtype=float), env.n_states, env.n_actions)
    pi = pol.probs_table()[env.start]
    A = env.n_actions
    acts = np.minimum((rng.random(n)[:, None] >= np.cumsum(pi)).sum(axis=1), A - 1)
    returns = np.empty(n)
    for a in range(A):
        sel = acts == a
        k = int(sel.sum())
        if k:
            law = env.reward_law(env.start, a)
            if isinstance(law, (AtomDistribution, UniformMixture)):
                returns[sel] = law.sample(rng, k)
            else:
                returns[sel] = float(law)
    scores = np.zeros((n, env.n_states * A))
    base = env.start * A
    scores[:, base:base + A] = -pi
    scores[np.arange(n), base + acts] += 1.0
    return GradientBatch(returns, scores)


def sample_bandit_batches(env: TabularMDP, theta, n: int, reps: int, rng: np.random.Generator):
    """Yield ``reps`` independent bandit batches of size n, drawn in one block."""
    if not env.is_single_step_bandit():
        raise InvalidInputError("sample_bandit_batches needs a one-step MDP")
    pol = PolicyParams(np.asarray(theta, dtype=float), env.n_states, env.n_actions)
    pi = pol.probs_table()[env.start]
    A = env.n_actions
    acts = np.minimum((rng.random((reps, n))[..., None] >= np.cumsum(pi)).sum(axis=-1), A - 1)
    returns = np.empty((reps, n))
    for a in range(A):
        sel = acts == a
        k = int(sel.sum())
        if k:
            law = env.reward_law(env.start, a)
            if isinstance(law, (AtomDistribution, UniformMixture)):
                returns[sel] = law.sample(rng, k)
            else:
                returns[sel] = float(law)
    base = env.start * A
    onehot = np.eye(A)
    for r in range(reps):
        scores = np.zeros((n, env.n_states * A))
        scores[:, base:base + A] = onehot[acts[r]] - pi
        yield GradientBatch(returns[r], scores)


@dataclass
class BiasRow:
    n: int
    error: float
    se: float
    mean_grad: np.ndarray
    se_grad: np.ndarray


def estimator_bias_curve(metric, env: TabularMDP, theta, sizes, reps: int,
                         rng: np.random.Generator, qmethod=QuantileMethod.LOWER,
                         oracle: Optional[np.ndarray] = None, **estimator_kw):
    """Monte Carlo mean of the metric's gradient estimator against the oracle.

    Returns a list of BiasRow with the Euclidean error of the averaged
    estimate and its delta-method standard error.
    """
    kind = metric if isinstance(metric, MetricKind) else MetricKind.default(metric)
    if oracle is None:
        oracle = finite_diff_gradient(kind, env, theta, qmethod=qmethod)
    rows = []
    for n in sizes:
        acc = np.zeros_like(oracle)
        acc2 = np.zeros_like(oracle)
        for batch in sample_bandit_batches(env, theta, int(n), reps, rng):
            g = variability_gradient(kind, batch, rng=rng, qmethod=qmethod, **estimator_kw).grad
            acc += g
            acc2 += g * g
        mean = acc / reps
        var = np.maximum(acc2 / reps - mean * mean, 0.0) * reps / max(reps - 1, 1)
        se = np.sqrt(var / reps)
        diff = mean - oracle
        err = float(np.linalg.norm(diff))
        se_err = float(np.sqrt(np.sum((diff / err) ** 2 * se**2))) if err > 0 else float(np.linalg.norm(se))
        rows.append(BiasRow(int(n), err, se_err, mean, se))
    return rows


def loglog_slope(sizes, errors) -> float:
    """Least-squares slope of log(error) against log(n)."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


# -- quantile representations ----------------------------------------------------


def gini_double_sum(dist: AtomDistribution) -> float:
    """0.5 * sum_ij p_i p_j |x_i - x_j|, O(m^2)."""
    x, p = dist.values, dist.probs
    return 0.5 * float(np.sum(np.outer(p, p) * np.abs(x[:, None] - x[None, :])))


def gini_quantile_form(dist: AtomDistribution) -> float:
    """Integral of F^{-1}(a) (2a - 1) da over (0, 1), exact for atoms."""
    F = np.cumsum(dist.probs)
    F_prev = np.concatenate([[0.0], F[:-1]])
    inc = (F * F - F) - (F_prev * F_prev - F_prev)
    return float(np.dot(dist.values, inc))


def _quantile_integral(dist: AtomDistribution, lo: float, hi: float) -> float:
    """Integral of the left-continuous quantile function over (lo, hi)."""
    F = np.cumsum(dist.probs)
    F_prev = np.concatenate([[0.0], F[:-1]])
    overlap = np.clip(np.minimum(F, hi) - np.maximum(F_prev, lo), 0.0, None)
    return float(np.dot(dist.values, overlap))


def mmd_quantile_form(dist: AtomDistribution) -> float:
    """Upper-half quantile integral minus lower-half quantile integral."""
    return _quantile_integral(dist, 0.5, 1.0) - _quantile_integral(dist, 0.0, 0.5)


def mmd_direct(dist: AtomDistribution) -> float:
    """E|X - m| with m the lower order-statistic median."""
    F = np.cumsum(dist.probs)
    m = dist.values[min(int(np.searchsorted(F, 0.5 - 1e-12)), dist.values.size - 1)]
    return float(np.dot(dist.probs, np.abs(dist.values - m)))


# -- noise discretization ----------------------------------------------------------


def discretize_noise(spec: NoiseSpec, m: int = 64, step_reward: float = -1.0) -> AtomDistribution:
    """Quantile-midpoint atoms for the risky-cell law (oracle runs only)."""
    mid = (np.arange(m) + 0.5) / m
    kind = spec.kind
    if kind is NoiseKind.NONE:
        return AtomDistribution.point(step_reward)
    if kind is NoiseKind.GAUSSIAN:
        nd = NormalDist()
        vals = -1.0 + GAUSSIAN_SCALE * np.array([nd.inv_cdf(u) for u in mid])
    elif kind is NoiseKind.PARETO:
        lomax = (1.0 - mid) ** (-1.0 / PARETO_SHAPE) - 1.0
        vals = -1.0 - (lomax - 1.0 / (PARETO_SHAPE - 1.0)) * PARETO_SCALE
    elif kind is NoiseKind.UNIFORM:
        lo, hi = UNIFORM_RANGE
        vals = lo + (hi - lo) * mid
    else:
        law = UniformMixture(tuple(HANDCRAFT_COMPONENTS))
        return law.discretize(m)
    return AtomDistribution(vals, np.full(m, 1.0 / m))


def bernoulli_bandit(low: float = 0.0, high: float = 1.0) -> TabularMDP:
    """Two arms with deterministic rewards ``low`` and ``high``."""
    return TabularMDP.bandit([low, high])


def softmax_two_arm_p(theta) -> float:
    """Probability of arm 1 under logits theta."""
    t = np.asarray(theta, dtype=float)
    return float(1.0 / (1.0 + math.exp(t[0] - t[1])))
