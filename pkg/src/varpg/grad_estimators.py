"""Policy-gradient estimators for the mean and the nine variability metrics.

All estimators work on trajectory-level statistics: the return ``R_i`` of
each trajectory and its score vector ``omega_i`` (sum over time of the
gradient of log pi). Every variability estimator is linear in the scores,
``grad = sum_i c_i * omega_i``, and returns the coefficients ``c`` alongside
the gradient so callers can form per-trajectory contributions.

Optional importance-sampling ratios ``rho`` weight each expectation; inner
(nested) expectations such as leave-one-out means are self-normalised. With
``rho`` absent the ratios are taken as exactly one, so unit ratios reproduce
the plain estimators bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateScaleError, InvalidInputError
from .risk_metrics import (
    Metric,
    MetricKind,
    QuantileMethod,
    kde_density_at,
    quantile,
)

log = logging.getLogger(__name__)

_SCALE_TOL = 1e-12


@dataclass
class GradientBatch:
    """Per-trajectory returns and score vectors.

    ``step_scores``/``rewards_to_go`` hold per-step data for the REINFORCE
    mean term; ``is_ratios`` are already-clipped importance ratios.
    """

    returns: np.ndarray
    scores: np.ndarray
    is_ratios: Optional[np.ndarray] = None
    step_scores: Optional[Sequence[np.ndarray]] = None
    rewards_to_go: Optional[Sequence[np.ndarray]] = None

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=float).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=float)
        n = self.returns.size
        if self.scores.ndim != 2 or self.scores.shape[0] != n:
            raise InvalidInputError(
                f"scores must have shape (n, d) with n={n}, got {self.scores.shape}"
            )
        if n < 1:
            raise InvalidInputError("empty gradient batch")
        if not (np.all(np.isfinite(self.returns)) and np.all(np.isfinite(self.scores))):
            raise InvalidInputError("non-finite returns or scores")
        if self.is_ratios is not None:
            r = np.asarray(self.is_ratios, dtype=float).reshape(-1)
            if r.size != n:
                raise InvalidInputError("is_ratios length differs from batch size")
            if not np.all(np.isfinite(r)) or np.any(r <= 0):
                raise InvalidInputError("IS ratios must be finite and positive")
            self.is_ratios = r

    @property
    def n(self) -> int:
        return self.returns.size

    @property
    def param_dim(self) -> int:
        return self.scores.shape[1]

    @property
    def rho(self) -> np.ndarray:
        if self.is_ratios is None:
            return np.ones(self.n)
        return self.is_ratios

    def subset(self, idx) -> "GradientBatch":
        idx = np.asarray(idx)
        return GradientBatch(
            self.returns[idx],
            self.scores[idx],
            None if self.is_ratios is None else self.is_ratios[idx],
        )


@dataclass
class GradientEstimate:
    grad: np.ndarray
    aux: dict = field(default_factory=dict)
    # grad == coef @ scores for score-linear estimators
    coef: Optional[np.ndarray] = None
    # grad == per_trajectory.mean(axis=0)
    per_trajectory: Optional[np.ndarray] = None


@dataclass(frozen=True)
class DoubleSamplingSplit:
    set_a: np.ndarray
    set_b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.set_a, dtype=int)
        b = np.asarray(self.set_b, dtype=int)
        if a.size == 0 or b.size == 0:
            raise InvalidInputError("double-sampling sets must be non-empty")
        if np.unique(np.concatenate([a, b])).size != a.size + b.size:
            raise InvalidInputError("double-sampling sets overlap")
        object.__setattr__(self, "set_a", a)
        object.__setattr__(self, "set_b", b)

    def check_covers(self, n: int):
        # sets are disjoint, so covering range(n) is a size and bounds check
        lo = min(self.set_a.min(), self.set_b.min())
        hi = max(self.set_a.max(), self.set_b.max())
        if self.set_a.size + self.set_b.size != n or lo < 0 or hi >= n:
            raise InvalidInputError(f"split does not partition range({n})")


def _estimate(batch: GradientBatch, coef: np.ndarray, **aux) -> GradientEstimate:
    grad = coef @ batch.scores
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient estimate")
    per_traj = (batch.n * coef)[:, None] * batch.scores
    return GradientEstimate(grad, aux, coef, per_traj)


def _loo_deviation(returns: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """R_i minus the self-normalised mean of the other returns.

    Computed from pairwise differences so identical returns give exactly zero.
    """
    diff = returns[None, :] - returns[:, None]  # diff[i, j] = R_j - R_i
    w = np.broadcast_to(rho, diff.shape).copy()
    np.fill_diagonal(w, 0.0)
    return -(w * diff).sum(axis=1) / w.sum(axis=1)


def _weighted_moments(returns, rho):
    p = rho / rho.sum()
    mu = float(np.dot(p, returns))
    return p, mu


# -- mean term ------------------------------------------------------------------


def grad_mean_reinforce(batch: GradientBatch, baseline_values, gamma: float) -> GradientEstimate:
    """REINFORCE with baseline: mean over trajectories of
    sum_t gamma^t (R_{i,t} - V(s_{i,t})) grad log pi(a_{i,t}|s_{i,t})."""
    if batch.step_scores is None or batch.rewards_to_go is None:
        raise InvalidInputError("grad_mean_reinforce needs per-step scores and rewards-to-go")
    if len(baseline_values) != batch.n:
        raise InvalidInputError("one baseline array per trajectory is required")
    per_traj = np.zeros((batch.n, batch.param_dim))
    for i, (sc, rtg, v) in enumerate(zip(batch.step_scores, batch.rewards_to_go, baseline_values)):
        sc = np.asarray(sc, dtype=float).reshape(-1, batch.param_dim)
        rtg = np.asarray(rtg, dtype=float)
        v = np.asarray(v, dtype=float)
        if not (sc.shape[0] == rtg.size == v.size):
            raise InvalidInputError(f"trajectory {i}: misaligned per-step arrays")
        disc = gamma ** np.arange(rtg.size)
        per_traj[i] = (disc * (rtg - v)) @ sc
    return GradientEstimate(per_traj.mean(axis=0), {}, None, per_traj)


def grad_mean_plain(batch: GradientBatch, idx=None) -> GradientEstimate:
    """(1/n) sum_i rho_i R_i omega_i, optionally restricted to ``idx``."""
    coef = np.zeros(batch.n)
    sel = np.arange(batch.n) if idx is None else np.asarray(idx)
    coef[sel] = batch.rho[sel] * batch.returns[sel] / sel.size
    return _estimate(batch, coef)


# -- double sampling --------------------------------------------------------------


def split_double_sampling(n: int, rng: np.random.Generator) -> DoubleSamplingSplit:
    """Uniformly random partition into halves of sizes floor(n/2), ceil(n/2)."""
    if n < 2:
        raise InvalidInputError("double sampling needs at least two trajectories")
    perm = rng.permutation(n)
    k = n // 2
    return DoubleSamplingSplit(np.sort(perm[:k]), np.sort(perm[k:]))


def _require_split(batch, split, min_size=1):
    if split is None:
        raise InvalidInputError("this estimator needs a double-sampling split")
    split.check_covers(batch.n)
    if split.set_a.size < min_size or split.set_b.size < min_size:
        raise InvalidInputError(f"each split set needs at least {min_size} trajectories")


# -- variance family ------------------------------------------------------------


def grad_variance(batch: GradientBatch, split: DoubleSamplingSplit) -> GradientEstimate:
    """grad E[R^2] - 2 E[R] grad E[R] with E[R] taken from set B."""
    _require_split(batch, split)
    a, b = split.set_a, split.set_b
    rho, R = batch.rho, batch.returns
    mean_b = float(np.dot(rho[b], R[b]) / b.size)
    coef = np.zeros(batch.n)
    coef[a] = (rho[a] * R[a] ** 2 - 2.0 * mean_b * rho[a] * R[a]) / a.size
    return _estimate(batch, coef, mean_b=mean_b)


def grad_std(batch: GradientBatch, split: DoubleSamplingSplit) -> GradientEstimate:
    p, mu = _weighted_moments(batch.returns, batch.rho)
    var = float(np.dot(p, (batch.returns - mu) ** 2))
    if var <= _SCALE_TOL:
        raise DegenerateScaleError(f"return variance {var:.3g} too small for STD gradient")
    est = grad_variance(batch, split)
    scale = 2.0 * np.sqrt(var)
    return _estimate(batch, est.coef / scale, variance=var, **est.aux)


def grad_semivar(batch: GradientBatch, split: DoubleSamplingSplit) -> GradientEstimate:
    """Downside semi-variance gradient with leave-one-out means inside set A."""
    _require_split(batch, split, min_size=2)
    a, b = split.set_a, split.set_b
    rho, R = batch.rho, batch.returns
    gap = -_loo_deviation(R[a], rho[a])  # y_i - R_i
    below = gap >= 0.0
    coef = np.zeros(batch.n)
    coef[a] = rho[a] * gap**2 * below / a.size
    slope = float(np.sum(rho[a] * 2.0 * gap * below) / a.size)
    coef[b] += slope * rho[b] * R[b] / b.size
    return _estimate(batch, coef, downside_slope=slope)


def grad_semistd(batch: GradientBatch, split: DoubleSamplingSplit) -> GradientEstimate:
    p, mu = _weighted_moments(batch.returns, batch.rho)
    down = np.minimum(batch.returns - mu, 0.0)
    sv = float(np.dot(p, down * down))
    if sv <= _SCALE_TOL:
        raise DegenerateScaleError(f"semi-variance {sv:.3g} too small for Semi-STD gradient")
    est = grad_semivar(batch, split)
    return _estimate(batch, est.coef / (2.0 * np.sqrt(sv)), semi_variance=sv, **est.aux)


# -- L1 family ------------------------------------------------------------------


def _upper_bound(batch, upper_bound):
    return float(batch.returns.max()) if upper_bound is None else float(upper_bound)


def grad_gini(batch: GradientBatch, upper_bound: Optional[float] = None) -> GradientEstimate:
    """Unbiased Gini-deviation gradient.

    eta_i = 2 * mean_{j != i} max(R_j, R_i) - (b + R_i), with ``b`` the batch
    maximum unless a fixed ``upper_bound`` is supplied. Only a constant ``b``
    keeps the estimator exactly unbiased; the batch maximum is the practical
    plug-in used for training.
    """
    n = batch.n
    if n < 2:
        raise InvalidInputError("Gini gradient needs at least two trajectories")
    R, rho = batch.returns, batch.rho
    b = _upper_bound(batch, upper_bound)
    pair_max = np.maximum(R[None, :], R[:, None])
    w = np.broadcast_to(rho, pair_max.shape).copy()
    np.fill_diagonal(w, 0.0)
    inner = (w * pair_max).sum(axis=1) / w.sum(axis=1)
    eta = 2.0 * inner - (b + R)
    return _estimate(batch, rho * eta / n, b=b)


def grad_mean_dev(batch: GradientBatch, split: DoubleSamplingSplit) -> GradientEstimate:
    """Mean-deviation gradient: |eta| weighted scores on set A minus the mean
    sign times grad E[R] from set B."""
    _require_split(batch, split, min_size=2)
    a, b = split.set_a, split.set_b
    rho, R = batch.rho, batch.returns
    eta = _loo_deviation(R[a], rho[a])
    coef = np.zeros(batch.n)
    coef[a] = rho[a] * np.abs(eta) / a.size
    mean_sign = float(np.sum(rho[a] * np.sign(eta)) / a.size)
    coef[b] -= mean_sign * rho[b] * R[b] / b.size
    return _estimate(batch, coef, mean_sign=mean_sign)


def grad_mmd(
    batch: GradientBatch,
    qmethod=QuantileMethod.LOWER,
    upper_bound: Optional[float] = None,
) -> GradientEstimate:
    """Mean-median deviation gradient (biased, consistent).

    (1/n) sum_i rho_i [(2q - R_i - b) 1{R_i <= q} - (b - R_i) 1{R_i >= q}] omega_i
    with q the (IS-weighted) empirical median. A sample equal to q enters
    both indicator terms.
    """
    n = batch.n
    if n < 2:
        raise InvalidInputError("MMD gradient needs at least two trajectories")
    R, rho = batch.returns, batch.rho
    q = quantile(R, 0.5, rho, qmethod)
    b = _upper_bound(batch, upper_bound)
    low = (2.0 * q - R - b) * (R <= q)
    high = (b - R) * (R >= q)
    coef = 0.5 * (2.0 / n) * rho * (low - high)
    return _estimate(batch, coef, median=q, b=b)


# -- quantile family ------------------------------------------------------------


def grad_iqr(batch: GradientBatch, alpha: float, qmethod=QuantileMethod.LOWER) -> GradientEstimate:
    """Inter-quantile range gradient with KDE-estimated densities at both quantiles."""
    if not (0.5 <= alpha < 1.0):
        raise InvalidInputError(f"IQR alpha must lie in [0.5, 1), got {alpha!r}")
    n = batch.n
    if n < 3:
        raise InvalidInputError("IQR gradient needs at least three trajectories")
    R, rho = batch.returns, batch.rho
    q_hi = quantile(R, alpha, rho, qmethod)
    q_lo = quantile(R, 1.0 - alpha, rho, qmethod)
    f_hi, f_lo = kde_density_at(R, [q_hi, q_lo])
    if not (f_hi > _SCALE_TOL and f_lo > _SCALE_TOL):
        raise DegenerateScaleError("KDE density vanished at an IQR quantile")
    coef = rho * ((R <= q_lo) / f_lo - (R <= q_hi) / f_hi) / n
    return _estimate(batch, coef, q_hi=q_hi, q_lo=q_lo, kde_hi=float(f_hi), kde_lo=float(f_lo))


def grad_cvar_dev(batch: GradientBatch, alpha: float, qmethod=QuantileMethod.LOWER) -> GradientEstimate:
    """Lower-tail CVaR deviation: grad E[R] minus the CVaR likelihood-ratio
    estimator (1/(alpha n)) sum rho_i (R_i - q) 1{R_i <= q} omega_i."""
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError(f"CVaR alpha must lie in (0, 1), got {alpha!r}")
    n = batch.n
    if n < 2:
        raise InvalidInputError("CVaR deviation gradient needs at least two trajectories")
    R, rho = batch.returns, batch.rho
    q = quantile(R, alpha, rho, qmethod)
    tail = (R - q) * (R <= q) / (alpha * n)
    coef = rho * R / n - rho * tail
    return _estimate(batch, coef, quantile=q)


# -- dispatch -------------------------------------------------------------------


def variability_gradient(
    kind: MetricKind,
    batch: GradientBatch,
    *,
    rng: Optional[np.random.Generator] = None,
    split: Optional[DoubleSamplingSplit] = None,
    qmethod=QuantileMethod.LOWER,
    upper_bound: Optional[float] = None,
    annihilate_constant: bool = True,
) -> GradientEstimate:
    """Gradient of ``kind`` at the sampling policy.

    A batch whose returns are all identical carries no dispersion signal: the
    metric sits at its minimum of zero, so with ``annihilate_constant`` the zero
    vector is returned for every kind before any estimator runs. Switch it off
    to get the raw estimator, whose expectation is the exact gradient for the
    unbiased kinds (zeroing constant batches shifts that expectation).
    Raises DegenerateScaleError for STD, Semi-STD and IQR when their
    normalisers vanish.
    """
    if not isinstance(kind, MetricKind):
        kind = MetricKind.default(kind)
    R = batch.returns
    if annihilate_constant and R.max() == R.min():
        coef = np.zeros(batch.n)
        return GradientEstimate(np.zeros(batch.param_dim), {"constant_returns": True}, coef,
                                np.zeros_like(batch.scores))
    if kind.pg_double_sampling and split is None:
        if rng is None:
            raise InvalidInputError(f"{kind} needs a split or an rng to draw one")
        split = split_double_sampling(batch.n, rng)
    k = kind.kind
    if k is Metric.VARIANCE:
        return grad_variance(batch, split)
    if k is Metric.STD:
        return grad_std(batch, split)
    if k is Metric.SEMI_VAR:
        return grad_semivar(batch, split)
    if k is Metric.SEMI_STD:
        return grad_semistd(batch, split)
    if k is Metric.MEAN_DEV:
        return grad_mean_dev(batch, split)
    if k is Metric.GINI_DEV:
        return grad_gini(batch, upper_bound)
    if k is Metric.MEAN_MEDIAN_DEV:
        return grad_mmd(batch, qmethod, upper_bound)
    if k is Metric.IQR:
        return grad_iqr(batch, kind.alpha, qmethod)
    if k is Metric.CVAR_DEV:
        return grad_cvar_dev(batch, kind.alpha, qmethod)
    raise InvalidInputError(f"unknown metric {k!r}")


def gradient_variance(per_trajectory: np.ndarray) -> float:
    """Across-trajectory variance of gradient contributions, averaged over coordinates."""
    if per_trajectory.shape[0] < 2:
        return 0.0
    return float(np.var(per_trajectory, axis=0, ddof=1).mean())


def combined_objective_gradient(
    kind: MetricKind,
    batch: GradientBatch,
    lam: float,
    *,
    mean: Optional[GradientEstimate] = None,
    baseline_values=None,
    gamma: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    split: Optional[DoubleSamplingSplit] = None,
    qmethod=QuantileMethod.LOWER,
    upper_bound: Optional[float] = None,
    annihilate_constant: bool = True,
) -> GradientEstimate:
    """Ascent direction mean_grad - lam * variability_grad.

    ``mean`` may carry a precomputed mean-term estimate (REINFORCE or PPO);
    otherwise REINFORCE with ``baseline_values`` is used when per-step data is
    present, and the plain score-function estimator when it is not. A
    degenerate normaliser drops the variability term for this update.
    """
    if lam < 0:
        raise InvalidInputError(f"lambda must be non-negative, got {lam!r}")
    if mean is None:
        if batch.step_scores is not None:
            if baseline_values is None:
                baseline_values = [np.zeros(len(r)) for r in batch.rewards_to_go]
            mean = grad_mean_reinforce(batch, baseline_values, gamma)
        else:
            mean = grad_mean_plain(batch)
    aux = {"mean_norm": float(np.linalg.norm(mean.grad)), "variability_norm": 0.0,
           "degenerate": False}
    if lam == 0:
        grad = mean.grad.copy()
        per = mean.per_trajectory
        aux["variability"] = None
    else:
        try:
            var = variability_gradient(kind, batch, rng=rng, split=split, qmethod=qmethod,
                                       upper_bound=upper_bound,
                                       annihilate_constant=annihilate_constant)
        except DegenerateScaleError as exc:
            log.warning("variability term skipped: %s", exc)
            aux["degenerate"] = True
            grad = mean.grad.copy()
            per = mean.per_trajectory
        else:
            aux["variability_norm"] = float(np.linalg.norm(var.grad))
            aux.update({f"var_{k}": v for k, v in var.aux.items()})
            grad = mean.grad - lam * var.grad
            per = None
            if mean.per_trajectory is not None:
                per = mean.per_trajectory - lam * var.per_trajectory
    if per is not None:
        aux["grad_variance"] = gradient_variance(per)
    return GradientEstimate(grad, aux, None, per)
