"""Point estimators for measures of variability.

Every metric is evaluated on a discrete law: either the empirical measure of
a (possibly weighted) sample or an exact atom distribution. Both routes go
through the same sorted-support kernels so their conventions cannot drift
apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import DegenerateScaleError, InvalidInputError

# slack used when comparing cumulative probabilities with a quantile level
_CDF_TOL = 1e-12


class Metric(str, Enum):
    VARIANCE = "variance"
    GINI_DEV = "gini_dev"
    MEAN_DEV = "mean_dev"
    MEAN_MEDIAN_DEV = "mean_median_dev"
    STD = "std"
    IQR = "iqr"
    CVAR_DEV = "cvar_dev"
    SEMI_VAR = "semi_var"
    SEMI_STD = "semi_std"


class QuantileMethod(str, Enum):
    LOWER = "lower"  # inf{z : F(z) >= alpha}
    LINEAR = "linear"  # numpy-style linear interpolation


# (coherent, pg_unbiased, pg_double_sampling)
_TABLE = {
    Metric.CVAR_DEV: (True, False, False),
    Metric.GINI_DEV: (True, True, False),
    Metric.IQR: (False, False, False),
    Metric.MEAN_DEV: (True, True, True),
    Metric.MEAN_MEDIAN_DEV: (False, False, False),
    Metric.VARIANCE: (False, True, True),
    Metric.STD: (True, True, True),
    Metric.SEMI_VAR: (False, True, True),
    Metric.SEMI_STD: (True, True, True),
}

DEFAULT_ALPHA = {Metric.CVAR_DEV: 0.2, Metric.IQR: 0.9}


@dataclass(frozen=True)
class MetricKind:
    """A metric plus its level parameter.

    ``alpha`` is required for IQR (in [1/2, 1)) and CVaR deviation (in (0, 1)).
    ``upper_tail`` switches CVaR deviation to CVaR^up(X) - E[X]; it exists for
    the coherence checks only and is never used as a training target.
    """

    kind: Metric
    alpha: Optional[float] = None
    upper_tail: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Metric(self.kind))
        a = self.alpha
        if self.kind is Metric.IQR:
            if a is None or not (0.5 <= a < 1.0):
                raise InvalidInputError(f"IQR needs alpha in [0.5, 1), got {a!r}")
        elif self.kind is Metric.CVAR_DEV:
            if a is None or not (0.0 < a < 1.0):
                raise InvalidInputError(f"CVaR deviation needs alpha in (0, 1), got {a!r}")
        elif a is not None and not (0.0 < a < 1.0):
            raise InvalidInputError(f"alpha must lie in (0, 1), got {a!r}")
        if self.upper_tail and self.kind is not Metric.CVAR_DEV:
            raise InvalidInputError("upper_tail only applies to cvar_dev")

    @classmethod
    def default(cls, kind) -> "MetricKind":
        kind = Metric(kind)
        return cls(kind, DEFAULT_ALPHA.get(kind))

    @property
    def coherent(self) -> bool:
        return _TABLE[self.kind][0]

    @property
    def pg_unbiased(self) -> bool:
        return _TABLE[self.kind][1]

    @property
    def pg_double_sampling(self) -> bool:
        return _TABLE[self.kind][2]

    def __str__(self):
        if self.alpha is None:
            return self.kind.value
        return f"{self.kind.value}:{self.alpha:g}"


@dataclass(frozen=True)
class SampleBatch:
    """Scalar samples with optional non-negative weights."""

    values: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0:
            raise InvalidInputError("empty batch")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("batch contains NaN or Inf")
        object.__setattr__(self, "values", v)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape != v.shape:
                raise InvalidInputError("weights and values differ in length")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise InvalidInputError("weights must be finite and non-negative")
            if w.sum() <= 0:
                raise InvalidInputError("weights sum to zero")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.values.size

    @property
    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.values.size, 1.0 / self.values.size)
        return self.weights / self.weights.sum()

    @property
    def uniform(self) -> bool:
        w = self.weights
        return w is None or bool(np.all(w == w[0]))


def as_batch(values, weights=None) -> SampleBatch:
    if isinstance(values, SampleBatch):
        if weights is not None:
            return SampleBatch(values.values, weights)
        return values
    return SampleBatch(values, weights)


# -- quantiles ---------------------------------------------------------------


def _sorted_support(x, p):
    order = np.argsort(x, kind="stable")
    return x[order], p[order]


def _lower_quantile_sorted(xs, cum, alpha):
    k = int(np.searchsorted(cum, alpha - _CDF_TOL, side="left"))
    return xs[min(k, xs.size - 1)]


def _check_level(alpha):
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError(f"quantile level must lie in (0, 1), got {alpha!r}")


def empirical_quantile(values, alpha: float, qmethod=QuantileMethod.LOWER) -> float:
    """Quantile of an unweighted sample.

    LOWER returns the smallest sample z with F_n(z) >= alpha; LINEAR matches
    ``numpy.quantile``'s default interpolation.
    """
    batch = as_batch(values)
    _check_level(alpha)
    x = batch.values
    if QuantileMethod(qmethod) is QuantileMethod.LINEAR:
        return float(np.quantile(x, alpha))
    xs = np.sort(x)
    n = xs.size
    k = math.ceil(alpha * n - 1e-9)
    return float(xs[max(k, 1) - 1])


def weighted_quantile(values, weights, alpha: float) -> float:
    """Importance-weighted quantile by interpolation on the cumulative weights.

    Samples are sorted, normalised cumulative weights are attached to each
    sorted sample (inclusive), and ``alpha`` is linearly interpolated on that
    grid. Levels below the first cumulative weight clamp to the minimum.
    """
    if weights is None:
        raise InvalidInputError("weighted_quantile needs weights")
    batch = as_batch(values, weights)
    _check_level(alpha)
    xs, ps = _sorted_support(batch.values, batch.probs)
    cum = np.cumsum(ps)
    return float(np.interp(alpha, cum, xs))


def quantile(values, alpha: float, weights=None, qmethod=QuantileMethod.LOWER) -> float:
    """Dispatch between the unweighted and weighted quantile conventions.

    Equal weights are treated as unweighted so that unit IS ratios reproduce
    the plain estimators exactly.
    """
    batch = as_batch(values, weights)
    if batch.uniform:
        return empirical_quantile(batch.values, alpha, qmethod)
    _check_level(alpha)
    if QuantileMethod(qmethod) is QuantileMethod.LINEAR:
        return weighted_quantile(batch.values, batch.weights, alpha)
    xs, ps = _sorted_support(batch.values, batch.probs)
    return float(_lower_quantile_sorted(xs, np.cumsum(ps), alpha))


# -- kernels on a discrete law ------------------------------------------------


def _gini(xs, ps):
    # half the mean absolute difference between two independent draws
    below = np.cumsum(ps) - ps
    return float(max(np.sum(ps * xs * (2.0 * below + ps - 1.0)), 0.0))


def _cvar_lower(xs, cum, alpha):
    prev = np.concatenate(([0.0], cum[:-1]))
    mass = np.clip(np.minimum(cum, alpha) - prev, 0.0, None)
    return float(np.dot(mass, xs) / alpha)


def _cvar_upper(xs, cum, alpha):
    prev = np.concatenate(([0.0], cum[:-1]))
    mass = np.clip(cum - np.maximum(prev, alpha), 0.0, None)
    return float(np.dot(mass, xs) / (1.0 - alpha))


def _metric_on_law(kind: MetricKind, x, p, quantile_fn) -> float:
    xs, ps = _sorted_support(x, p)
    mu = float(np.dot(ps, xs))
    dev = xs - mu
    k = kind.kind
    if k in (Metric.VARIANCE, Metric.STD):
        v = float(np.dot(ps, dev * dev))
        return v if k is Metric.VARIANCE else math.sqrt(v)
    if k in (Metric.SEMI_VAR, Metric.SEMI_STD):
        down = np.minimum(dev, 0.0)
        v = float(np.dot(ps, down * down))
        return v if k is Metric.SEMI_VAR else math.sqrt(v)
    if k is Metric.GINI_DEV:
        return _gini(xs, ps)
    if k is Metric.MEAN_DEV:
        return float(np.dot(ps, np.abs(dev)))
    if k is Metric.MEAN_MEDIAN_DEV:
        med = quantile_fn(0.5)
        return float(np.dot(ps, np.abs(xs - med)))
    if k is Metric.IQR:
        return float(max(quantile_fn(kind.alpha) - quantile_fn(1.0 - kind.alpha), 0.0))
    if k is Metric.CVAR_DEV:
        cum = np.cumsum(ps)
        cum[-1] = 1.0
        if kind.upper_tail:
            return max(_cvar_upper(xs, cum, kind.alpha) - mu, 0.0)
        return max(mu - _cvar_lower(xs, cum, kind.alpha), 0.0)
    raise InvalidInputError(f"unknown metric {k!r}")


def _coerce_kind(kind) -> MetricKind:
    if isinstance(kind, MetricKind):
        return kind
    return MetricKind(Metric(kind))


def empirical_metric(kind, values, weights=None, qmethod=QuantileMethod.LOWER) -> float:
    """Metric of the (weighted) empirical distribution of ``values``.

    Variance is the population variance of the empirical measure, Gini
    deviation includes the diagonal pairs, and CVaR deviation integrates the
    empirical quantile function over the lower ``alpha`` tail.
    """
    kind = _coerce_kind(kind)
    batch = as_batch(values, weights)
    return _metric_on_law(
        kind,
        batch.values,
        batch.probs,
        lambda a: quantile(batch.values, a, batch.weights, qmethod),
    )


def exact_metric_on_atoms(kind, dist, qmethod=QuantileMethod.LOWER) -> float:
    """Metric of an atom distribution (anything with ``values`` and ``probs``)."""
    kind = _coerce_kind(kind)
    x = np.asarray(dist.values, dtype=float)
    p = np.asarray(dist.probs, dtype=float)
    if x.size == 0 or x.shape != p.shape:
        raise InvalidInputError("malformed atom distribution")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise InvalidInputError(f"atom probabilities must sum to 1, got {p.sum()!r}")
    qm = QuantileMethod(qmethod)

    def q(a):
        xs, ps = _sorted_support(x, p)
        cum = np.cumsum(ps)
        if qm is QuantileMethod.LINEAR:
            return float(np.interp(a, cum, xs))
        return float(_lower_quantile_sorted(xs, cum, a))

    return _metric_on_law(kind, x, p, q)


# -- density estimation -------------------------------------------------------


def silverman_bandwidth(values) -> float:
    x = as_batch(values).values
    if x.size < 2:
        raise InvalidInputError("KDE needs at least two samples")
    sd = float(np.std(x, ddof=1))
    if not sd > 0.0:
        raise DegenerateScaleError("zero sample variance, KDE bandwidth undefined")
    return sd * (0.75 * x.size) ** (-0.2)


def kde_density_at(values, point):
    """Gaussian KDE with the one-dimensional Silverman bandwidth.

    ``point`` may be a scalar or an array; the return matches its shape.
    """
    x = as_batch(values).values
    h = silverman_bandwidth(x)
    pt = np.asarray(point, dtype=float)
    z = (pt[..., None] - x) / h
    dens = np.exp(-0.5 * z * z).sum(axis=-1) / (x.size * h * math.sqrt(2.0 * math.pi))
    return float(dens) if dens.ndim == 0 else dens
