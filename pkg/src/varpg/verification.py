"""Property and oracle suites behind ``varpg verify``.

Each suite returns a list of Check records. The suites are sized to finish in
a few minutes in total; the acceptance tests run the same checks at full
scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .grad_estimators import variability_gradient
from .oracle import (
    AtomDistribution,
    TabularMDP,
    UniformMixture,
    bernoulli_bandit,
    estimator_bias_curve,
    finite_diff_gradient,
    gini_double_sum,
    gini_quantile_form,
    loglog_slope,
    mmd_direct,
    mmd_quantile_form,
    sample_bandit_batches,
)
from .risk_metrics import Metric, MetricKind, empirical_metric, exact_metric_on_atoms


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)  # numpy bools are not JSON serializable

    def as_dict(self):
        return {"suite": self.suite, "name": self.name, "passed": self.passed, "detail": self.detail}


BANDIT_THETA = np.array([0.2, -0.3])
BIAS_THETA = np.array([0.3, -0.2])
BIAS_SIZES = (8, 32, 128, 512)


def bias_bandit(resolution: int = 20000) -> TabularMDP:
    """Two continuous arms: U[0, 1] and an even mixture of U[-1, 0] and U[1, 3]."""
    arms = [UniformMixture(((1.0, 0.0, 1.0),)),
            UniformMixture(((0.5, -1.0, 0.0), (0.5, 1.0, 3.0)))]
    return TabularMDP.bandit(arms, resolution=resolution)


# metrics whose estimator is claimed unbiased, with estimator options;
# Gini uses the known reward bound 1 for b
UNBIASED_CASES = (
    (Metric.GINI_DEV, {"upper_bound": 1.0}),
    (Metric.MEAN_DEV, {}),
    (Metric.VARIANCE, {}),
    (Metric.SEMI_VAR, {}),
)


def unbiasedness_check(kind, n: int, reps: int, seed: int = 0, **kw):
    """Mean of the raw estimator on the Bernoulli bandit against the oracle.

    Returns (oracle, mean, standard error), per coordinate.
    """
    kind = MetricKind.default(kind) if not isinstance(kind, MetricKind) else kind
    env = bernoulli_bandit()
    oracle = finite_diff_gradient(kind, env, BANDIT_THETA)
    rng = np.random.default_rng(seed)
    grads = np.array([
        variability_gradient(kind, b, rng=rng, annihilate_constant=False, **kw).grad
        for b in sample_bandit_batches(env, BANDIT_THETA, n, reps, rng)
    ])
    return oracle, grads.mean(axis=0), grads.std(axis=0, ddof=1) / math.sqrt(reps)


def suite_estimators(reps: int = 20000, bias_reps: int = 10000) -> List[Check]:
    out = []
    for kind, kw in UNBIASED_CASES:
        for n in (4, 8):
            oracle, mean, se = unbiasedness_check(kind, n, reps, **kw)
            z = np.abs(mean - oracle) / se
            out.append(Check("estimators", f"unbiased {kind.value} n={n}", bool(np.all(z <= 3.0)),
                             f"max |z| = {z.max():.2f}"))
    env = bias_bandit()
    for kind in (Metric.MEAN_MEDIAN_DEV, Metric.CVAR_DEV):
        ok, detail = bias_rate_check(kind, env, bias_reps)
        out.append(Check("estimators", f"bias rate {kind.value}", ok, detail))
    return out


def bias_rate_check(kind, env, reps, seed: int = 1):
    rows = estimator_bias_curve(kind, env, BIAS_THETA, BIAS_SIZES, reps, np.random.default_rng(seed))
    errs = [r.error for r in rows]
    slope = loglog_slope(BIAS_SIZES, errs)
    mono = all(rows[i + 1].error <= rows[i].error + 2.0 * math.hypot(rows[i].se, rows[i + 1].se)
               for i in range(len(rows) - 1))
    ok = -1.0 <= slope <= -0.25 and mono
    detail = f"slope {slope:.3f}, errors " + ", ".join(f"{e:.3g}" for e in errs)
    return ok, detail


# -- coherence ------------------------------------------------------------------

COHERENT_KINDS = (
    MetricKind(Metric.GINI_DEV),
    MetricKind(Metric.MEAN_DEV),
    MetricKind(Metric.MEAN_MEDIAN_DEV),
    MetricKind(Metric.STD),
    MetricKind(Metric.SEMI_STD),
    MetricKind(Metric.CVAR_DEV, 0.2, upper_tail=True),
)

# sub-additivity witness for the inter-quantile range at alpha = 0.75:
# IQR(X) = IQR(Y) = 0 but IQR(X + Y) = 1
IQR_WITNESS = (np.array([0.0, 0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0, 0.0]))
IQR_WITNESS_KIND = MetricKind(Metric.IQR, 0.75)


def random_paired_batch(rng: np.random.Generator, max_n: int = 40):
    n = int(rng.integers(2, max_n + 1))
    scale = float(rng.choice([1e-2, 1.0, 10.0]))
    x = rng.normal(0.0, scale, n)
    y = rng.standard_t(3, n) * scale
    if rng.random() < 0.3:
        x = np.round(x, 1)  # ties
    return x, y


def coherence_violations(kind: MetricKind, x, y, c: float, a: float, tol: float = 1e-9):
    """Names of the axioms violated on one paired sample (empty if none)."""
    f = lambda v: empirical_metric(kind, v)
    fx, fy = f(x), f(y)
    scale = max(1.0, abs(fx), abs(fy), abs(c), abs(a) * max(1.0, fx))
    bad = []
    if abs(f(x + c) - fx) > tol * scale:
        bad.append("location")
    if abs(f(a * x) - a * fx) > tol * scale:
        bad.append("homogeneity")
    if f(x + y) > fx + fy + tol * scale:
        bad.append("subadditivity")
    return bad


def suite_coherence(trials: int = 1000, seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    out = []
    failures: Dict[str, List[str]] = {str(k): [] for k in COHERENT_KINDS}
    glasser_bad = 0
    for _ in range(trials):
        x, y = random_paired_batch(rng)
        c = float(rng.normal(0, 10))
        a = float(rng.uniform(0.01, 10))
        for k in COHERENT_KINDS:
            failures[str(k)] += coherence_violations(k, x, y, c, a)
        m = int(rng.integers(1, 51))
        dist = AtomDistribution(rng.normal(size=m), rng.dirichlet(np.ones(m)))
        std = exact_metric_on_atoms(MetricKind(Metric.STD), dist)
        gd = exact_metric_on_atoms(MetricKind(Metric.GINI_DEV), dist)
        if std < math.sqrt(3.0) * gd - 1e-9:
            glasser_bad += 1
    for k in COHERENT_KINDS:
        bad = failures[str(k)]
        out.append(Check("coherence", f"axioms {k}", not bad,
                         "ok" if not bad else f"{len(bad)} violations: {sorted(set(bad))}"))
    x = np.array([0.0, 1.0, 3.0])
    v1, v2 = empirical_metric(Metric.VARIANCE, x), empirical_metric(Metric.VARIANCE, 2 * x)
    out.append(Check("coherence", "variance homogeneity witness", abs(v2 - 2 * v1) > 1e-6,
                     f"Var(2X) = {v2:.4g} = 4 Var(X), not 2 Var(X) = {2 * v1:.4g}"))
    wx, wy = IQR_WITNESS
    ix, iy = empirical_metric(IQR_WITNESS_KIND, wx), empirical_metric(IQR_WITNESS_KIND, wy)
    ixy = empirical_metric(IQR_WITNESS_KIND, wx + wy)
    out.append(Check("coherence", "IQR sub-additivity witness", ixy > ix + iy + 1e-9,
                     f"IQR(X+Y) = {ixy:.4g} > IQR(X) + IQR(Y) = {ix + iy:.4g}"))
    out.append(Check("coherence", "STD >= sqrt(3) GD on atoms", glasser_bad == 0,
                     f"{glasser_bad} violations in {trials}"))
    return out


# -- oracle -----------------------------------------------------------------------


def suite_oracle(trials: int = 500, seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    out = []
    gd_err = mmd_err = 0.0
    for _ in range(trials):
        m = int(rng.integers(1, 51))
        vals = rng.normal(size=m)
        if rng.random() < 0.3:
            vals = np.round(vals, 1)
        dist = AtomDistribution(vals, rng.dirichlet(np.ones(m)))
        gd = exact_metric_on_atoms(MetricKind(Metric.GINI_DEV), dist)
        gd_err = max(gd_err, abs(gd - gini_double_sum(dist)), abs(gd - gini_quantile_form(dist)))
        mmd = exact_metric_on_atoms(MetricKind(Metric.MEAN_MEDIAN_DEV), dist)
        mmd_err = max(mmd_err, abs(mmd - mmd_direct(dist)), abs(mmd - mmd_quantile_form(dist)))
    out.append(Check("oracle", "GD quantile form", gd_err <= 1e-9, f"max error {gd_err:.2e}"))
    out.append(Check("oracle", "MMD quantile form", mmd_err <= 1e-9, f"max error {mmd_err:.2e}"))

    env = bernoulli_bandit()
    p = 1.0 / (1.0 + math.exp(BANDIT_THETA[0] - BANDIT_THETA[1]))
    dp = p * (1 - p) * np.array([-1.0, 1.0])
    closed = {
        Metric.GINI_DEV: (1 - 2 * p) * dp,
        Metric.VARIANCE: (1 - 2 * p) * dp,
        Metric.MEAN_DEV: 2 * (1 - 2 * p) * dp,
        Metric.SEMI_VAR: (2 * p - 3 * p * p) * dp,
    }
    for kind, expect in closed.items():
        fd = finite_diff_gradient(kind, env, BANDIT_THETA)
        err = float(np.abs(fd - expect).max())
        out.append(Check("oracle", f"finite differences {kind.value}", err <= 1e-6, f"max error {err:.2e}"))

    # Monte Carlo mean of the bandit return against the exact law
    dist = AtomDistribution([0.0, 1.0], [1 - p, p])
    draws = np.array([b.returns[0] for b in sample_bandit_batches(env, BANDIT_THETA, 1, 20000, rng)])
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    z = abs(draws.mean() - dist.mean()) / se
    out.append(Check("oracle", "Monte Carlo mean vs exact law", z <= 3.0, f"|z| = {z:.2f}"))
    return out


SUITES: Dict[str, Callable[[], List[Check]]] = {
    "estimators": suite_estimators,
    "coherence": suite_coherence,
    "oracle": suite_oracle,
}


def run_suite(name: str) -> List[Check]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn()]
    return SUITES[name]()
