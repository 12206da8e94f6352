import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varpg.errors import DegenerateScaleError, InvalidInputError
from varpg.grad_estimators import (
    DoubleSamplingSplit,
    GradientBatch,
    combined_objective_gradient,
    grad_cvar_dev,
    grad_gini,
    grad_iqr,
    grad_mean_dev,
    grad_mean_plain,
    grad_mean_reinforce,
    grad_mmd,
    grad_semistd,
    grad_semivar,
    grad_std,
    grad_variance,
    gradient_variance,
    split_double_sampling,
    variability_gradient,
)
from varpg.oracle import TabularMDP, UniformMixture, bernoulli_bandit, finite_diff_gradient, sample_bandit_batches
from varpg.risk_metrics import Metric, MetricKind, QuantileMethod

ALL_KINDS = [MetricKind.default(m) for m in Metric]
SCALE_KINDS = {Metric.STD, Metric.SEMI_STD, Metric.IQR}


def make_batch(returns, d=3, seed=0, rho=None):
    rng = np.random.default_rng(seed)
    R = np.asarray(returns, dtype=float)
    return GradientBatch(R, rng.normal(size=(R.size, d)), rho)


@st.composite
def batches(draw, min_n=4, max_n=12, with_rho=False):
    n = draw(st.integers(min_n, max_n))
    pool = st.sampled_from([-3.0, 0.0, 1.0, 2.5]) if draw(st.booleans()) else st.floats(-50, 50)
    R = np.array(draw(st.lists(pool, min_size=n, max_size=n)))
    S = np.array(draw(st.lists(st.floats(-5, 5), min_size=3 * n, max_size=3 * n))).reshape(n, 3)
    rho = None
    if with_rho:
        rho = np.array(draw(st.lists(st.floats(0.1, 10), min_size=n, max_size=n)))
    return GradientBatch(R, S, rho)


def fixed_split(n):
    k = n // 2
    return DoubleSamplingSplit(np.arange(k), np.arange(k, n))


# -- batch and split types ------------------------------------------------------


def test_batch_validation():
    with pytest.raises(InvalidInputError):
        GradientBatch([1.0, 2.0], np.zeros((3, 2)))
    with pytest.raises(InvalidInputError):
        GradientBatch([1.0, np.inf], np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        GradientBatch([1.0, 2.0], np.zeros((2, 2)), [1.0, 0.0])
    b = make_batch([1.0, 2.0, 3.0], d=5)
    assert (b.n, b.param_dim) == (3, 5)
    assert np.array_equal(b.rho, np.ones(3))


def test_split_validation():
    with pytest.raises(InvalidInputError):
        DoubleSamplingSplit([0, 1], [1, 2])
    with pytest.raises(InvalidInputError):
        DoubleSamplingSplit([], [0])
    with pytest.raises(InvalidInputError):
        split_double_sampling(1, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        DoubleSamplingSplit([0], [5]).check_covers(2)


def test_split_sizes():
    rng = np.random.default_rng(0)
    s = split_double_sampling(2, rng)
    assert s.set_a.size == 1 and s.set_b.size == 1
    s = split_double_sampling(5, rng)
    assert {s.set_a.size, s.set_b.size} == {2, 3}
    assert sorted(np.concatenate([s.set_a, s.set_b]).tolist()) == list(range(5))


def test_split_uniform_over_partitions():
    # six ways to pick set A of size 2 out of 4; chi-square with 5 dof
    rng = np.random.default_rng(7)
    parts = {c: 0 for c in itertools.combinations(range(4), 2)}
    draws = 10_000
    for _ in range(draws):
        parts[tuple(split_double_sampling(4, rng).set_a.tolist())] += 1
    expected = draws / 6
    chi2 = sum((c - expected) ** 2 / expected for c in parts.values())
    assert chi2 < 15.086  # 99th percentile of chi-square(5)


# -- mean terms -----------------------------------------------------------------


def test_mean_plain_zeros():
    assert np.all(grad_mean_plain(make_batch([0.0, 0.0, 0.0])).grad == 0)
    b = GradientBatch([1.0, 2.0], np.zeros((2, 3)))
    assert np.all(grad_mean_plain(b).grad == 0)


def test_mean_reinforce_examples():
    sc = [np.array([[1.0, 0.0], [0.0, 2.0]])]
    rtg = [np.array([3.0, 1.0])]
    b = GradientBatch([3.0], np.zeros((1, 2)), step_scores=sc, rewards_to_go=rtg)
    # gamma = 1, V = 0 collapses to sum_t score_t * R_t
    assert np.allclose(grad_mean_reinforce(b, [np.zeros(2)], 1.0).grad, [3.0, 2.0])
    assert np.all(grad_mean_reinforce(b, rtg, 0.9).grad == 0)
    # discounting applies to the second step
    assert np.allclose(grad_mean_reinforce(b, [np.zeros(2)], 0.5).grad, [3.0, 1.0])
    with pytest.raises(InvalidInputError):
        grad_mean_reinforce(make_batch([1.0, 2.0]), [np.zeros(1)] * 2, 1.0)


def test_mean_estimators_match_bandit_oracle():
    env = bernoulli_bandit()
    theta = np.array([0.2, -0.3])
    oracle = finite_diff_gradient(None, env, theta)
    rng = np.random.default_rng(3)
    reps = 100_000
    plain, rf = [], []
    for b in sample_bandit_batches(env, theta, 4, reps, rng):
        plain.append(grad_mean_plain(b).grad)
        if len(rf) < 20_000:
            rb = GradientBatch(b.returns, b.scores, step_scores=[s[None, :] for s in b.scores],
                               rewards_to_go=[np.array([r]) for r in b.returns])
            rf.append(grad_mean_reinforce(rb, [np.array([0.5])] * 4, 1.0).grad)
    for g in (np.array(plain), np.array(rf)):
        se = g.std(axis=0, ddof=1) / math.sqrt(len(g))
        assert np.all(np.abs(g.mean(axis=0) - oracle) <= 3 * se)


# -- hand-evaluated goldens -------------------------------------------------------


def test_gini_two_samples():
    S = np.array([[1.0, 2.0], [5.0, -1.0]])
    est = grad_gini(GradientBatch([0.0, 1.0], S))
    # eta = (1, 0) so the gradient is half the first score
    assert np.allclose(est.grad, 0.5 * S[0])
    assert est.aux["b"] == 1.0


def test_mmd_three_samples():
    S = np.array([[1.0, 0.0], [2.0, 3.0], [0.0, 7.0]])
    est = grad_mmd(GradientBatch([0.0, 1.0, 2.0], S), QuantileMethod.LOWER)
    # q = 1, b = 2: lower factors (0, -1, .), upper factors (., 1, 0); the
    # middle sample sits in both sets and collects -1 - 1
    assert est.aux["median"] == 1.0 and est.aux["b"] == 2.0
    assert np.allclose(est.coef, [0.0, -2.0 / 3.0, 0.0])
    assert np.allclose(est.grad, -2.0 / 3.0 * S[1])


def test_variance_hand_value():
    S = np.array([[1.0], [2.0], [3.0], [4.0]])
    est = grad_variance(GradientBatch([1.0, 2.0, 3.0, 5.0], S), fixed_split(4))
    mean_b = 4.0
    expect = ((1 - 2 * mean_b * 1) * 1 + (4 - 2 * mean_b * 2) * 2) / 2
    assert est.grad[0] == pytest.approx(expect)


def test_mean_dev_hand_value():
    S = np.array([[1.0], [2.0], [3.0], [4.0]])
    est = grad_mean_dev(GradientBatch([0.0, 2.0, 1.0, 3.0], S), fixed_split(4))
    # eta = (-2, 2): |eta| term = (2*1 + 2*2)/2 = 3, mean sign 0
    assert est.grad[0] == pytest.approx(3.0)


def test_semivar_hand_value():
    S = np.array([[1.0], [2.0], [3.0], [4.0]])
    est = grad_semivar(GradientBatch([0.0, 2.0, 1.0, 3.0], S), fixed_split(4))
    # y - R = (2, -2): only sample 0 is below, contributing 4*1/2 = 2;
    # slope = 2*2/2 = 2 times grad E[R] on B = (1*3 + 3*4)/2 = 7.5
    assert est.grad[0] == pytest.approx(2.0 + 2.0 * 7.5)


def test_cvar_dev_hand_value():
    S = np.array([[1.0], [2.0], [3.0], [4.0]])
    est = grad_cvar_dev(GradientBatch([1.0, 2.0, 3.0, 4.0], S), 0.5, QuantileMethod.LOWER)
    mean_term = (1 * 1 + 2 * 2 + 3 * 3 + 4 * 4) / 4
    tail = ((1 - 2) * 1 + 0) / (0.5 * 4)
    assert est.aux["quantile"] == 2.0
    assert est.grad[0] == pytest.approx(mean_term - tail)


def test_iqr_hand_value():
    R = np.array([0.0, 1.0, 2.0, 4.0])
    S = np.eye(4)
    est = grad_iqr(GradientBatch(R, S), 0.75, QuantileMethod.LOWER)
    h = np.std(R, ddof=1) * 3.0 ** -0.2
    kde = lambda x: np.mean(np.exp(-0.5 * ((x - R) / h) ** 2)) / (h * math.sqrt(2 * math.pi))
    # LOWER quantiles at 0.75 and 0.25 are 2 and 0
    expect = ((R <= 0.0) / kde(0.0) - (R <= 2.0) / kde(2.0)) / 4
    assert np.allclose(est.grad, expect)


# -- degenerate inputs ------------------------------------------------------------


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_constant_returns(kind):
    b = make_batch([2.0] * 6)
    rng = np.random.default_rng(0)
    est = variability_gradient(kind, b, rng=rng)
    assert np.all(est.grad == 0)
    raw = lambda: variability_gradient(kind, b, rng=rng, annihilate_constant=False)
    if kind.kind in SCALE_KINDS:
        with pytest.raises(DegenerateScaleError):
            raw()
    elif kind.kind in (Metric.GINI_DEV, Metric.MEAN_DEV, Metric.MEAN_MEDIAN_DEV, Metric.SEMI_VAR):
        assert np.all(raw().grad == 0)


def test_raw_zero_returns():
    b = make_batch([0.0] * 6)
    for kind in ALL_KINDS:
        if kind.kind in SCALE_KINDS:
            continue
        est = variability_gradient(kind, b, rng=np.random.default_rng(0), annihilate_constant=False)
        assert np.all(est.grad == 0)


def test_semivar_pairs_of_zeros():
    b = make_batch([0.0, 0.0, 0.0, 0.0])
    assert np.all(grad_semivar(b, fixed_split(4)).grad == 0)


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_zero_scores(kind):
    b = GradientBatch([0.0, 1.0, 3.0, 4.0, 7.0, 2.0], np.zeros((6, 3)))
    est = variability_gradient(kind, b, rng=np.random.default_rng(0))
    assert np.all(est.grad == 0)


def test_split_size_requirements():
    b = make_batch([0.0, 1.0, 2.0])
    s = DoubleSamplingSplit([0], [1, 2])
    with pytest.raises(InvalidInputError):
        grad_mean_dev(b, s)
    with pytest.raises(InvalidInputError):
        grad_semivar(b, s)
    with pytest.raises(InvalidInputError):
        grad_iqr(make_batch([0.0, 1.0]), 0.9)
    with pytest.raises(InvalidInputError):
        variability_gradient(Metric.VARIANCE, b)


def test_std_semistd_scaling():
    b = make_batch([0.0, 1.0, 5.0, 2.0])
    s = fixed_split(4)
    var = np.var(b.returns)
    assert np.allclose(grad_std(b, s).grad, grad_variance(b, s).grad / (2 * math.sqrt(var)))
    mu = b.returns.mean()
    sv = np.mean(np.minimum(b.returns - mu, 0) ** 2)
    assert np.allclose(grad_semistd(b, s).grad, grad_semivar(b, s).grad / (2 * math.sqrt(sv)))


# -- structural properties ----------------------------------------------------------


def _grad(kind, batch, seed=0):
    try:
        return variability_gradient(kind, batch, rng=np.random.default_rng(seed)).grad
    except DegenerateScaleError:
        return None


@settings(max_examples=150, deadline=None)
@given(batches(), st.sampled_from(ALL_KINDS), st.floats(-4, 4).filter(lambda c: c != 0))
def test_score_linearity(batch, kind, c):
    g = _grad(kind, batch)
    scaled = GradientBatch(batch.returns, c * batch.scores)
    h = _grad(kind, scaled)
    if g is None:
        assert h is None
    else:
        assert np.allclose(h, c * g, rtol=1e-12, atol=1e-12 * (1 + np.abs(g).max()))


@settings(max_examples=150, deadline=None)
@given(batches(), st.sampled_from(ALL_KINDS))
def test_unit_ratios_bit_exact(batch, kind):
    with_rho = GradientBatch(batch.returns, batch.scores, np.ones(batch.n))
    g, h = _grad(kind, batch), _grad(kind, with_rho)
    if g is None:
        assert h is None
    else:
        assert np.array_equal(g, h)


@settings(max_examples=150, deadline=None)
@given(batches(with_rho=True), st.sampled_from(ALL_KINDS))
def test_coef_and_per_trajectory_consistent(batch, kind):
    try:
        est = variability_gradient(kind, batch, rng=np.random.default_rng(1))
    except DegenerateScaleError:
        return
    assert np.all(np.isfinite(est.grad))
    assert np.allclose(est.coef @ batch.scores, est.grad)
    assert np.allclose(est.per_trajectory.mean(axis=0), est.grad)


@settings(max_examples=100, deadline=None)
@given(batches(), st.sampled_from(ALL_KINDS), st.floats(-100, 100))
def test_location_invariance_of_l1_kinds(batch, kind, c):
    # Gini with the batch-max bound, MD and the variance family only see
    # differences of returns; mean-subtracted estimators shift with c
    if kind.kind not in (Metric.GINI_DEV, Metric.MEAN_MEDIAN_DEV):
        return
    g = _grad(kind, batch)
    h = _grad(kind, GradientBatch(batch.returns + c, batch.scores))
    assert np.allclose(g, h, atol=1e-8 * (1 + abs(c)) * (1 + np.abs(batch.scores).sum()))


# -- combined objective ---------------------------------------------------------------


def test_combined_lambda_zero_is_mean():
    b = make_batch([0.0, 1.0, 3.0, 4.0])
    for kind in ALL_KINDS:
        rng = np.random.default_rng(0)
        est = combined_objective_gradient(kind, b, 0.0, rng=rng)
        assert np.array_equal(est.grad, grad_mean_plain(b).grad)
        # no draws were taken from the generator
        assert rng.random() == np.random.default_rng(0).random()


def test_combined_constant_returns_is_mean():
    b = make_batch([1.5] * 6)
    for kind in ALL_KINDS:
        est = combined_objective_gradient(kind, b, 2.0, rng=np.random.default_rng(0))
        assert np.array_equal(est.grad, grad_mean_plain(b).grad)


def test_combined_degenerate_downgrade():
    b = make_batch([1.5] * 6)
    est = combined_objective_gradient(Metric.STD, b, 1.0, rng=np.random.default_rng(0),
                                      annihilate_constant=False)
    assert est.aux["degenerate"]
    assert np.array_equal(est.grad, grad_mean_plain(b).grad)
    with pytest.raises(InvalidInputError):
        combined_objective_gradient(Metric.GINI_DEV, b, -0.1)


def test_combined_diagnostics():
    b = make_batch([0.0, 1.0, 3.0, 4.0, -2.0, 1.0])
    est = combined_objective_gradient(Metric.GINI_DEV, b, 0.5)
    var = grad_gini(b)
    assert np.allclose(est.grad, grad_mean_plain(b).grad - 0.5 * var.grad)
    assert est.aux["variability_norm"] == pytest.approx(np.linalg.norm(var.grad))
    per = grad_mean_plain(b).per_trajectory - 0.5 * var.per_trajectory
    assert est.aux["grad_variance"] == pytest.approx(np.var(per, axis=0, ddof=1).mean())
    assert gradient_variance(per[:1]) == 0.0


# -- IQR direction on a continuous three-arm bandit ----------------------------------


def test_iqr_direction_tracks_oracle():
    # arms spread uniformly around 0, 1 and 2; mixture CDF is piecewise linear
    theta = np.array([0.3, -0.2, 0.1])
    centers = np.array([0.0, 1.0, 2.0])
    env = TabularMDP.bandit([UniformMixture(((1.0, c - 0.5, c + 0.5),)) for c in centers])
    p = np.exp(theta) / np.exp(theta).sum()
    alpha = 0.9

    def arm_cdf(x):
        return np.clip(x - (centers - 0.5), 0.0, 1.0)

    def quant(a):
        grid = np.linspace(-0.5, 2.5, 300_001)
        F = (p[None, :] * arm_cdf(grid[:, None])).sum(axis=1)
        return float(np.interp(a, F, grid))

    def dq(a):
        # implicit differentiation of F(q; theta) = a
        q = quant(a)
        dp = np.diag(p) - np.outer(p, p)  # dp_arm / dtheta_k
        dF = dp @ arm_cdf(q)
        dens = p[np.argmin(np.abs(q - centers))]
        return -dF / dens

    exact = dq(alpha) - dq(1 - alpha)
    rng = np.random.default_rng(11)
    acc = np.zeros(3)
    for b in sample_bandit_batches(env, theta, 64, 100_000, rng):
        acc += grad_iqr(b, alpha, QuantileMethod.LOWER).grad
    cos = acc @ exact / (np.linalg.norm(acc) * np.linalg.norm(exact))
    assert cos > 0.9
