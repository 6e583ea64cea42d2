import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.tsa.stattools import adfuller

from bctlight import critique as cq
from bctlight.critique import (
    AllCandidatesFailed, CredibleInterval, CritiqueConfig, CritiqueLayer, PriorSpec, SarimaForecaster,
    SarimaOrder, SeriesTooShort, TooFewSamples, adf_statistic, adf_test, credible_interval, difference,
    fit_css, integrate, residual_jacobian, residuals, sample_posterior, sample_posterior_forecasts, select_order, simulate,
)

AR1 = SarimaOrder(1, 0, 0)


def ar1(n, phi=0.6, seed=0, mu=0.0):
    return simulate(AR1, mu, [phi], 1.0, n, np.random.default_rng(seed))


# ---------------------------------------------------------------- ADF


@pytest.mark.parametrize("seed", range(5))
def test_adf_matches_statsmodels(seed):
    rng = np.random.default_rng(seed)
    for y in (rng.normal(size=300), np.cumsum(rng.normal(size=300)), ar1(150, 0.9, seed)):
        k = int(np.floor((len(y) - 1) ** (1 / 3)))
        ref = adfuller(y, maxlag=k, regression="c", autolag=None)
        tau, crit, nobs = adf_statistic(y)
        assert tau == pytest.approx(ref[0], rel=1e-9)
        assert nobs == ref[3]
        assert crit == pytest.approx(ref[4]["5%"], abs=1e-3)


def test_adf_known_processes():
    noise = sum(adf_test(np.random.default_rng(s).normal(size=300)) == "stationary" for s in range(50))
    walk = sum(adf_test(np.cumsum(np.random.default_rng(s).normal(size=300))) == "non_stationary"
               for s in range(50))
    assert noise >= 45 and walk >= 45


def test_adf_degenerate_and_short():
    assert adf_test(np.full(50, 3.0)) == "stationary"
    assert adf_test(np.arange(50.0)) == "stationary"
    with pytest.raises(SeriesTooShort):
        adf_test(np.zeros(19))


# ---------------------------------------------------------------- differencing


def test_difference_examples():
    assert difference([1, 3, 6, 10], 1).tolist() == [2, 3, 4]
    assert difference([1, 3, 6, 10], 0).tolist() == [1, 3, 6, 10]
    assert difference([1, 2, 3, 4, 5, 6], 0, 3, 1).tolist() == [3, 3, 3]
    with pytest.raises(SeriesTooShort):
        difference([1, 2, 3], 0, 3, 1)


@given(st.lists(st.integers(-1000, 1000), min_size=12, max_size=40), st.integers(0, 1),
       st.integers(0, 1), st.integers(2, 4))
def test_difference_integrate_roundtrip(vals, d, D, s):
    y = np.array(vals, dtype=float)
    lag = d + D * s
    w = difference(y, d, s, D)
    assert len(w) == len(y) - lag
    assert np.array_equal(integrate(w, y[:lag], d, s, D), y)


# ---------------------------------------------------------------- order selection


def test_bic_arithmetic():
    assert cq.bic(-100.0, 3, 360) == pytest.approx(217.66, abs=5e-3)


def test_ar1_order_recovered():
    hits = 0
    for seed in range(20):
        sel = select_order(ar1(500, seed=seed), d=0)
        hits += (sel.order.p, sel.order.q) == (1, 0)
    assert hits >= 16


def test_white_noise_prefers_zero_order():
    hits = 0
    for seed in range(20):
        sel = select_order(np.random.default_rng(seed).normal(size=300), d=0)
        hits += (sel.order.p, sel.order.q) == (0, 0)
    assert hits >= 16


def test_ties_prefer_fewer_parameters(monkeypatch):
    def flat(w, order, start=None):
        return cq.SarimaFit(order, 0.0, np.zeros(order.n_coef), 1.0, -50.0, 100)

    monkeypatch.setattr(cq, "fit_css", flat)
    sel = select_order(np.random.default_rng(0).normal(size=100), d=0)
    assert sel.order == SarimaOrder(0, 0, 0)

    def bad(w, order, start=None):
        raise cq.FitFailure("nope")

    monkeypatch.setattr(cq, "fit_css", bad)
    with pytest.raises(AllCandidatesFailed):
        select_order(np.random.default_rng(0).normal(size=100), d=0)


def test_seasonal_candidates_and_random_walk_differenced():
    y = np.cumsum(np.random.default_rng(3).normal(size=300))
    sel = select_order(y, s=20)
    assert sel.order.d == 1 and sel.order.s == 20
    assert len(sel.table) == 64


@given(st.floats(-50, 50), st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_zero_mean_transform_preserves_coefficients(shift, seed):
    order = SarimaOrder(1, 0, 1)
    w = simulate(order, 0.0, [0.5, 0.3], 1.0, 200, np.random.default_rng(seed)) + shift
    a = fit_css(w, order)
    b = fit_css(w - w.mean(), order)
    assert np.allclose(a.coef, b.coef, atol=1e-6)
    assert a.mu - b.mu == pytest.approx(w.mean(), abs=1e-4)
    assert a.sigma2 == pytest.approx(b.sigma2, rel=1e-6)


def test_fit_recovers_arma():
    order = SarimaOrder(1, 0, 1)
    w = simulate(order, 2.0, [0.5, 0.3], 1.0, 3000, np.random.default_rng(0))
    fit = fit_css(w, order)
    assert fit.coef == pytest.approx([0.5, 0.3], abs=0.06)
    assert fit.mu == pytest.approx(2.0, abs=0.15)
    assert fit.sigma2 == pytest.approx(1.0, abs=0.1)


def test_residuals_invert_simulation():
    # oracle: plain loop of the ARMA(1,1) recursion
    rng = np.random.default_rng(1)
    eps = rng.normal(size=50)
    x = np.zeros(50)
    for t in range(50):
        x[t] = (0.4 * x[t - 1] if t else 0) + eps[t] + (-0.2 * eps[t - 1] if t else 0)
    e = residuals(x + 1.5, SarimaOrder(1, 0, 1), 1.5, [0.4, -0.2])
    # residuals start at t=1 with e_0 taken as 0, so they match after the start-up error decays
    assert np.allclose(e[20:], eps[21:], atol=1e-12)


@pytest.mark.parametrize("order,coef", [
    (SarimaOrder(2, 0, 1), [0.3, -0.2, 0.4]),
    (SarimaOrder(1, 0, 1, 1, 0, 1, 4), [0.3, 0.2, -0.4, 0.5]),
    (SarimaOrder(0, 0, 2, 1, 0, 0, 3), [0.3, 0.2, -0.4]),
])
def test_residual_jacobian_matches_central_differences(order, coef):
    w = np.random.default_rng(0).normal(size=80) + 1.0
    theta = np.concatenate([[0.7], coef])
    J = residual_jacobian(w, order, 0.7, coef)
    h = 1e-6
    fd = np.column_stack([(residuals(w, order, *np.split(theta + d, [1])) - residuals(w, order, *np.split(theta - d, [1])))
                          / (2 * h) for d in np.eye(len(theta)) * h])
    assert J.shape == fd.shape
    assert np.abs(J - fd).max() < 1e-8


# ---------------------------------------------------------------- posterior


def test_posterior_recovers_ar1():
    w = ar1(400, seed=4)
    prior = PriorSpec.from_data(w)
    ss = sample_posterior(w, AR1, prior, 1000, np.random.default_rng(0))
    assert abs(ss.coef[:, 0].mean() - 0.6) < 0.15
    assert np.all(ss.sigma2 > 0)
    assert len(ss.mu) == 1000 and ss.converged


def test_laplace_scale_shrinks_draws():
    w = ar1(100, seed=2)
    spreads, means = [], []
    for b in (0.5, 0.05, 0.005, 0.0005):
        prior = PriorSpec.from_data(w, scale_coef=b, loc_coef=0.2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", cq.NonConvergence)
            ss = sample_posterior(w, AR1, prior, 2000, np.random.default_rng(0))
        # concentration at the prior location, not the posterior's own spread
        spreads.append(np.sqrt(np.mean((ss.coef[:, 0] - 0.2) ** 2)))
        means.append(ss.coef[:, 0].mean())
    assert all(a > b for a, b in zip(spreads, spreads[1:]))
    assert abs(means[-1] - 0.2) < 0.01


def test_prior_validation_and_sampling():
    with pytest.raises(ValueError):
        PriorSpec(0, 0, -1, 1)
    with pytest.raises(ValueError):
        PriorSpec(0, 1, 1, -1)
    prior = PriorSpec(0.0, 1.0, -0.5, 0.5, scale_coef=2.0)
    rng = np.random.default_rng(0)
    order = SarimaOrder(2, 0, 1, 1, 0, 1, 4)
    for _ in range(50):
        mu, coef, s2 = prior.sample(order, rng)
        assert -0.5 <= mu <= 0.5 and s2 > 0 and cq.admissible(order, coef)
    assert prior.log_prior(1.0, np.zeros(6)) == -math.inf


def test_forecaster_update_matches_refiltering():
    order = SarimaOrder(1, 1, 1)
    y = np.cumsum(simulate(order.__class__(1, 0, 1), 0.1, [0.5, 0.3], 1.0, 150, np.random.default_rng(0)))
    ss = sample_posterior_forecasts(y, order, n_draws=100, rng=np.random.default_rng(1))
    fc = SarimaForecaster(ss, y)
    extra = [1.0, -2.0, 0.5]
    for v in extra:
        fc.update(v)
    w_ext = difference(np.concatenate([y, extra]), 1)
    for i in (0, 50, 99):
        e = residuals(w_ext, order, ss.mu[i], ss.coef[i])
        assert fc.e[i, -1] == pytest.approx(e[-1], abs=1e-9)
    assert fc.y[-1] == 0.5


def test_interval_width_grows_with_horizon():
    order = SarimaOrder(1, 1, 0)
    y = np.cumsum(ar1(200, 0.5, seed=7))
    ss = sample_posterior_forecasts(y, order, n_draws=2000, rng=np.random.default_rng(0))
    fc = SarimaForecaster(ss, y)
    widths = []
    for h in (1, 2, 4, 8):
        ci = credible_interval(fc.forecast(h, np.random.default_rng(h)))
        widths.append(ci.upper - ci.lower)
    assert all(a <= b for a, b in zip(widths, widths[1:]))


# ---------------------------------------------------------------- gate


def test_credible_interval_normal():
    ci = credible_interval(np.random.default_rng(0).normal(size=10_000))
    assert ci.lower == pytest.approx(-1.96, abs=0.08)
    assert ci.upper == pytest.approx(1.96, abs=0.08)
    assert credible_interval(np.full(50, 2.5)) == CredibleInterval(2.5, 2.5)
    with pytest.raises(TooFewSamples):
        credible_interval(np.zeros(39))


@given(st.lists(st.floats(-1e6, 1e6), min_size=40, max_size=200))
def test_interval_contains_median(xs):
    ci = credible_interval(xs)
    assert ci.lower <= np.median(xs) <= ci.upper


def test_critique_boundaries():
    ci = CredibleInterval(-1.96, 1.96)
    assert cq.critique(0.0, ci) == "accept"
    assert cq.critique(5.0, ci) == "reject"
    assert cq.critique(1.96, ci) == "accept"
    assert cq.critique(-1.96, ci) == "accept"
    with pytest.raises(ValueError):
        CredibleInterval(1, 0)


def test_layer_warmup_and_degenerate_pass_through():
    layer = CritiqueLayer(CritiqueConfig(n_draws=200, burn_in=200))
    rng = np.random.default_rng(0)
    assert layer.refit(np.arange(30.0), 10, rng) is None
    assert layer.judge(1e9, rng) == ("accept", None)
    assert layer.refit(np.full(200, -1.0), 20, rng) is None
    assert layer.judge(1e9, rng)[0] == "accept"


def test_layer_gates_outliers():
    layer = CritiqueLayer(CritiqueConfig(n_draws=500, burn_in=300))
    rng = np.random.default_rng(0)
    y = -3 + ar1(300, seed=5)
    rec = layer.refit(y, 60, rng)
    assert rec is not None and rec.order is not None and rec.n == 300
    assert layer.judge(-3.0, rng)[0] == "accept"
    assert layer.judge(40.0, rng)[0] == "reject"
    layer.observe(-2.5)
    assert layer.interval(rng) is not None
