"""Bayesian SARIMA model of a reward stream and the credible-interval gate.

The stream is differenced to stationarity (ADF), a multiplicative
SARIMA(p,d,q)(P,D,Q)_s order is chosen by BIC over conditional-likelihood
fits, posterior draws of the coefficients are produced by an adaptive
Metropolis-within-Gibbs sampler, and one-step forecasts from all draws give
an empirical 95% band. Coefficients are parametrised by the process mean
``mu`` rather than an intercept so that shifting the series shifts only
``mu``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

ADF_CRIT = {  # response-surface coefficients, constant-only regression, one series
    0.01: (-3.43035, -6.5393, -16.786, -79.433),
    0.05: (-2.86154, -2.8903, -4.234, -40.040),
    0.10: (-2.56677, -1.5384, -2.809, 0.0),
}


class SeriesTooShort(ValueError):
    pass


class FitFailure(RuntimeError):
    pass


class AllCandidatesFailed(RuntimeError):
    pass


class TooFewSamples(ValueError):
    pass


class NonConvergence(RuntimeWarning):
    pass


# ---------------------------------------------------------------- stationarity


def adf_statistic(series, lags: int | None = None) -> tuple[float, float, int]:
    """ADF tau statistic, 5% critical value, and number of regression rows."""
    y = np.asarray(series, dtype=float)
    n = len(y)
    k = int(np.floor((n - 1) ** (1 / 3))) if lags is None else lags
    dy = np.diff(y)
    nobs = n - 1 - k
    cols = [y[k:n - 1]] + [dy[k - i:n - 1 - i] for i in range(1, k + 1)] + [np.ones(nobs)]
    X = np.column_stack(cols)
    target = dy[k:]
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ beta
    s2 = resid @ resid / (nobs - X.shape[1])
    cov = s2 * np.linalg.inv(X.T @ X)
    tau = beta[0] / np.sqrt(cov[0, 0])
    return float(tau), adf_critical_value(nobs, 0.05), nobs


def adf_critical_value(nobs: int, significance: float = 0.05) -> float:
    try:
        b = ADF_CRIT[significance]
    except KeyError:
        raise ValueError(f"significance must be one of {sorted(ADF_CRIT)}") from None
    return b[0] + b[1] / nobs + b[2] / nobs ** 2 + b[3] / nobs ** 3


def adf_test(series, significance: float = 0.05) -> str:
    """'stationary' when the unit-root null is rejected at ``significance``.

    A constant series has no unit-root regression to run; it is reported
    stationary because differencing it cannot help.
    """
    y = np.asarray(series, dtype=float)
    if len(y) < 20:
        raise SeriesTooShort(f"ADF needs at least 20 points, got {len(y)}")
    if np.ptp(y) == 0 or np.ptp(np.diff(y)) == 0:
        return "stationary"
    tau, _, nobs = adf_statistic(y)
    return "stationary" if tau < adf_critical_value(nobs, significance) else "non_stationary"


# ---------------------------------------------------------------- differencing


def diff_poly(d: int, s: int = 0, D: int = 0) -> np.ndarray:
    """Coefficients of (1-B)^d (1-B^s)^D in increasing powers of B."""
    poly = np.array([1.0])
    for _ in range(d):
        poly = np.convolve(poly, [1.0, -1.0])
    for _ in range(D):
        seas = np.zeros(s + 1)
        seas[0], seas[s] = 1.0, -1.0
        poly = np.convolve(poly, seas)
    return poly


def difference(series, d: int = 1, s: int = 0, D: int = 0) -> np.ndarray:
    y = np.asarray(series, dtype=float)
    if D and s < 1:
        raise ValueError("seasonal differencing needs s >= 1")
    lag = d + D * s
    if len(y) <= lag:
        raise SeriesTooShort(f"series of length {len(y)} cannot be differenced at total lag {lag}")
    poly = diff_poly(d, s, D)
    return np.convolve(y, poly)[lag:len(y)] if lag else y.copy()


def integrate(diffed, heads, d: int = 1, s: int = 0, D: int = 0) -> np.ndarray:
    """Inverse of :func:`difference` given the first ``d + D*s`` original values."""
    poly = diff_poly(d, s, D)
    lag = len(poly) - 1
    heads = np.asarray(heads, dtype=float)
    if len(heads) != lag:
        raise ValueError(f"need {lag} initial values, got {len(heads)}")
    out = np.concatenate([heads, np.zeros(len(diffed))])
    for t, w in enumerate(diffed, start=lag):
        out[t] = w - poly[1:] @ out[t - 1::-1][:lag]
    return out


# ---------------------------------------------------------------- model


@dataclass(frozen=True, order=True)
class SarimaOrder:
    p: int = 0
    d: int = 0
    q: int = 0
    P: int = 0
    D: int = 0
    Q: int = 0
    s: int = 0

    def __post_init__(self):
        if not (0 <= self.p <= 3 and 0 <= self.q <= 3 and 0 <= self.P <= 1 and 0 <= self.Q <= 1
                and 0 <= self.d <= 1 and 0 <= self.D <= 1 and self.s >= 0):
            raise ValueError(f"order out of range: {self}")
        if (self.P or self.Q or self.D) and self.s < 2:
            raise ValueError("seasonal terms need s >= 2")

    @property
    def n_coef(self) -> int:
        return self.p + self.q + self.P + self.Q

    @property
    def k(self) -> int:
        """Free parameters counted by BIC: coefficients, mean, and noise variance."""
        return self.n_coef + 2

    @property
    def ar_lag(self) -> int:
        return self.p + self.P * self.s

    @property
    def ma_lag(self) -> int:
        return self.q + self.Q * self.s

    def split(self, coef):
        coef = np.asarray(coef)
        i = np.cumsum([self.p, self.q, self.P])
        return coef[..., :i[0]], coef[..., i[0]:i[1]], coef[..., i[1]:i[2]], coef[..., i[2]:]


def ar_poly(order: SarimaOrder, coef) -> np.ndarray:
    """Full AR lag polynomial (1 - sum phi B^i)(1 - Phi B^s); leading 1; batched over leading axes."""
    phi, _, Phi, _ = order.split(coef)
    base = np.concatenate([np.ones(phi.shape[:-1] + (1,)), -phi], axis=-1)
    out = np.zeros(phi.shape[:-1] + (order.ar_lag + 1,))
    out[..., :order.p + 1] = base
    if order.P:
        out[..., order.s:order.s + order.p + 1] -= Phi[..., :1] * base
    return out


def ma_poly(order: SarimaOrder, coef) -> np.ndarray:
    """Full MA lag polynomial (1 + sum theta B^j)(1 + Theta B^s)."""
    _, theta, _, Theta = order.split(coef)
    base = np.concatenate([np.ones(theta.shape[:-1] + (1,)), theta], axis=-1)
    out = np.zeros(theta.shape[:-1] + (order.ma_lag + 1,))
    out[..., :order.q + 1] = base
    if order.Q:
        out[..., order.s:order.s + order.q + 1] += Theta[..., :1] * base
    return out


def _is_stable(poly_tail) -> bool:
    """True when 1 + sum c_i z^i has all roots outside the unit circle (Schur-Cohn step-down)."""
    a = np.asarray(poly_tail, dtype=float)
    while len(a):
        r = a[-1]
        if abs(r) >= 1.0:
            return False
        a = (a[:-1] - r * a[-2::-1]) / (1.0 - r * r) if len(a) > 1 else a[:0]
    return True


def admissible(order: SarimaOrder, coef) -> bool:
    phi, theta, Phi, Theta = order.split(coef)
    return (_is_stable(-phi) and _is_stable(theta)
            and np.all(np.abs(Phi) < 1) and np.all(np.abs(Theta) < 1))


def _constrain(u) -> np.ndarray:
    """Map unconstrained reals to coefficients of a stable AR polynomial (tanh partial autocorrelations)."""
    r = np.tanh(np.asarray(u, dtype=float))
    phi = np.zeros(0)
    for rk in r:
        phi = np.append(phi - rk * phi[::-1], rk)
    return phi


def residuals(w, order: SarimaOrder, mu: float, coef) -> np.ndarray:
    """Conditional residuals, zero pre-sample errors, starting at index ``order.ar_lag``."""
    x = np.asarray(w, dtype=float) - mu
    a = ar_poly(order, coef)
    u = np.convolve(x, a)[order.ar_lag:len(x)] if order.ar_lag else x
    if order.ma_lag:
        return signal.lfilter([1.0], ma_poly(order, coef), u)
    return u


def residual_jacobian(w, order: SarimaOrder, mu: float, coef) -> np.ndarray:
    """Exact derivatives of :func:`residuals` with respect to (mu, coef), one column each.

    Both lag polynomials are affine in every single coefficient, so a unit
    perturbation of the polynomial gives its exact partial derivative.
    """
    coef = np.asarray(coef, dtype=float)
    x = np.asarray(w, dtype=float) - mu
    L, n = order.ar_lag, len(x)
    a, m = ar_poly(order, coef), ma_poly(order, coef)
    e = residuals(w, order, mu, coef)
    J = np.empty((len(e), 1 + order.n_coef))
    J[:, 0] = -a.sum()
    for i in range(order.n_coef):
        step = coef.copy()
        step[i] += 1.0
        if i < order.p or order.p + order.q <= i < order.p + order.q + order.P:
            da = ar_poly(order, step) - a
            J[:, 1 + i] = np.convolve(x, da)[L:n]
        else:
            dm = ma_poly(order, step) - m
            J[:, 1 + i] = -np.convolve(e, dm)[:len(e)]
    return signal.lfilter([1.0], m, J, axis=0) if order.ma_lag else J


@dataclass
class SarimaFit:
    order: SarimaOrder
    mu: float
    coef: np.ndarray
    sigma2: float
    loglik: float
    nobs: int
    cov: np.ndarray | None = None

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.order.k, self.nobs)


def bic(loglik: float, k: int, n: int) -> float:
    return -2.0 * loglik + k * math.log(n)


def _unpack(order: SarimaOrder, z):
    p, q, P = order.p, order.q, order.P
    coef = np.concatenate([_constrain(z[1:1 + p]), -_constrain(z[1 + p:1 + p + q]),
                           np.tanh(z[1 + p + q:1 + p + q + P]), np.tanh(z[1 + p + q + P:])])
    return z[0], coef


def fit_css(w, order: SarimaOrder, start: int | None = None) -> SarimaFit:
    """Conditional-sum-of-squares maximum likelihood on a (differenced) series.

    The series is centred internally before optimisation, so the fitted
    coefficients of ``w`` and ``w - c`` agree to the optimiser tolerance. The
    exact residual Jacobian is used because finite differences stall the
    optimiser on near-cancelling AR/MA ridges about 1e-5 short of the optimum. Residuals before
    index ``start`` are excluded from the likelihood so that candidates of
    different orders are scored on the same observations.
    """
    w = np.asarray(w, dtype=float)
    start = order.ar_lag if start is None else start
    if start < order.ar_lag:
        raise ValueError("start must be >= the AR lag")
    n = len(w) - start
    if n < order.k + 5:
        raise SeriesTooShort(f"{n} usable points for {order.k} parameters")
    centre = float(np.mean(w))
    wc = w - centre
    drop = start - order.ar_lag

    def resid(z):
        mu, coef = _unpack(order, z)
        return residuals(wc, order, mu, coef)[drop:]

    def jac(z):
        # chain rule through the stabilising map, whose own derivative is taken by central differences
        dtheta = np.eye(len(z))
        for i in range(1, len(z)):
            h = dtheta[i] * 1e-6
            dtheta[1:, i] = (_unpack(order, z + h)[1] - _unpack(order, z - h)[1]) / 2e-6
        return residual_jacobian(wc, order, *_unpack(order, z))[drop:] @ dtheta / sd

    sd = float(np.std(wc)) or 1.0
    z0 = np.zeros(1 + order.n_coef)
    # a cheap finite-difference pass, then a short refinement with the exact Jacobian;
    # runs that exhausted their budget are creeping along the stability boundary and are left alone
    res = optimize.least_squares(lambda z: resid(z) / sd, z0, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                 max_nfev=60 * (len(z0) + 1))
    if res.status > 0 and np.all(np.isfinite(res.x)):
        res = optimize.least_squares(lambda z: resid(z) / sd, res.x, jac=jac, method="lm", xtol=1e-15,
                                     ftol=1e-15, gtol=1e-15, max_nfev=20 * (len(z0) + 1))
    if not np.all(np.isfinite(res.x)):
        raise FitFailure(f"optimiser failed for {order}")
    e = resid(res.x)
    mu, coef = _unpack(order, res.x)
    sigma2 = float(e @ e) / n
    if sigma2 <= 0:
        raise FitFailure("zero residual variance")
    loglik = -0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0)
    return SarimaFit(order, mu + centre, coef, sigma2, loglik, n)


def gauss_newton_cov(w, fit: SarimaFit, start: int | None = None, h: float = 1e-6) -> np.ndarray:
    """Approximate covariance of (mu, coef) from the residual Jacobian."""
    order = fit.order
    start = order.ar_lag if start is None else start
    drop = start - order.ar_lag
    theta0 = np.concatenate([[fit.mu], fit.coef])

    def resid(v):
        return residuals(w, order, v[0], v[1:])[drop:]

    J = np.empty((len(resid(theta0)), len(theta0)))
    for i in range(len(theta0)):
        step = np.zeros_like(theta0)
        step[i] = h * max(1.0, abs(theta0[i]))
        J[:, i] = (resid(theta0 + step) - resid(theta0 - step)) / (2 * step[i])
    info = J.T @ J
    try:
        return fit.sigma2 * np.linalg.inv(info + 1e-10 * np.eye(len(theta0)))
    except np.linalg.LinAlgError:
        return fit.sigma2 * np.eye(len(theta0)) * 1e-2


def candidate_orders(d: int, s: int, D: int, seasonal: bool):
    PQ = [(0, 0), (1, 0), (0, 1), (1, 1)] if seasonal else [(0, 0)]
    for p, q in itertools.product(range(4), range(4)):
        for P, Q in PQ:
            yield SarimaOrder(p, d, q, P, D, Q, s if (seasonal or D) else 0)


@dataclass
class OrderSelection:
    order: SarimaOrder
    table: dict  # order -> BIC (inf for failed candidates)


def select_order(series, s: int = 0, d: int | None = None, D: int = 0,
                 seasonal: bool | None = None) -> OrderSelection:
    """BIC grid search over p,q <= 3 and P,Q <= 1 on a common conditioning window."""
    y = np.asarray(series, dtype=float)
    if d is None:
        d = 0 if adf_test(y) == "stationary" else 1
    w = difference(y, d, s, D)
    if seasonal is None:
        seasonal = s >= 2 and len(w) >= 3 * s
    start = 3 + (s if seasonal else 0)
    table = {}
    for order in candidate_orders(d, s, D, seasonal):
        try:
            table[order] = fit_css(w, order, start).bic
        except (FitFailure, SeriesTooShort, np.linalg.LinAlgError, FloatingPointError):
            table[order] = math.inf
    finite = [o for o, b in table.items() if np.isfinite(b)]
    if not finite:
        raise AllCandidatesFailed("no SARIMA candidate could be fitted")
    best = min(finite, key=lambda o: (table[o], o.k, (o.p, o.q, o.P, o.Q)))
    return OrderSelection(best, table)


# ---------------------------------------------------------------- priors and sampling


@dataclass(frozen=True)
class PriorSpec:
    mu_c: float
    sigma_c: float
    lower_c: float
    upper_c: float
    loc_coef: float = 0.0
    scale_coef: float = 0.5
    a_sigma2: float = 2.0
    b_sigma2: float = 1.0

    def __post_init__(self):
        if self.sigma_c <= 0 or self.scale_coef <= 0 or self.a_sigma2 <= 0 or self.b_sigma2 <= 0:
            raise ValueError("prior scales must be positive")
        if not self.lower_c < self.upper_c:
            raise ValueError("truncation bounds must satisfy lower < upper")

    @classmethod
    def from_data(cls, w, residual_var: float | None = None, **overrides) -> "PriorSpec":
        w = np.asarray(w, dtype=float)
        sd = float(np.std(w)) or 1.0
        rv = float(np.var(w)) if residual_var is None else residual_var
        vals = dict(mu_c=float(np.mean(w)), sigma_c=2.0 * sd,
                    lower_c=float(np.min(w)) - 3 * sd, upper_c=float(np.max(w)) + 3 * sd,
                    b_sigma2=max(rv, 1e-8))
        vals.update(overrides)
        return cls(**vals)

    def sample(self, order: SarimaOrder, rng: np.random.Generator, max_tries: int = 10_000):
        """One (mu, coef, sigma2) draw from the prior restricted to admissible coefficients."""
        for _ in range(max_tries):
            mu = rng.normal(self.mu_c, self.sigma_c)
            if self.lower_c <= mu <= self.upper_c:
                break
        else:
            raise RuntimeError("truncated normal rejection sampling failed")
        for _ in range(max_tries):
            coef = rng.laplace(self.loc_coef, self.scale_coef, order.n_coef)
            if admissible(order, coef):
                break
        else:
            raise RuntimeError("no admissible coefficient draw")
        sigma2 = self.b_sigma2 / rng.gamma(self.a_sigma2)
        return float(mu), coef, float(sigma2)

    def log_prior(self, mu: float, coef: np.ndarray) -> float:
        if not self.lower_c <= mu <= self.upper_c:
            return -math.inf
        z = (mu - self.mu_c) / self.sigma_c
        return -0.5 * z * z - float(np.sum(np.abs(coef - self.loc_coef))) / self.scale_coef


def simulate(order: SarimaOrder, mu: float, coef, sigma2: float, n: int, rng: np.random.Generator,
             burn: int = 200, heads=None) -> np.ndarray:
    """Draw n values of the SARIMA process; ``heads`` seeds the integration when d or D > 0."""
    x = signal.lfilter(ma_poly(order, coef), ar_poly(order, coef), rng.normal(0, math.sqrt(sigma2), n + burn))
    w = x[burn:] + mu
    lag = order.d + order.D * order.s
    if not lag:
        return w
    heads = np.zeros(lag) if heads is None else heads
    return integrate(w, heads, order.d, order.s, order.D)


@dataclass
class SampleSet:
    order: SarimaOrder
    mu: np.ndarray  # (Nt,)
    coef: np.ndarray  # (Nt, n_coef)
    sigma2: np.ndarray  # (Nt,)
    last_resid: np.ndarray  # (Nt, ma_lag) residuals ending at the last observation
    acceptance: float
    converged: bool
    forecasts: np.ndarray | None = None


def _window(e: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros(width)
    if width:
        tail = e[-width:]
        out[width - len(tail):] = tail
    return out


def sample_posterior(w, order: SarimaOrder, prior: PriorSpec, n_draws: int = 2000,
                     rng: np.random.Generator | None = None, burn_in: int = 1000,
                     init: SarimaFit | None = None, cov: np.ndarray | None = None) -> SampleSet:
    """Metropolis-within-Gibbs: a Gaussian random-walk block on (mu, coef), conjugate draw of sigma^2.

    The random-walk covariance starts from the Gauss-Newton approximation
    at the conditional MLE and is rescaled and re-estimated during burn-in.
    """
    rng = np.random.default_rng() if rng is None else rng
    w = np.asarray(w, dtype=float)
    fit = init if init is not None else fit_css(w, order)
    dim = 1 + order.n_coef
    base_cov = gauss_newton_cov(w, fit) if cov is None else cov
    base_cov = 0.5 * (base_cov + base_cov.T) + 1e-12 * np.eye(dim)
    scale = 2.38 ** 2 / dim

    def chol(c):
        try:
            return np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            return np.diag(np.sqrt(np.abs(np.diag(c)) + 1e-12))

    L = chol(base_cov)
    state = np.concatenate([[np.clip(fit.mu, prior.lower_c, prior.upper_c)], fit.coef])
    if not admissible(order, state[1:]):
        state[1:] = 0.0
    e = residuals(w, order, state[0], state[1:])
    n = len(e)
    ssr = float(e @ e)
    sigma2 = fit.sigma2
    lp_prior = prior.log_prior(state[0], state[1:])

    total = burn_in + n_draws
    mus = np.empty(n_draws)
    coefs = np.empty((n_draws, order.n_coef))
    sig = np.empty(n_draws)
    last = np.empty((n_draws, order.ma_lag))
    accepted = kept_acc = window_acc = 0
    trace = []
    noise = rng.standard_normal((total, dim))
    shape = prior.a_sigma2 + 0.5 * n
    for it in range(total):
        prop = state + math.sqrt(scale) * (L @ noise[it])
        lp_new = prior.log_prior(prop[0], prop[1:])
        if np.isfinite(lp_new) and admissible(order, prop[1:]):
            e_new = residuals(w, order, prop[0], prop[1:])
            ssr_new = float(e_new @ e_new)
            log_ratio = lp_new - lp_prior - 0.5 * (ssr_new - ssr) / sigma2
            if math.log(rng.random() + 1e-300) < log_ratio:
                state, e, ssr, lp_prior = prop, e_new, ssr_new, lp_new
                accepted += 1
                window_acc += 1
                if it >= burn_in:
                    kept_acc += 1
        sigma2 = (prior.b_sigma2 + 0.5 * ssr) / rng.gamma(shape)
        if it < burn_in:
            trace.append(state.copy())
            if (it + 1) % 100 == 0:
                scale *= math.exp(2.0 * (window_acc / 100 - 0.3))
                window_acc = 0
                if it + 1 == burn_in // 2 and len(trace) > 10 * dim:
                    emp = np.cov(np.array(trace[len(trace) // 4:]).T).reshape(dim, dim)
                    if np.all(np.isfinite(emp)) and np.all(np.diag(emp) > 0):
                        L = chol(emp + 1e-10 * np.eye(dim))
                        scale = 2.38 ** 2 / dim
        else:
            j = it - burn_in
            mus[j] = state[0]
            coefs[j] = state[1:]
            sig[j] = sigma2
            last[j] = _window(e, order.ma_lag)
    acc = kept_acc / n_draws
    converged = 0.1 <= acc <= 0.6
    if not converged:
        warnings.warn(f"acceptance rate {acc:.3f} outside [0.1, 0.6]", NonConvergence, stacklevel=2)
    return SampleSet(order, mus, coefs, sig, last, acc, converged)


class SarimaForecaster:
    """Forecasts from every posterior draw, advanced one observation at a time.

    Holds the recent raw values, the differenced values and each draw's
    recent residuals; :meth:`update` appends one observation without
    refitting.
    """

    def __init__(self, samples: SampleSet, history):
        o = samples.order
        self.samples = samples
        self.order = o
        self.dpoly = diff_poly(o.d, o.s, o.D)
        self.ar = ar_poly(o, samples.coef)  # (Nt, ar_lag+1)
        self.ma = ma_poly(o, samples.coef)  # (Nt, ma_lag+1)
        y = np.asarray(history, dtype=float)
        keep = max(len(self.dpoly) - 1, 1)
        self.y = list(y[-keep:])
        w = difference(y, o.d, o.s, o.D) if len(self.dpoly) > 1 else y
        self.w = list(w[-max(o.ar_lag, 1):])
        self.e = samples.last_resid.copy()

    def _x_window(self, w_tail, mu):
        # centred differenced values, most recent first, shape (Nt, ar_lag)
        lag = self.order.ar_lag
        wt = np.asarray(w_tail[-lag:] if lag else [], dtype=float)[::-1]
        return wt[None, :] - mu[:, None]

    def update(self, value: float) -> None:
        o = self.order
        lag_d = len(self.dpoly) - 1
        y_hist = self.y
        w_new = value + (self.dpoly[1:] @ np.asarray(y_hist[::-1][:lag_d]) if lag_d else 0.0)
        mu = self.samples.mu
        x_new = w_new - mu
        if o.ar_lag:
            u = x_new + np.sum(self.ar[:, 1:] * self._x_window(self.w, mu), axis=1)
        else:
            u = x_new
        if o.ma_lag:
            e_new = u - np.sum(self.ma[:, 1:] * self.e[:, ::-1], axis=1)
            self.e = np.concatenate([self.e[:, 1:], e_new[:, None]], axis=1)
        self.y = (y_hist + [float(value)])[-max(lag_d, 1):]
        self.w = (self.w + [float(w_new)])[-max(o.ar_lag, 1):]

    def forecast(self, h: int, rng: np.random.Generator) -> np.ndarray:
        """Simulated values h steps ahead, one per draw, including innovation noise."""
        if h < 1:
            raise ValueError("h must be >= 1")
        o = self.order
        n = len(self.samples.mu)
        mu = self.samples.mu
        sd = np.sqrt(self.samples.sigma2)
        lag_d = len(self.dpoly) - 1
        xw = self._x_window(self.w, mu)  # most recent first
        ew = self.e[:, ::-1].copy()  # most recent first
        yw = np.tile(np.asarray(self.y[::-1][:lag_d], dtype=float), (n, 1))
        out = None
        for _ in range(h):
            eps = sd * rng.standard_normal(n)
            x = eps.copy()
            if o.ar_lag:
                x -= np.sum(self.ar[:, 1:] * xw, axis=1)
            if o.ma_lag:
                x += np.sum(self.ma[:, 1:] * ew, axis=1)
            w = x + mu
            y = w - (np.sum(self.dpoly[1:] * yw, axis=1) if lag_d else 0.0)
            if o.ar_lag:
                xw = np.concatenate([x[:, None], xw[:, :-1]], axis=1)
            if o.ma_lag:
                ew = np.concatenate([eps[:, None], ew[:, :-1]], axis=1)
            if lag_d:
                yw = np.concatenate([y[:, None], yw[:, :-1]], axis=1)
            out = y
        return out


def sample_posterior_forecasts(series, order: SarimaOrder, prior: PriorSpec | None = None, n_draws: int = 2000,
                               h: int = 1, rng: np.random.Generator | None = None, **kwargs) -> SampleSet:
    """Posterior draws for ``order`` on the raw series plus their h-step forecasts."""
    rng = np.random.default_rng() if rng is None else rng
    y = np.asarray(series, dtype=float)
    w = difference(y, order.d, order.s, order.D)
    fit = fit_css(w, order)
    prior = prior if prior is not None else PriorSpec.from_data(w, fit.sigma2)
    samples = sample_posterior(w, order, prior, n_draws, rng, init=fit, **kwargs)
    samples.forecasts = SarimaForecaster(samples, y).forecast(h, rng)
    return samples


# ---------------------------------------------------------------- gate


@dataclass(frozen=True)
class CredibleInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower must not exceed upper")


def credible_interval(samples, level: float = 0.95) -> CredibleInterval:
    x = np.asarray(samples, dtype=float)
    if len(x) < 40:
        raise TooFewSamples(f"need at least 40 samples, got {len(x)}")
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(x, [tail, 100.0 - tail])
    return CredibleInterval(float(lo), float(hi))


def critique(r_pred: float, ci: CredibleInterval) -> str:
    return "accept" if ci.lower <= r_pred <= ci.upper else "reject"


@dataclass(frozen=True)
class CritiqueConfig:
    n_draws: int = 2000
    burn_in: int = 1000
    min_history: int = 60
    window_episodes: int = 5
    season: bool = True
    seasonal_D: int = 0
    order_every: int = 5
    significance: float = 0.05
    level: float = 0.95

    def __post_init__(self):
        if self.n_draws < 40:
            raise ValueError("n_draws must be >= 40")
        if self.order_every < 1:
            raise ValueError("order_every must be >= 1")


@dataclass
class FitRecord:
    order: SarimaOrder | None
    acceptance: float
    converged: bool
    n: int
    bic_table: dict = field(default_factory=dict)


class CritiqueLayer:
    """Per-intersection gate: refit once per episode, advance the forecaster within it."""

    def __init__(self, cfg: CritiqueConfig = CritiqueConfig(), prior_overrides: dict | None = None):
        self.cfg = cfg
        self.prior_overrides = dict(prior_overrides or {})
        self.order: SarimaOrder | None = None
        self.forecaster: SarimaForecaster | None = None
        self.n_fits = 0
        self.last_fit: FitRecord | None = None

    def refit(self, history, season: int, rng: np.random.Generator) -> FitRecord | None:
        cfg = self.cfg
        y = np.asarray(history, dtype=float)
        if cfg.window_episodes and season:
            y = y[-cfg.window_episodes * season:]
        self.forecaster = None
        if len(y) < cfg.min_history or np.ptp(y) == 0:
            return None
        s = season if cfg.season else 0
        if self.order is None or self.n_fits % cfg.order_every == 0:
            sel = select_order(y, s=s, D=cfg.seasonal_D if s >= 2 else 0)
            self.order, table = sel.order, sel.table
        else:
            table = {}
        self.n_fits += 1
        w = difference(y, self.order.d, self.order.s, self.order.D)
        try:
            fit = fit_css(w, self.order)
        except (FitFailure, SeriesTooShort):
            return None
        if np.ptp(w) == 0:
            return None
        prior = PriorSpec.from_data(w, fit.sigma2, **self.prior_overrides)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergence)
            samples = sample_posterior(w, self.order, prior, cfg.n_draws, rng, cfg.burn_in, init=fit)
        self.forecaster = SarimaForecaster(samples, y)
        self.last_fit = FitRecord(self.order, samples.acceptance, samples.converged, len(y), table)
        return self.last_fit

    def observe(self, value: float) -> None:
        if self.forecaster is not None:
            self.forecaster.update(value)

    def interval(self, rng: np.random.Generator, h: int = 1) -> CredibleInterval | None:
        if self.forecaster is None:
            return None
        return credible_interval(self.forecaster.forecast(h, rng), self.cfg.level)

    def judge(self, r_pred: float, rng: np.random.Generator) -> tuple[str, CredibleInterval | None]:
        ci = self.interval(rng)
        if ci is None:
            return "accept", None
        return critique(r_pred, ci), ci
