"""Minimum-posterior-risk phase re-selection.

For each phase the history of its Q-values gives a Gaussian KDE prior and,
together with the current Q-value, a likelihood. Their product is the
posterior, and the squared-loss risk of acting on the current Q-value is
integrated against it. All densities live on a uniform per-phase grid and
products are formed in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

LOG_ROOT_2PI = 0.5 * np.log(2.0 * np.pi)


class EmptyHistory(ValueError):
    pass


class NonPositiveBandwidth(ValueError):
    pass


class NumericalUnderflow(FloatingPointError):
    pass


class ZeroMass(FloatingPointError):
    pass


@dataclass(frozen=True)
class TuneConfig:
    sigma2_cur: float = 0.25
    grid_size: int = 2048
    bw: float | None = None  # None selects Silverman's rule per phase
    bw_floor: float = 1e-3
    history_window: int = 200

    def __post_init__(self):
        if self.sigma2_cur <= 0:
            raise ValueError("sigma2_cur must be positive")
        if self.grid_size < 256:
            raise ValueError("grid_size must be >= 256")
        if self.bw is not None and self.bw <= 0:
            raise NonPositiveBandwidth("bw must be positive")


@dataclass(frozen=True)
class Density:
    grid: np.ndarray
    values: np.ndarray
    bw: float | None = None

    def integral(self) -> float:
        return float(trapezoid(self.values, self.grid))

    def mean(self) -> float:
        return float(trapezoid(self.grid * self.values, self.grid))

    def variance(self) -> float:
        m = self.mean()
        return float(trapezoid((self.grid - m) ** 2 * self.values, self.grid))


@dataclass(frozen=True)
class TuneResult:
    phase: int
    risks: np.ndarray
    fallback: tuple[bool, ...] = ()


def silverman_bw(history, floor: float = 1e-3) -> float:
    h = np.asarray(history, dtype=float)
    sd = float(np.std(h, ddof=1)) if len(h) > 1 else 0.0
    return max(1.06 * sd * len(h) ** (-0.2), floor)


def make_grid(history, bw: float, size: int = 2048, extra=(), pad: float | None = None) -> np.ndarray:
    """Uniform grid over the history (and any extra points) padded by 3*pad on both sides."""
    pts = np.concatenate([np.asarray(history, dtype=float).ravel(), np.asarray(extra, dtype=float).ravel()])
    pad = 3.0 * (bw if pad is None else pad)
    return np.linspace(pts.min() - pad, pts.max() + pad, size)


def _normalise(grid, values) -> np.ndarray:
    z = trapezoid(values, grid)
    if not np.isfinite(z) or z <= 0:
        raise ZeroMass("density has no mass on the grid")
    return values / z


def kde_prior(history, bw: float, grid: np.ndarray | None = None, size: int = 2048) -> Density:
    """Gaussian KDE (1 / (T bw)) sum K((Q - Q_t) / bw), renormalised on the grid."""
    h = np.asarray(history, dtype=float)
    if h.size == 0:
        raise EmptyHistory("KDE needs at least one history value")
    if not bw > 0:
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {bw}")
    grid = make_grid(h, bw, size) if grid is None else np.asarray(grid, dtype=float)
    z = (grid[:, None] - h[None, :]) / bw
    raw = np.exp(-0.5 * z * z).sum(axis=1) / (len(h) * bw * np.sqrt(2 * np.pi))
    return Density(grid, _normalise(grid, raw), bw)


def kde_raw(history, bw: float, points) -> np.ndarray:
    """Un-normalised KDE values at arbitrary points."""
    h = np.asarray(history, dtype=float)
    z = (np.asarray(points, dtype=float)[..., None] - h) / bw
    return np.exp(-0.5 * z * z).sum(axis=-1) / (len(h) * bw * np.sqrt(2 * np.pi))


def log_likelihood(grid, q_cur: float, history, bw: float, sigma2_cur: float) -> np.ndarray:
    """log N(Q; q_cur, sigma2_cur) + sum_t log N(Q; Q_t, bw^2) on the grid."""
    if sigma2_cur <= 0:
        raise ValueError("sigma2_cur must be positive")
    grid = np.asarray(grid, dtype=float)
    h = np.asarray(history, dtype=float)
    out = -0.5 * (grid - q_cur) ** 2 / sigma2_cur - 0.5 * np.log(sigma2_cur) - LOG_ROOT_2PI
    if h.size:
        # sum_t (Q - Q_t)^2 expanded so the cost is O(G + T)
        n, s1, s2 = len(h), h.sum(), (h * h).sum()
        sq = n * grid * grid - 2.0 * grid * s1 + s2
        out = out - 0.5 * sq / bw ** 2 - n * (np.log(bw) + LOG_ROOT_2PI)
    return out


def likelihood(grid, q_cur: float, history, bw: float, sigma2_cur: float) -> np.ndarray:
    """Likelihood on the grid after a max shift; its overall scale is arbitrary."""
    ll = log_likelihood(grid, q_cur, history, bw, sigma2_cur)
    top = np.max(ll)
    if not np.isfinite(top):
        raise NumericalUnderflow("log-likelihood is -inf everywhere")
    return np.exp(ll - top)


def posterior(prior: Density, lik: np.ndarray) -> tuple[Density, bool]:
    """Normalised prior x likelihood; falls back to the prior if the product has no mass."""
    prod = prior.values * np.asarray(lik, dtype=float)
    try:
        return Density(prior.grid, _normalise(prior.grid, prod), prior.bw), False
    except ZeroMass:
        return prior, True


def posterior_risk(post: Density, q_cur: float) -> float:
    return float(trapezoid((q_cur - post.grid) ** 2 * post.values, post.grid))


def phase_posterior(q_cur: float, history, cfg: TuneConfig = TuneConfig()) -> tuple[Density, bool]:
    h = np.asarray(history, dtype=float)
    if cfg.history_window:
        h = h[-cfg.history_window:]
    bw = cfg.bw if cfg.bw is not None else silverman_bw(h, cfg.bw_floor)
    sd_cur = np.sqrt(cfg.sigma2_cur)
    grid = make_grid(h, bw, cfg.grid_size, extra=[q_cur], pad=max(bw, sd_cur))
    prior = kde_prior(h, bw, grid)
    return posterior(prior, likelihood(grid, q_cur, h, bw, cfg.sigma2_cur))


def tune(q_cur, q_hist, cfg: TuneConfig = TuneConfig()) -> TuneResult | None:
    """Phase (1..8) with the smallest posterior risk; ``None`` when no phase has history.

    ``q_hist`` is a (T, 8) array of past Q vectors or a list of per-phase
    sequences. A phase without history is scored with the pooled history:
    its risk is the pooled variance plus the squared distance to the pooled
    mean.
    """
    q_cur = np.asarray(q_cur, dtype=float)
    if isinstance(q_hist, np.ndarray) and q_hist.ndim == 2:
        cols = [q_hist[:, j] for j in range(q_hist.shape[1])]
    else:
        cols = [np.asarray(c, dtype=float) for c in q_hist]
    if len(cols) != len(q_cur):
        raise ValueError("history and current Q disagree on the number of phases")
    pooled = np.concatenate([c[-cfg.history_window:] if cfg.history_window else c for c in cols])
    if pooled.size == 0:
        return None
    risks = np.empty(len(q_cur))
    fallback = []
    for j, (q, h) in enumerate(zip(q_cur, cols)):
        if h.size == 0:
            risks[j] = float(np.var(pooled)) + (q - float(np.mean(pooled))) ** 2
            fallback.append(True)
            continue
        post, fell = phase_posterior(q, h, cfg)
        risks[j] = posterior_risk(post, q)
        fallback.append(fell)
    return TuneResult(int(np.argmin(risks)) + 1, risks, tuple(fallback))
