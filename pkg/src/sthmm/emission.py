"""Gaussian response layer and its conjugate full conditionals.

Observations are held as an (N, T, d) array.  Each latent state ``k`` has
a mean ``mu[k-1]`` and covariance ``sigma[k-1]``; the univariate model is
the ``d = 1`` case with Normal / Inverse-Gamma priors instead of Normal /
Inverse-Wishart.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TextIO

import numpy as np
from scipy.linalg import solve_triangular

from .graph import NeighborhoodSystem

LOG_2PI = np.log(2.0 * np.pi)


class EmissionError(ValueError):
    pass


def _chol(a, what):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise EmissionError(f"{what} is not symmetric positive definite") from None


def _spd_inverse(a, what):
    # Inverse through the Cholesky factor: a^-1 = L^-T L^-1.
    Linv = np.linalg.inv(_chol(a, what))
    return Linv.T @ Linv


@dataclass(frozen=True, eq=False)
class EmissionParams:
    """Per-state means ``mu`` (K, d) and covariances ``sigma`` (K, d, d)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 1:
            sigma = sigma[:, None, None]
        K, d = mu.shape
        if sigma.shape != (K, d, d):
            raise EmissionError(f"sigma has shape {sigma.shape}, expected {(K, d, d)}")
        for k in range(K):
            if np.abs(sigma[k] - sigma[k].T).max() > 1e-10 * (1 + np.abs(sigma[k]).max()):
                raise EmissionError(f"covariance of state {k + 1} is not symmetric")
            _chol(sigma[k], f"covariance of state {k + 1}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]


@dataclass(frozen=True)
class GaussianPriors:
    """``mu_k ~ N(m, V)`` and ``Sigma_k ~ IW(nu, S)`` for every state."""

    m: np.ndarray
    V: np.ndarray
    nu: float
    S: np.ndarray
    V_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=float))
        d = m.shape[0]
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if V.shape != (d, d) or S.shape != (d, d):
            raise EmissionError("prior matrices must be d x d")
        _chol(V, "prior V")
        _chol(S, "prior S")
        if not self.nu > d - 1:
            raise EmissionError(f"nu must exceed d - 1 = {d - 1}, got {self.nu}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "V_inv", _spd_inverse(V, "prior V"))

    @property
    def d(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class UnivariatePriors:
    """``mu_k ~ N(m, v)`` and ``sigma2_k ~ IG(a, b)`` (shape a, scale b)."""

    m: float = 0.0
    v: float = 1000.0
    a: float = 2.0
    b: float = 1.0

    def __post_init__(self):
        if not (self.v > 0 and self.a > 0 and self.b > 0):
            raise EmissionError("univariate priors need v, a, b > 0")

    d = 1


def default_priors(d: int, univariate: bool = False, off_diagonal_sign: float = 1.0):
    """Weakly informative defaults.

    Multivariate: ``m = 0``, ``V = 100 I``, ``nu = 2 (floor((d+1)/2) + 1)``,
    ``S`` with ``nu`` on the diagonal and ``off_diagonal_sign * nu / 2``
    elsewhere.  Univariate: ``N(0, 1000)`` and ``IG(2, 1)``.
    """
    if d < 1:
        raise EmissionError("d must be >= 1")
    if univariate:
        if d != 1:
            raise EmissionError("univariate priors need d == 1")
        return UnivariatePriors()
    nu = 2 * ((d + 1) // 2 + 1)
    S = np.full((d, d), off_diagonal_sign * nu / 2.0)
    np.fill_diagonal(S, nu)
    return GaussianPriors(np.zeros(d), 100.0 * np.eye(d), float(nu), S)


@dataclass
class Dataset:
    y: np.ndarray
    graph: NeighborhoodSystem
    true_field: np.ndarray | None = None
    true_theta: object | None = None
    true_emission: EmissionParams | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2:
            y = y[:, :, None]
        if y.ndim != 3:
            raise EmissionError(f"observations must be (N, T, d), got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise EmissionError("observations contain non-finite values")
        if y.shape[0] != self.graph.n_sites:
            raise EmissionError(f"{y.shape[0]} sites in data, {self.graph.n_sites} in graph")
        if self.true_field is not None and np.shape(self.true_field) != y.shape[:2]:
            raise EmissionError("true field shape does not match observations")
        self.y = y

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def d(self) -> int:
        return self.y.shape[2]


def log_emission(y_it, state: int, params: EmissionParams) -> float:
    """``log N(y_it; mu_state, Sigma_state)`` with the normalising constant."""
    y_it = np.atleast_1d(np.asarray(y_it, dtype=float))
    k = state - 1
    L = np.linalg.cholesky(params.sigma[k])
    z = solve_triangular(L, y_it - params.mu[k], lower=True)
    return float(-0.5 * (params.d * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def emission_loglik(y: np.ndarray, params: EmissionParams) -> np.ndarray:
    """Log-density of every observation under every state, shape (N, T, K)."""
    N, T, d = y.shape
    flat = y.reshape(-1, d)
    out = np.empty((N * T, params.K))
    for k in range(params.K):
        L = np.linalg.cholesky(params.sigma[k])
        z = solve_triangular(L, (flat - params.mu[k]).T, lower=True)
        out[:, k] = -0.5 * (d * LOG_2PI + (z * z).sum(axis=0)) - np.log(np.diag(L)).sum()
    return out.reshape(N, T, params.K)


def sufficient_stats(y: np.ndarray, u, state: int, center=None):
    """``(n_u, ybar_u, scatter_u)`` for the observations currently in ``state``.

    ``ybar_u`` is None when ``n_u == 0``.  The scatter is taken around
    ``center`` when given, otherwise around ``ybar_u``.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[:, :, None]
    sel = y[np.asarray(u) == state]
    n = sel.shape[0]
    d = y.shape[2]
    if n == 0:
        return 0, None, np.zeros((d, d))
    ybar = sel.mean(axis=0)
    r = sel - (ybar if center is None else np.asarray(center, dtype=float))
    return n, ybar, r.T @ r


def _data(dataset):
    return dataset.y if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)


def _mu_precision(state, dataset, u, sigma_u, priors: GaussianPriors):
    n, ybar, _ = sufficient_stats(_data(dataset), u, state)
    prec = priors.V_inv.copy()
    rhs = priors.V_inv @ priors.m
    if n:
        Sinv = _spd_inverse(sigma_u, f"Sigma_{state}")
        prec += n * Sinv
        rhs += Sinv @ (n * ybar)
    return prec, rhs


def mu_conditional(state, dataset, u, sigma_u, priors: GaussianPriors):
    """Mean and covariance of the Gaussian full conditional of ``mu_state``."""
    prec, rhs = _mu_precision(state, dataset, u, sigma_u, priors)
    cov = _spd_inverse(prec, f"posterior precision of mu_{state}")
    cov = 0.5 * (cov + cov.T)
    return cov @ rhs, cov


def sample_mu(state, dataset, u, sigma_u, priors: GaussianPriors, rng) -> np.ndarray:
    """Draw ``mu_state`` from N(V~ m~, V~), V~^-1 = n Sigma^-1 + V^-1."""
    prec, rhs = _mu_precision(state, dataset, u, sigma_u, priors)
    # With prec = L L', L^-T z has covariance prec^-1.
    Linv = np.linalg.inv(_chol(prec, f"posterior precision of mu_{state}"))
    return Linv.T @ (Linv @ rhs + rng.standard_normal(priors.d))


@lru_cache(maxsize=None)
def _strict_lower(d):
    return np.tril_indices(d, -1)


def sample_inverse_wishart(df: float, scale: np.ndarray, rng) -> np.ndarray:
    """One draw from IW(df, scale) via the Bartlett factor of its inverse."""
    d = scale.shape[0]
    if not df > d - 1:
        raise EmissionError(f"inverse-Wishart needs df > d - 1, got df={df}, d={d}")
    # Inverse of an IW(df, scale) draw is Wishart(df, scale^-1) = (C A)(C A)'.
    C = _chol(_spd_inverse(scale, "inverse-Wishart scale"), "inverse-Wishart scale")
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    il = _strict_lower(d)
    A[il] = rng.standard_normal(len(il[0]))
    B_inv = np.linalg.inv(C @ A)
    out = B_inv.T @ B_inv
    return 0.5 * (out + out.T)


def sigma_conditional(state, dataset, u, mu_u, priors: GaussianPriors):
    """``(df, scale)`` of the inverse-Wishart full conditional of ``Sigma_state``."""
    n, _, scatter = sufficient_stats(_data(dataset), u, state, center=mu_u)
    return priors.nu + n, priors.S + scatter


def sample_sigma(state, dataset, u, mu_u, priors: GaussianPriors, rng) -> np.ndarray:
    df, scale = sigma_conditional(state, dataset, u, mu_u, priors)
    return sample_inverse_wishart(df, scale, rng)


def mu_conditional_univariate(state, dataset, u, sigma2_u, priors: UnivariatePriors):
    n, ybar, _ = sufficient_stats(_data(dataset), u, state)
    v_post = 1.0 / (n / sigma2_u + 1.0 / priors.v)
    m_post = (n * ybar[0] / sigma2_u if n else 0.0) + priors.m / priors.v
    return m_post * v_post, v_post


def sample_mu_univariate(state, dataset, u, sigma2_u, priors: UnivariatePriors, rng) -> float:
    mean, var = mu_conditional_univariate(state, dataset, u, sigma2_u, priors)
    return float(mean + np.sqrt(var) * rng.standard_normal())


def sigma_conditional_univariate(state, dataset, u, mu_u, priors: UnivariatePriors):
    """``(shape, scale)`` of the inverse-gamma full conditional of ``sigma2_state``."""
    n, _, scatter = sufficient_stats(_data(dataset), u, state, center=np.atleast_1d(mu_u))
    return priors.a + n / 2.0, priors.b + 0.5 * float(scatter[0, 0])


def sample_sigma_univariate(state, dataset, u, mu_u, priors: UnivariatePriors, rng) -> float:
    shape, scale = sigma_conditional_univariate(state, dataset, u, mu_u, priors)
    return float(scale / rng.gamma(shape))


def write_observations_csv(y: np.ndarray, sink: TextIO) -> None:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[:, :, None]
    N, T, d = y.shape
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(["site", "time"] + [f"y{h + 1}" for h in range(d)])
    for i in range(N):
        for t in range(T):
            w.writerow([i + 1, t + 1] + [repr(float(v)) for v in y[i, t]])


def read_observations_csv(source: TextIO) -> np.ndarray:
    """Read ``site,time,y1..yd`` rows into an (N, T, d) array."""
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmissionError("empty observation CSV") from None
    if header[:2] != ["site", "time"] or len(header) < 3:
        raise EmissionError(f"observation CSV header must be site,time,y1..yd, got {header}")
    ycols = header[2:]
    if ycols != [f"y{h + 1}" for h in range(len(ycols))]:
        raise EmissionError(f"response columns must be y1..yd, got {ycols}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise EmissionError(f"line {lineno}: expected {len(header)} fields")
        try:
            rows.append((int(row[0]), int(row[1]), [float(v) for v in row[2:]]))
        except ValueError:
            raise EmissionError(f"line {lineno}: non-numeric entry") from None
    if not rows:
        raise EmissionError("observation CSV has no data rows")
    N = max(r[0] for r in rows)
    T = max(r[1] for r in rows)
    y = np.full((N, T, len(ycols)), np.nan)
    for i, t, vals in rows:
        if i < 1 or t < 1:
            raise EmissionError(f"site/time indices are 1-based, got ({i}, {t})")
        if not np.isnan(y[i - 1, t - 1, 0]):
            raise EmissionError(f"duplicate row for site {i}, time {t}")
        y[i - 1, t - 1] = vals
    if np.isnan(y).any():
        raise EmissionError("observation CSV does not cover every (site, time)")
    return y
