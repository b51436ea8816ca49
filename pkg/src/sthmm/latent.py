"""K-state spatio-temporal autologistic field.

The log potential of a field ``u`` (N sites x T times, labels ``1..K``) is

    sum_i beta[u_i1] + sum_{i<j, j~i} gamma[u_i1, u_j1]
      + sum_{t>1} ( sum_i beta*[u_it] + sum_{i<j, j~i} gamma*[u_it, u_jt]
                    + sum_i delta[u_i,t-1, u_it] )

with ``beta[K] = beta*[K] = 0`` and zero diagonals on ``gamma``, ``gamma*``
and ``delta``.  Spatial terms use each edge once, smaller site first.

The potential is linear in the parameters, ``log q(u) = f(u) . theta``,
where both vectors use the flat layout ``beta | beta* | gamma | gamma* |
delta`` (matrices row-major).  :func:`field_statistics` returns ``f(u)``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, TextIO

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .graph import NeighborhoodSystem

DEFAULT_ENUMERATION_CAP = 2**20


class LatentModelError(ValueError):
    pass


class EnumerationTooLarge(LatentModelError):
    pass


@dataclass(frozen=True)
class FreeParameter:
    """A scalar model parameter and the flat-theta entries it sets."""

    name: str
    entries: tuple[int, ...]


def flat_size(K: int) -> int:
    return 2 * K + 3 * K * K


def _offsets(K):
    return {"beta": 0, "beta_star": K, "gamma": 2 * K,
            "gamma_star": 2 * K + K * K, "delta": 2 * K + 2 * K * K}


def free_parameters(K: int, symmetric: bool = False, shared_time: bool = False) -> list[FreeParameter]:
    """Free scalar parameters in update order: beta, beta*, gamma, gamma*, delta.

    Under ``symmetric`` only the upper triangle (u < v) of each matrix is
    free and sets both ``[u, v]`` and ``[v, u]``.  Under ``shared_time`` the
    starred blocks are tied to ``beta``/``gamma`` and are not listed.
    """
    return list(_free_parameters(int(K), bool(symmetric), bool(shared_time)))


@lru_cache(maxsize=None)
def _free_parameters(K, symmetric, shared_time):
    off = _offsets(K)
    out = []
    for k in range(K - 1):
        e = [off["beta"] + k]
        if shared_time:
            e.append(off["beta_star"] + k)
        out.append(FreeParameter(f"beta_{k + 1}", tuple(e)))
    if not shared_time:
        for k in range(K - 1):
            out.append(FreeParameter(f"beta_star_{k + 1}", (off["beta_star"] + k,)))

    def block(name, tied=None):
        for a in range(K):
            for b in range(K):
                if a == b or (symmetric and b < a):
                    continue
                e = [off[name] + a * K + b]
                if symmetric:
                    e.append(off[name] + b * K + a)
                if tied is not None:
                    e += [x - off[name] + off[tied] for x in e]
                out.append(FreeParameter(f"{name}_{a + 1}_{b + 1}", tuple(e)))

    block("gamma", "gamma_star" if shared_time else None)
    if not shared_time:
        block("gamma_star")
    block("delta")
    return tuple(out)


@dataclass(frozen=True, eq=False)
class LatentParams:
    """Parameters of the latent field.

    Arrays use 0-based indexing: ``beta[k - 1]`` is the prevalence of state
    ``k``.  Construction validates the zero constraints and, when set, the
    symmetry and time-sharing constraints.
    """

    beta: np.ndarray
    beta_star: np.ndarray
    gamma: np.ndarray
    gamma_star: np.ndarray
    delta: np.ndarray
    symmetric: bool = False
    shared_time: bool = False
    flat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = len(self.beta)
        if K < 1:
            raise LatentModelError("need at least one state")
        arrs = {}
        for name in ("beta", "beta_star", "gamma", "gamma_star", "delta"):
            a = np.array(getattr(self, name), dtype=float)
            want = (K,) if name.startswith("beta") else (K, K)
            if a.shape != want:
                raise LatentModelError(f"{name} has shape {a.shape}, expected {want}")
            if not np.all(np.isfinite(a)):
                raise LatentModelError(f"{name} has non-finite entries")
            a.setflags(write=False)
            arrs[name] = a
            object.__setattr__(self, name, a)
        for name in ("beta", "beta_star"):
            if arrs[name][K - 1] != 0.0:
                raise LatentModelError(f"{name}[K] must be 0")
        for name in ("gamma", "gamma_star", "delta"):
            if np.any(np.diag(arrs[name]) != 0.0):
                raise LatentModelError(f"{name} must have a zero diagonal")
            if self.symmetric and not np.array_equal(arrs[name], arrs[name].T):
                raise LatentModelError(f"{name} must be symmetric")
        if self.shared_time and not (
            np.array_equal(arrs["beta"], arrs["beta_star"])
            and np.array_equal(arrs["gamma"], arrs["gamma_star"])
        ):
            raise LatentModelError("shared_time requires beta == beta_star and gamma == gamma_star")
        flat = np.concatenate([arrs["beta"], arrs["beta_star"], arrs["gamma"].ravel(),
                               arrs["gamma_star"].ravel(), arrs["delta"].ravel()])
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    @property
    def K(self) -> int:
        return len(self.beta)

    @classmethod
    def zeros(cls, K: int, symmetric: bool = False, shared_time: bool = False) -> "LatentParams":
        z = np.zeros((K, K))
        return cls(np.zeros(K), np.zeros(K), z, z, z, symmetric, shared_time)

    @classmethod
    def from_flat(cls, K: int, flat, symmetric=False, shared_time=False) -> "LatentParams":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (flat_size(K),):
            raise LatentModelError(f"flat theta has shape {flat.shape}, expected ({flat_size(K)},)")
        KK = K * K
        return cls(flat[:K], flat[K:2 * K],
                   flat[2 * K:2 * K + KK].reshape(K, K),
                   flat[2 * K + KK:2 * K + 2 * KK].reshape(K, K),
                   flat[2 * K + 2 * KK:].reshape(K, K),
                   symmetric, shared_time)

    def free_parameters(self) -> list[FreeParameter]:
        return free_parameters(self.K, self.symmetric, self.shared_time)

    def get(self, p: FreeParameter) -> float:
        return float(self.flat[p.entries[0]])

    def with_value(self, p: FreeParameter, value: float) -> "LatentParams":
        """Copy with free parameter ``p`` set to ``value``.

        Setting all of a free parameter's entries together cannot break a
        constraint, so only finiteness is checked (this sits in the MCMC
        inner loop).
        """
        if not np.isfinite(value):
            raise LatentModelError(f"{p.name} must be finite")
        flat = self.flat.copy()
        flat[list(p.entries)] = value
        flat.setflags(write=False)
        K, KK = self.K, self.K * self.K
        new = object.__new__(LatentParams)
        for name, a in (("beta", flat[:K]), ("beta_star", flat[K:2 * K]),
                        ("gamma", flat[2 * K:2 * K + KK].reshape(K, K)),
                        ("gamma_star", flat[2 * K + KK:2 * K + 2 * KK].reshape(K, K)),
                        ("delta", flat[2 * K + 2 * KK:].reshape(K, K)),
                        ("symmetric", self.symmetric), ("shared_time", self.shared_time),
                        ("flat", flat)):
            object.__setattr__(new, name, a)
        return new

    def free_vector(self) -> np.ndarray:
        return np.array([self.get(p) for p in self.free_parameters()])

    def arrays(self):
        return self.beta, self.beta_star, self.gamma, self.gamma_star, self.delta

    def __eq__(self, other):
        if not isinstance(other, LatentParams):
            return NotImplemented
        return (np.array_equal(self.flat, other.flat) and self.symmetric == other.symmetric
                and self.shared_time == other.shared_time)


def _check_field(u, K, g=None) -> np.ndarray:
    u = np.asarray(u)
    if u.ndim != 2:
        raise LatentModelError(f"field must be 2-d (N, T), got shape {u.shape}")
    if not np.issubdtype(u.dtype, np.integer):
        if not np.all(u == np.round(u)):
            raise LatentModelError("field labels must be integers")
    u = u.astype(np.int64, copy=False)
    if u.size and (u.min() < 1 or u.max() > K):
        raise LatentModelError(f"field labels must lie in 1..{K}")
    if g is not None and u.shape[0] != g.n_sites:
        raise LatentModelError(f"field has {u.shape[0]} sites, graph has {g.n_sites}")
    return u


def field_statistics(u, g: NeighborhoodSystem, K: int) -> np.ndarray:
    """Indicator counts ``f(u)`` in the flat theta layout."""
    u = _check_field(u, K, g)
    return _kernels.field_statistics(u, K, g.indptr, g.indices)


def log_potential(u, theta: LatentParams, g: NeighborhoodSystem) -> float:
    """``log q_theta(u)``, the unnormalised log mass of the field."""
    return float(field_statistics(u, g, theta.K) @ theta.flat)


def enumerate_fields(N: int, T: int, K: int, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """All ``K**(N*T)`` fields as an (M, N, T) array, site-major lexicographic."""
    M = K ** (N * T)
    if M > cap:
        raise EnumerationTooLarge(f"{K}**{N * T} = {M} configurations exceeds cap {cap}")
    codes = np.array(list(itertools.product(range(1, K + 1), repeat=N * T)), dtype=np.int8)
    return codes.reshape(M, N, T)


def _log_potentials(fields, theta, g):
    # Vectorised over configurations; equals field_statistics(.) @ theta.flat.
    T = fields.shape[2]
    f0 = fields.astype(np.int64) - 1
    b, bs, gm, gs, dl = theta.arrays()
    pairs = np.array(g.ordered_pairs(), dtype=np.int64).reshape(-1, 2) - 1
    out = b[f0[:, :, 0]].sum(axis=1)
    if len(pairs):
        out += gm[f0[:, pairs[:, 0], 0], f0[:, pairs[:, 1], 0]].sum(axis=1)
    for t in range(1, T):
        out += bs[f0[:, :, t]].sum(axis=1)
        if len(pairs):
            out += gs[f0[:, pairs[:, 0], t], f0[:, pairs[:, 1], t]].sum(axis=1)
        out += dl[f0[:, :, t - 1], f0[:, :, t]].sum(axis=1)
    return out


def log_partition_exact(theta: LatentParams, g: NeighborhoodSystem, T: int,
                        cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """``log Z_theta`` by exhaustive enumeration (tiny instances only)."""
    fields = enumerate_fields(g.n_sites, T, theta.K, cap)
    return float(logsumexp(_log_potentials(fields, theta, g)))


class FieldDistribution(NamedTuple):
    fields: np.ndarray
    probs: np.ndarray

    def prob(self, u) -> float:
        u = np.asarray(u)
        hit = np.all(self.fields == u[None], axis=(1, 2))
        return float(self.probs[hit].sum())

    def as_dict(self) -> dict:
        return {tuple(f.ravel().tolist()): float(p) for f, p in zip(self.fields, self.probs)}


def exact_field_distribution(theta: LatentParams, g: NeighborhoodSystem, T: int,
                             cap: int = DEFAULT_ENUMERATION_CAP) -> FieldDistribution:
    fields = enumerate_fields(g.n_sites, T, theta.K, cap)
    lq = _log_potentials(fields, theta, g)
    return FieldDistribution(fields, np.exp(lq - logsumexp(lq)))


def _check_site(i, t, u):
    N, T = u.shape
    if not (1 <= i <= N and 1 <= t <= T):
        raise IndexError(f"(site, time) = ({i}, {t}) outside 1..{N} x 1..{T}")


def conditional_scores(i: int, t: int, u, theta: LatentParams, g: NeighborhoodSystem) -> np.ndarray:
    """Unnormalised log conditional of ``U[i, t]`` over states ``1..K`` (1-based i, t)."""
    u = _check_field(u, theta.K, g)
    _check_site(i, t, u)
    out = np.empty(theta.K)
    _kernels.site_scores(i - 1, t - 1, u, theta.K, *theta.arrays(), g.indptr, g.indices, out)
    return out


def full_conditional(i: int, t: int, u, theta: LatentParams, g: NeighborhoodSystem) -> np.ndarray:
    """``p(U[i, t] = . | rest)`` as a length-K probability vector.

    Every edge incident to ``i`` contributes: ``gamma[k, u_j]`` when
    ``j > i`` and ``gamma[u_j, k]`` when ``j < i`` (``gamma*`` for t > 1).
    Temporal terms ``delta[u_i,t-1, k]`` and ``delta[k, u_i,t+1]`` appear
    only where the neighbouring time exists.
    """
    s = conditional_scores(i, t, u, theta, g)
    p = np.exp(s - s.max())
    return p / p.sum()


def log_odds(i: int, t: int, w: int, k: int, u, theta: LatentParams, g: NeighborhoodSystem) -> float:
    """``log p(U[i,t]=w | rest) / p(U[i,t]=k | rest)`` from the potential difference."""
    if w == k:
        raise LatentModelError("log-odds needs two distinct states")
    u = _check_field(u, theta.K, g)
    _check_site(i, t, u)
    if not (1 <= w <= theta.K and 1 <= k <= theta.K):
        raise LatentModelError(f"states must lie in 1..{theta.K}")
    uw = u.copy()
    uk = u.copy()
    uw[i - 1, t - 1] = w
    uk[i - 1, t - 1] = k
    return log_potential(uw, theta, g) - log_potential(uk, theta, g)


def gibbs_sweep(u, theta: LatentParams, g: NeighborhoodSystem, rng: np.random.Generator,
                n_sweeps: int = 1) -> np.ndarray:
    """Systematic-scan Gibbs update of the pure latent field, in place.

    Scan order is site-major then time.  ``u`` must be an int64 array; it is
    updated in place and also returned.
    """
    if not (isinstance(u, np.ndarray) and u.dtype == np.int64):
        raise LatentModelError("gibbs_sweep updates in place and needs an int64 ndarray")
    _check_field(u, theta.K, g)
    if theta.K == 1 or n_sweeps < 1:
        return u
    unif = rng.random((n_sweeps, u.size))
    _kernels.sweep(u, theta.K, *theta.arrays(), g.indptr, g.indices, _NO_LIK, unif)
    return u


_NO_LIK = np.zeros((0, 0, 0))


def log_pseudo_likelihood(u, theta: LatentParams, g: NeighborhoodSystem) -> float:
    """Sum over all (i, t) of ``log p(u_it | rest)``."""
    u = _check_field(u, theta.K, g)
    return float(_kernels.log_pseudo_likelihood(u, theta.K, *theta.arrays(), g.indptr, g.indices))


def uniform_field(N: int, T: int, K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(1, K + 1, size=(N, T), dtype=np.int64)


def write_field_csv(u, sink: TextIO, draw: int | None = None) -> None:
    """``site,time,state`` rows (1-based), optionally prefixed by a draw index."""
    w = csv.writer(sink, lineterminator="\n")
    u = np.asarray(u)
    if draw is None:
        w.writerow(["site", "time", "state"])
    for i in range(u.shape[0]):
        for t in range(u.shape[1]):
            row = [i + 1, t + 1, int(u[i, t])]
            w.writerow(row if draw is None else [draw] + row)


def read_field_csv(source: TextIO) -> np.ndarray:
    rows = list(csv.DictReader(source))
    if not rows:
        raise LatentModelError("empty field CSV")
    missing = {"site", "time", "state"} - set(rows[0])
    if missing:
        raise LatentModelError(f"field CSV missing columns {sorted(missing)}")
    N = max(int(r["site"]) for r in rows)
    T = max(int(r["time"]) for r in rows)
    u = np.zeros((N, T), dtype=np.int64)
    for r in rows:
        u[int(r["site"]) - 1, int(r["time"]) - 1] = int(r["state"])
    if np.any(u == 0):
        raise LatentModelError("field CSV does not cover every (site, time)")
    return u
