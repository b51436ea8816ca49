"""MCMC engines for the spatio-temporal hidden Markov model.

One iteration of :func:`run_chain` performs, in order:

1. conjugate Gibbs updates of every state's mean and covariance,
2. one random-walk Metropolis step per free latent parameter, using either
   the pseudo-likelihood (``algorithm="pseudo"``) or the approximate
   exchange construction (``"exchange"``, or ``"noisy_exchange"`` with
   ``noisy_j`` auxiliary fields),
3. one systematic Gibbs sweep of the latent field, weighted by the emission
   densities.

Proposal scales adapt on the log scale with step ``C / r`` for the first
``adapt_fraction`` of the run and are frozen afterwards.

Random streams
--------------
Every stream is a ``numpy.random.SeedSequence`` child of the master seed,
addressed by an explicit spawn key (see :func:`child_seed`).  A chain started
with :func:`init_chain` draws its starting values from key ``(0,)`` and its
transition randomness from key ``(1,)``, so two chains initialised from the
same seed share their starting values whatever algorithm they run.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import _kernels
from .emission import (
    Dataset,
    EmissionError,
    EmissionParams,
    GaussianPriors,
    UnivariatePriors,
    default_priors,
    emission_loglik,
    sample_inverse_wishart,
    sample_mu,
    sample_mu_univariate,
    sample_sigma,
    sample_sigma_univariate,
)
from .graph import NeighborhoodSystem
from .latent import FreeParameter, LatentParams, uniform_field

ALGORITHMS = ("pseudo", "exchange", "noisy_exchange")

_NO_LIK = np.zeros((0, 0, 0))


class SamplerError(RuntimeError):
    pass


def child_seed(seed, *key) -> np.random.SeedSequence:
    """Deterministic child stream of ``seed`` addressed by ``key``.

    ``child_seed(s, a, b)`` equals ``SeedSequence(s, spawn_key=(a, b))`` and
    nesting composes: ``child_seed(child_seed(s, a), b)`` is the same stream.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in key))


@dataclass
class SamplerConfig:
    iterations: int = 10_000
    burn_in: int = 5_000
    thinning: int = 1
    algorithm: str = "exchange"
    aux_iterations: int = 5
    # (M0, rho): use max(aux_iterations, M0 - r // rho) auxiliary sweeps at iteration r.
    aux_schedule: tuple[int, int] | None = None
    warm_start: bool = True
    noisy_j: int = 1
    target_accept: float = 0.44
    step_constant: float = 1.0
    adapt_fraction: float = 0.5
    initial_scale: float = 1.0
    theta_prior_sd: float | dict = 1.0
    symmetric: bool = False
    shared_time: bool = False
    update_emissions: bool = True
    store_fields: bool = True
    field_thinning: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thinning < 1 or self.field_thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.aux_iterations < 1:
            raise ValueError("aux_iterations must be >= 1")
        if self.aux_schedule is not None:
            m0, rho = self.aux_schedule
            if rho < 1:
                raise ValueError("aux_schedule rho must be >= 1")
        if self.noisy_j < 1:
            raise ValueError("noisy_j must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.step_constant < 0 or not 0.0 <= self.adapt_fraction <= 1.0:
            raise ValueError("bad adaptation settings")
        if self.initial_scale <= 0:
            raise ValueError("initial_scale must be positive")

    def aux_sweeps(self, r: int) -> int:
        """Number of auxiliary Gibbs sweeps at iteration ``r`` (non-increasing in r)."""
        if self.aux_schedule is None:
            return self.aux_iterations
        m0, rho = self.aux_schedule
        return max(self.aux_iterations, m0 - r // rho)

    def prior_sd(self, name: str) -> float:
        sd = self.theta_prior_sd
        if isinstance(sd, dict):
            family = name.rsplit("_", 2 if name.startswith(("gamma", "delta")) else 1)[0]
            sd = sd.get(family, 1.0)
        return float(sd)

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning


@dataclass
class ChainState:
    theta: LatentParams
    emission: EmissionParams
    u: np.ndarray
    log_scale: np.ndarray
    rng: np.random.Generator
    r: int = 0
    n_accept: np.ndarray | None = None
    n_accept_post: np.ndarray | None = None
    stats_u: np.ndarray | None = None
    log_pseudo_u: float | None = None

    def __post_init__(self):
        p = len(self.log_scale)
        if self.n_accept is None:
            self.n_accept = np.zeros(p, dtype=np.int64)
        if self.n_accept_post is None:
            self.n_accept_post = np.zeros(p, dtype=np.int64)


@dataclass(frozen=True)
class StepResult:
    accepted: bool
    log_ratio: float

    @property
    def alpha(self) -> float:
        return float(np.exp(min(0.0, self.log_ratio)))


def _moment_start(y, K):
    N, T, d = y.shape
    flat = y.reshape(-1, d)
    order = np.argsort(flat[:, 0], kind="stable")
    groups = np.array_split(order, K)
    mu = np.array([flat[g].mean(axis=0) if len(g) else flat.mean(axis=0) for g in groups])
    cov = np.atleast_2d(np.cov(flat.T)) + 1e-6 * np.eye(d) if len(flat) > 1 else np.eye(d)
    return EmissionParams(mu, np.repeat(cov[None], K, axis=0))


def init_chain(dataset: Dataset, K: int, seed, priors=None, *, emission_init: str = "prior",
               symmetric: bool = False, shared_time: bool = False,
               initial_scale: float = 1.0) -> ChainState:
    """Starting state: iid uniform field, theta = 0, emissions from the prior.

    Identical ``seed`` gives an identical state regardless of which
    algorithm later runs from it.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if priors is None:
        priors = default_priors(dataset.d, univariate=False)
    rng = np.random.default_rng(child_seed(seed, 0))
    u = uniform_field(dataset.N, dataset.T, K, rng)
    theta = LatentParams.zeros(K, symmetric, shared_time)
    if emission_init == "moment":
        em = _moment_start(dataset.y, K)
    elif emission_init == "prior":
        if isinstance(priors, UnivariatePriors):
            mu = priors.m + np.sqrt(priors.v) * rng.standard_normal((K, 1))
            s2 = priors.b / rng.gamma(priors.a, size=K)
            em = EmissionParams(mu, s2[:, None, None])
        else:
            Lv = np.linalg.cholesky(priors.V)
            mu = priors.m + rng.standard_normal((K, priors.d)) @ Lv.T
            sig = np.array([sample_inverse_wishart(priors.nu, priors.S, rng) for _ in range(K)])
            em = EmissionParams(mu, sig)
    else:
        raise ValueError(f"emission_init must be 'prior' or 'moment', got {emission_init!r}")
    p = len(theta.free_parameters())
    return ChainState(theta=theta, emission=em, u=u,
                      log_scale=np.full(p, np.log(initial_scale)),
                      rng=np.random.default_rng(child_seed(seed, 1)))


# --- latent-parameter moves -------------------------------------------------


def _refresh_cache(state: ChainState, g: NeighborhoodSystem):
    state.stats_u = _kernels.field_statistics(state.u, state.theta.K, g.indptr, g.indices)
    state.log_pseudo_u = None


def _log_pseudo(u, theta, g):
    return _kernels.log_pseudo_likelihood(u, theta.K, *theta.arrays(), g.indptr, g.indices)


def _propose(state: ChainState, k: int, p: FreeParameter, config: SamplerConfig, rng):
    cur = state.theta.get(p)
    new = cur + np.exp(state.log_scale[k]) * rng.standard_normal()
    sd = config.prior_sd(p.name)
    log_prior_ratio = (cur * cur - new * new) / (2.0 * sd * sd)
    return state.theta.with_value(p, new), log_prior_ratio


def _mh(state, k, theta_new, log_r, rng, burned_in):
    accepted = bool(np.log(rng.random()) < log_r)
    if accepted:
        state.theta = theta_new
        state.log_pseudo_u = None
        state.n_accept[k] += 1
        if burned_in:
            state.n_accept_post[k] += 1
    return StepResult(accepted, float(log_r))


def pseudo_theta_step(state: ChainState, k: int, g: NeighborhoodSystem, config: SamplerConfig,
                      rng=None, burned_in: bool = False) -> StepResult:
    """Random-walk step for free parameter ``k`` against the pseudo-likelihood.

    The latent density is replaced by the product of all full conditionals
    at the current field, so no normalising constant appears.
    """
    rng = state.rng if rng is None else rng
    p = state.theta.free_parameters()[k]
    theta_new, log_r = _propose(state, k, p, config, rng)
    if state.log_pseudo_u is None:
        state.log_pseudo_u = _log_pseudo(state.u, state.theta, g)
    lp_new = _log_pseudo(state.u, theta_new, g)
    log_r += lp_new - state.log_pseudo_u
    res = _mh(state, k, theta_new, log_r, rng, burned_in)
    if res.accepted:
        state.log_pseudo_u = lp_new
    return res


def auxiliary_fields(u, theta_tilde: LatentParams, g: NeighborhoodSystem, n_sweeps: int,
                     rng, n_fields: int = 1, warm_start: bool = True) -> np.ndarray:
    """Auxiliary draws under ``theta_tilde`` from ``n_sweeps`` Gibbs sweeps each.

    With ``warm_start`` each auxiliary chain starts from the current latent
    field ``u``; otherwise from an iid uniform field.  Returns an
    (n_fields, N, T) array.
    """
    N, T = np.shape(u)
    K = theta_tilde.K
    if warm_start:
        w = np.repeat(np.asarray(u, dtype=np.int64)[None], n_fields, axis=0)
    else:
        w = rng.integers(1, K + 1, size=(n_fields, N, T), dtype=np.int64)
    if K > 1:
        _kernels.sweep_many(w, K, *theta_tilde.arrays(), g.indptr, g.indices,
                            rng.random((n_fields, n_sweeps, N * T)))
    return w


def log_noisy_exchange_ratio(theta: LatentParams, theta_tilde: LatentParams, omegas,
                             g: NeighborhoodSystem) -> float:
    """``log[(1/J) sum_j q_theta(w_j) / q_theta_tilde(w_j)]``, an estimate of log Z_theta/Z_theta_tilde."""
    stats = _kernels.field_statistics_many(np.asarray(omegas, dtype=np.int64), theta.K, g.indptr, g.indices)
    terms = stats @ (theta.flat - theta_tilde.flat)
    if len(terms) == 1:
        return float(terms[0])
    m = terms.max()
    return float(m + np.log(np.mean(np.exp(terms - m))))


def noisy_exchange_ratio(theta, theta_tilde, omegas, g) -> float:
    return float(np.exp(log_noisy_exchange_ratio(theta, theta_tilde, omegas, g)))


def exchange_theta_step(state: ChainState, k: int, g: NeighborhoodSystem, config: SamplerConfig,
                        rng=None, burned_in: bool = False) -> StepResult:
    """Approximate exchange step for free parameter ``k``.

    The auxiliary field is the last state of ``config.aux_sweeps(r)``
    Gibbs sweeps under the proposed parameters.  The log acceptance ratio is

        log p(th~)/p(th) + (th~ - th) . f(u) + log mean_j exp((th - th~) . f(w_j))

    which for one auxiliary field is the usual exchange ratio
    ``q_th~(u) q_th(w) / (q_th(u) q_th~(w))`` times the prior ratio.
    """
    rng = state.rng if rng is None else rng
    p = state.theta.free_parameters()[k]
    theta_new, log_r = _propose(state, k, p, config, rng)
    J = config.noisy_j if config.algorithm == "noisy_exchange" else 1
    omegas = auxiliary_fields(state.u, theta_new, g, config.aux_sweeps(max(state.r, 1)), rng,
                              n_fields=J, warm_start=config.warm_start)
    if state.stats_u is None:
        _refresh_cache(state, g)
    log_r += (theta_new.flat - state.theta.flat) @ state.stats_u
    log_r += log_noisy_exchange_ratio(state.theta, theta_new, omegas, g)
    return _mh(state, k, theta_new, log_r, rng, burned_in)


def adapt_scale(log_scale: float, observed_alpha: float, r: int, config: SamplerConfig) -> float:
    """Robbins-Monro update of a log proposal scale.

    ``log phi += (C / r) (alpha - alpha*)`` while ``r <= adapt_fraction * R``;
    afterwards the step size is zero and the scale is frozen.
    """
    if r < 1:
        raise ValueError("iteration counter starts at 1")
    if r > config.adapt_fraction * config.iterations:
        return log_scale
    return log_scale + (config.step_constant / r) * (observed_alpha - config.target_accept)


# --- latent field and emission moves ----------------------------------------


def latent_sweep(state: ChainState, dataset: Dataset, rng=None) -> np.ndarray:
    """Gibbs sweep of every U[i, t] from its emission-weighted full conditional."""
    rng = state.rng if rng is None else rng
    K = state.theta.K
    if K > 1:
        loglik = emission_loglik(dataset.y, state.emission)
        _kernels.sweep(state.u, K, *state.theta.arrays(), dataset.graph.indptr, dataset.graph.indices,
                       loglik, rng.random((1, state.u.size)))
    _refresh_cache(state, dataset.graph)
    return state.u


def update_emissions(state: ChainState, dataset: Dataset, priors, rng=None) -> EmissionParams:
    rng = state.rng if rng is None else rng
    K = state.emission.K
    mu = state.emission.mu.copy()
    sigma = state.emission.sigma.copy()
    for k in range(K):
        s = k + 1
        if isinstance(priors, UnivariatePriors):
            mu[k, 0] = sample_mu_univariate(s, dataset, state.u, sigma[k, 0, 0], priors, rng)
            sigma[k, 0, 0] = sample_sigma_univariate(s, dataset, state.u, mu[k, 0], priors, rng)
        else:
            mu[k] = sample_mu(s, dataset, state.u, sigma[k], priors, rng)
            sigma[k] = sample_sigma(s, dataset, state.u, mu[k], priors, rng)
    state.emission = EmissionParams(mu, sigma)
    return state.emission


# --- chain driver -----------------------------------------------------------


@dataclass
class ChainOutput:
    """Thinned post-burn-in draws of one chain."""

    algorithm: str
    theta_names: list[str]
    theta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    fields: np.ndarray | None
    field_draws: np.ndarray
    acceptance: np.ndarray
    acceptance_post: np.ndarray
    final_log_scale: np.ndarray
    wall_clock: float
    symmetric: bool = False
    shared_time: bool = False
    config: SamplerConfig | None = field(default=None, repr=False)

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    @property
    def K(self) -> int:
        return self.mu.shape[1]

    @property
    def d(self) -> int:
        return self.mu.shape[2]

    def column_names(self) -> list[str]:
        K, d = self.K, self.d
        names = list(self.theta_names)
        names += [f"mu_{k + 1}_{h + 1}" for k in range(K) for h in range(d)]
        names += [f"sigma_{k + 1}_{h + 1}_{l + 1}" for k in range(K) for h in range(d) for l in range(h, d)]
        return names

    def matrix(self) -> np.ndarray:
        """All scalar draws, one column per :meth:`column_names` entry."""
        K, d = self.K, self.d
        iu = np.triu_indices(d)
        sig = self.sigma[:, :, iu[0], iu[1]].reshape(self.n_draws, -1)
        return np.hstack([self.theta, self.mu.reshape(self.n_draws, K * d), sig])

    def column(self, name: str) -> np.ndarray:
        return self.matrix()[:, self.column_names().index(name)]

    def posterior_means(self) -> dict[str, float]:
        return dict(zip(self.column_names(), self.matrix().mean(axis=0).tolist()))

    def theta_means(self, K=None) -> LatentParams:
        """Posterior-mean latent parameters as a :class:`LatentParams`."""
        flat = np.zeros(2 * self.K + 3 * self.K ** 2)
        for p, v in zip(_free_list(self), self.theta.mean(axis=0)):
            flat[list(p.entries)] = v
        return LatentParams.from_flat(self.K, flat, self.symmetric, self.shared_time)

    def to_csv(self, sink: TextIO) -> None:
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(["draw"] + self.column_names())
        for r, row in enumerate(self.matrix(), start=1):
            w.writerow([r] + [repr(float(v)) for v in row])

    def fields_to_csv(self, sink: TextIO) -> None:
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(["draw", "site", "time", "state"])
        if self.fields is None:
            return
        for idx, f in zip(self.field_draws, self.fields):
            for i in range(f.shape[0]):
                for t in range(f.shape[1]):
                    w.writerow([int(idx), i + 1, t + 1, int(f[i, t])])


def _free_list(out: ChainOutput):
    from .latent import free_parameters
    return free_parameters(out.K, out.symmetric, out.shared_time)


def run_chain(dataset: Dataset, priors, config: SamplerConfig, init: ChainState) -> ChainOutput:
    """Run one chain from ``init`` (which is copied, never modified)."""
    if priors is None:
        priors = default_priors(dataset.d)
    if isinstance(priors, UnivariatePriors) and dataset.d != 1:
        raise ValueError("univariate priors need one-dimensional observations")
    if isinstance(priors, GaussianPriors) and priors.d != dataset.d:
        raise ValueError(f"priors have d={priors.d}, data have d={dataset.d}")
    if init.u.shape != (dataset.N, dataset.T):
        raise ValueError("initial field does not match the data dimensions")
    if init.emission.d != dataset.d:
        raise ValueError("initial emission parameters do not match the data dimension")
    state = copy.deepcopy(init)
    state.theta = LatentParams.from_flat(init.theta.K, init.theta.flat, config.symmetric, config.shared_time)
    free = state.theta.free_parameters()
    if len(state.log_scale) != len(free):
        state.log_scale = np.full(len(free), np.log(config.initial_scale))
        state.n_accept = np.zeros(len(free), dtype=np.int64)
        state.n_accept_post = np.zeros(len(free), dtype=np.int64)
    g = dataset.graph
    K, d = state.emission.K, dataset.d
    rng = state.rng
    step = pseudo_theta_step if config.algorithm == "pseudo" else exchange_theta_step

    n = config.n_draws
    th = np.empty((n, len(free)))
    mus = np.empty((n, K, d))
    sigs = np.empty((n, K, d, d))
    keep_fields = config.store_fields
    n_fields = (n + config.field_thinning - 1) // config.field_thinning if keep_fields else 0
    fields = np.empty((n_fields, dataset.N, dataset.T), dtype=np.int8) if keep_fields else None
    field_draws = np.empty(n_fields, dtype=np.int64)

    _refresh_cache(state, g)
    t0 = time.perf_counter()
    j = 0
    jf = 0
    for r in range(1, config.iterations + 1):
        state.r = r
        burned = r > config.burn_in
        try:
            if config.update_emissions:
                update_emissions(state, dataset, priors, rng)
            for k in range(len(free)):
                res = step(state, k, g, config, rng, burned_in=burned)
                state.log_scale[k] = adapt_scale(state.log_scale[k], res.alpha, r, config)
            latent_sweep(state, dataset, rng)
        except EmissionError as e:
            raise SamplerError(f"iteration {r}: {e}") from e
        if burned and (r - config.burn_in) % config.thinning == 0:
            th[j] = state.theta.free_vector()
            mus[j] = state.emission.mu
            sigs[j] = state.emission.sigma
            if keep_fields and j % config.field_thinning == 0:
                fields[jf] = state.u
                field_draws[jf] = j + 1
                jf += 1
            j += 1
    wall = time.perf_counter() - t0
    return ChainOutput(
        algorithm=config.algorithm,
        theta_names=[p.name for p in free],
        theta=th, mu=mus, sigma=sigs, fields=fields, field_draws=field_draws,
        acceptance=state.n_accept / config.iterations,
        acceptance_post=state.n_accept_post / max(config.iterations - config.burn_in, 1),
        final_log_scale=state.log_scale.copy(), wall_clock=wall,
        symmetric=config.symmetric, shared_time=config.shared_time, config=config,
    )


def fit(dataset: Dataset, K: int, config: SamplerConfig, seed, priors=None,
        emission_init: str = "prior") -> ChainOutput:
    """Initialise with :func:`init_chain` and run one chain."""
    priors = default_priors(dataset.d) if priors is None else priors
    init = init_chain(dataset, K, seed, priors, emission_init=emission_init,
                      symmetric=config.symmetric, shared_time=config.shared_time,
                      initial_scale=config.initial_scale)
    return run_chain(dataset, priors, config, init)
