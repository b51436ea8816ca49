"""Posterior summaries and evaluation metrics for fitted chains."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, TextIO

import numpy as np

from .emission import Dataset, emission_loglik, EmissionParams
from .latent import LatentParams, flat_size, free_parameters
from .samplers import ChainOutput

MAX_PERMUTATION_K = 6


class DiagnosticsError(ValueError):
    pass


def _as_chain(x, min_len=100):
    x = np.asarray(x, dtype=float).ravel()
    if len(x) < min_len:
        raise DiagnosticsError(f"chain has {len(x)} draws, need at least {min_len}")
    return x


def spectrum0_ar(x, order_max: int | None = None) -> float:
    """Spectral density at frequency zero from an AIC-selected AR fit.

    Yule-Walker estimates via Levinson-Durbin; the spectral density of the
    fitted AR(p) at zero is ``sigma2_p / (1 - sum(phi))**2``.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if np.ptp(x) == 0.0:
        return 0.0
    xc = x - x.mean()
    c0 = xc @ xc / n
    if order_max is None:
        order_max = int(min(n - 1, np.floor(10 * np.log10(n))))
    acov = np.array([xc[: n - k] @ xc[k:] / n for k in range(order_max + 1)])
    best_aic = n * np.log(c0)
    best = (np.zeros(0), c0)
    phi = np.zeros(0)
    v = c0
    for p in range(1, order_max + 1):
        kappa = (acov[p] - phi @ acov[p - 1:0:-1]) / v if p > 1 else acov[1] / v
        phi = np.append(phi - kappa * phi[::-1], kappa)
        v *= 1.0 - kappa * kappa
        if v <= 0.0:
            break
        aic = n * np.log(v) + 2 * p
        if aic < best_aic:
            best_aic = aic
            best = (phi.copy(), v)
    phi_b, v_b = best
    return float(v_b / (1.0 - phi_b.sum()) ** 2)


class GewekeResult(NamedTuple):
    z: float
    passed: bool


def geweke(chain, frac_a: float = 0.1, frac_b: float = 0.5, critical: float = 1.96) -> GewekeResult:
    """Geweke comparison of the first ``frac_a`` and last ``frac_b`` of a chain.

    Segment variances use the AR spectral density at zero.  The chain passes
    when ``|z| < critical`` (1.96 is the two-sided 95% level).
    """
    x = _as_chain(chain)
    if not (0 < frac_a < 1 and 0 < frac_b < 1 and frac_a + frac_b <= 1):
        raise DiagnosticsError("segment fractions must be in (0, 1) and sum to at most 1")
    n = len(x)
    a = x[: int(np.floor(frac_a * n))]
    b = x[n - int(np.floor(frac_b * n)):]
    var = spectrum0_ar(a) / len(a) + spectrum0_ar(b) / len(b)
    if var == 0.0:
        # Both segments constant: means compared exactly, not via roundoff.
        z = 0.0 if a[0] == b[0] else float(np.sign(a[0] - b[0]) * np.inf)
    else:
        z = float((a.mean() - b.mean()) / np.sqrt(var))
    return GewekeResult(z, bool(abs(z) < critical))


def mcse_batch_means(chain) -> float:
    """Monte Carlo standard error from non-overlapping batches of size floor(sqrt(n))."""
    x = _as_chain(chain)
    n = len(x)
    b = int(np.floor(np.sqrt(n)))
    a = n // b
    means = x[: a * b].reshape(a, b).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(a))


def map_decode(output: ChainOutput) -> np.ndarray:
    """Per-coordinate modal state over the stored field draws (ties to the lower label)."""
    if output.fields is None or len(output.fields) == 0:
        raise DiagnosticsError("no stored latent fields")
    f = output.fields.astype(np.int64)
    K = output.K
    counts = np.stack([(f == k).sum(axis=0) for k in range(1, K + 1)], axis=-1)
    return counts.argmax(axis=-1).astype(np.int64) + 1


def misclassification(estimated, truth) -> float:
    """Fraction of coordinates that differ under the best relabelling of ``estimated``."""
    est = np.asarray(estimated)
    tru = np.asarray(truth)
    if est.shape != tru.shape:
        raise DiagnosticsError(f"shape mismatch {est.shape} vs {tru.shape}")
    K = int(max(est.max(), tru.max()))
    if K > MAX_PERMUTATION_K:
        raise DiagnosticsError(f"label permutation search refused for K={K} > {MAX_PERMUTATION_K}")
    best = 1.0
    for perm in itertools.permutations(range(1, K + 1)):
        lut = np.array((0,) + perm)
        best = min(best, float(np.mean(lut[est] != tru)))
        if best == 0.0:
            break
    return best


def mae(estimates, truths) -> np.ndarray:
    """Per-parameter mean absolute error over replicates (rows of ``estimates``)."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    return np.mean(np.abs(est - np.asarray(truths, dtype=float)), axis=0)


# --- label handling ---------------------------------------------------------


def permute_theta(theta: LatentParams, perm) -> LatentParams:
    """Re-express ``theta`` so that new state ``a`` is old state ``perm[a-1]``.

    Prevalences are re-centred so the last state keeps a zero prevalence;
    the constant shift cancels in the normalising constant.
    """
    p = np.asarray(perm) - 1
    b = theta.beta[p] - theta.beta[p[-1]]
    bs = theta.beta_star[p] - theta.beta_star[p[-1]]
    ix = np.ix_(p, p)
    return LatentParams(b, bs, theta.gamma[ix], theta.gamma_star[ix], theta.delta[ix],
                        theta.symmetric, theta.shared_time)


def pivot_permutations(mu, coordinate: int = 0, max_iter: int = 50) -> np.ndarray:
    """Per-draw label permutations aligning state means to a common pivot.

    Starts from ordering each draw by ``mu[:, :, coordinate]``, then
    alternates between averaging the aligned means into a pivot and
    re-matching every draw to it by least squared distance over all K!
    permutations.  The pivot's states are finally ordered by ascending
    ``coordinate`` (ties broken by the later coordinates).

    Returns an (n, K) array of 1-based labels: new state ``a`` of draw ``j``
    is old state ``perms[j, a-1]``.
    """
    mu = np.asarray(mu, dtype=float)
    n, K, d = mu.shape
    if K > MAX_PERMUTATION_K:
        raise DiagnosticsError(f"label permutation search refused for K={K} > {MAX_PERMUTATION_K}")
    all_perms = np.array(list(itertools.permutations(range(K))))
    perms = np.argsort(mu[:, :, coordinate], axis=1, kind="stable")
    cols = np.arange(K)
    for _ in range(max_iter):
        pivot = np.take_along_axis(mu, perms[:, :, None], axis=1).mean(axis=0)
        new = np.empty_like(perms)
        for lo in range(0, n, 1000):
            m = mu[lo:lo + 1000]
            dist = ((m[:, :, None, :] - pivot[None, None]) ** 2).sum(-1)  # (b, old, pivot)
            cost = dist[:, all_perms, cols].sum(-1)
            new[lo:lo + 1000] = all_perms[cost.argmin(axis=1)]
        if np.array_equal(new, perms):
            break
        perms = new
    pivot = np.take_along_axis(mu, perms[:, :, None], axis=1).mean(axis=0)
    keys = [pivot[:, h] for h in range(d - 1, -1, -1) if h != coordinate] + [pivot[:, coordinate]]
    order = np.lexsort(keys)
    return perms[:, order] + 1


def relabel_by_mu(output: ChainOutput, coordinate: int = 0) -> ChainOutput:
    """Relabel every draw consistently, states ordered by ascending mean component.

    Labels are matched draw by draw with :func:`pivot_permutations`; the
    latent parameters, emissions and stored fields of a draw all receive
    that draw's permutation.
    """
    K = output.K
    free = free_parameters(K, output.symmetric, output.shared_time)
    theta = output.theta.copy()
    mu = output.mu.copy()
    sigma = output.sigma.copy()
    perms = pivot_permutations(output.mu, coordinate) if output.n_draws else np.zeros((0, K), int)
    for j in range(output.n_draws):
        perm = perms[j]
        if np.array_equal(perm, np.arange(1, K + 1)):
            continue
        flat = np.zeros(flat_size(K))
        for p, v in zip(free, output.theta[j]):
            flat[list(p.entries)] = v
        th = LatentParams.from_flat(K, flat, output.symmetric, output.shared_time)
        theta[j] = permute_theta(th, perm).free_vector()
        mu[j] = output.mu[j, perm - 1]
        sigma[j] = output.sigma[j, perm - 1]
    fields = None
    if output.fields is not None:
        fields = output.fields.copy()
        for jf, idx in enumerate(output.field_draws):
            inv = np.empty(K + 1, dtype=np.int64)
            inv[0] = 0
            inv[perms[idx - 1]] = np.arange(1, K + 1)
            fields[jf] = inv[output.fields[jf]]
    return replace(output, theta=theta, mu=mu, sigma=sigma, fields=fields)


# --- deviance information criterion -----------------------------------------


class DICResult(NamedTuple):
    dic: float
    dbar: float
    dhat: float
    p_d: float


def deviance(y, u, emission: EmissionParams) -> float:
    """``-2 log p(y | u, mu, Sigma)``."""
    ll = emission_loglik(y, emission)
    N, T = u.shape
    return float(-2.0 * np.take_along_axis(ll, (np.asarray(u) - 1)[..., None], axis=2).sum())


def dic(output: ChainOutput, dataset: Dataset) -> DICResult:
    """DIC from the complete-data likelihood ``p(y | u, mu, Sigma)``.

    ``Dbar`` averages the deviance over draws with a stored field; ``Dhat``
    plugs in posterior-mean emissions and the MAP field.
    """
    if output.fields is None or len(output.fields) == 0:
        raise DiagnosticsError("DIC needs stored latent-field draws")
    devs = []
    for f, idx in zip(output.fields, output.field_draws):
        em = EmissionParams(output.mu[idx - 1], output.sigma[idx - 1])
        devs.append(deviance(dataset.y, f.astype(np.int64), em))
    dbar = float(np.mean(devs))
    em_hat = EmissionParams(output.mu.mean(axis=0), output.sigma.mean(axis=0))
    dhat = deviance(dataset.y, map_decode(output), em_hat)
    p_d = dbar - dhat
    return DICResult(dbar + p_d, dbar, dhat, p_d)


# --- report -----------------------------------------------------------------


@dataclass
class ParameterSummary:
    name: str
    mean: float
    mcse: float | None
    geweke_z: float | None
    geweke_pass: bool | None
    truth: float | None = None
    abs_error: float | None = None


@dataclass
class DiagnosticsReport:
    algorithm: str
    n_draws: int
    parameters: list[ParameterSummary]
    acceptance: dict[str, float]
    dic: float | None = None
    dbar: float | None = None
    dhat: float | None = None
    p_d: float | None = None
    misclassification: float | None = None
    map_field: list | None = field(default=None, repr=False)
    mae_theta: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, sink: TextIO) -> None:
        json.dump(self.to_dict(), sink, indent=2, sort_keys=False)
        sink.write("\n")

    def to_csv(self, sink: TextIO) -> None:
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(["parameter", "mean", "mcse", "geweke_z", "geweke_pass", "truth", "abs_error"])
        for p in self.parameters:
            w.writerow([p.name, _fmt(p.mean), _fmt(p.mcse), _fmt(p.geweke_z),
                        "" if p.geweke_pass is None else ("yes" if p.geweke_pass else "no"),
                        _fmt(p.truth), _fmt(p.abs_error)])


def _fmt(v):
    return "" if v is None else repr(float(v))


def true_columns(dataset: Dataset, output: ChainOutput) -> dict[str, float]:
    """True values keyed like :meth:`ChainOutput.column_names`, where known."""
    out = {}
    th = dataset.true_theta
    if th is not None and th.K == output.K:
        th = LatentParams.from_flat(th.K, th.flat, output.symmetric, output.shared_time) \
            if (th.symmetric, th.shared_time) != (output.symmetric, output.shared_time) else th
        out.update(zip(output.theta_names, th.free_vector().tolist()))
    em = dataset.true_emission
    if em is not None and em.K == output.K:
        K, d = em.K, em.d
        for k in range(K):
            for h in range(d):
                out[f"mu_{k + 1}_{h + 1}"] = float(em.mu[k, h])
                for l in range(h, d):
                    out[f"sigma_{k + 1}_{h + 1}_{l + 1}"] = float(em.sigma[k, h, l])
    return out


def diagnose(output: ChainOutput, dataset: Dataset | None = None,
             frac_a: float = 0.1, frac_b: float = 0.5) -> DiagnosticsReport:
    names = output.column_names()
    mat = output.matrix()
    truth = true_columns(dataset, output) if dataset is not None else {}
    params = []
    for c, name in enumerate(names):
        x = mat[:, c]
        long_enough = len(x) >= 100
        gz = geweke(x, frac_a, frac_b) if long_enough else None
        t = truth.get(name)
        params.append(ParameterSummary(
            name=name, mean=float(x.mean()),
            mcse=mcse_batch_means(x) if long_enough else None,
            geweke_z=None if gz is None else (gz.z if np.isfinite(gz.z) else None),
            geweke_pass=None if gz is None else gz.passed,
            truth=t, abs_error=None if t is None else abs(float(x.mean()) - t),
        ))
    rep = DiagnosticsReport(
        algorithm=output.algorithm, n_draws=output.n_draws, parameters=params,
        acceptance=dict(zip(output.theta_names, output.acceptance.tolist())),
    )
    theta_err = [p.abs_error for p in params if p.name in output.theta_names and p.abs_error is not None]
    if theta_err:
        rep.mae_theta = float(np.mean(theta_err))
    if output.fields is not None and len(output.fields):
        u_map = map_decode(output)
        rep.map_field = u_map.tolist()
        if dataset is not None:
            d = dic(output, dataset)
            rep.dic, rep.dbar, rep.dhat, rep.p_d = d
            if dataset.true_field is not None:
                rep.misclassification = misclassification(u_map, dataset.true_field)
    return rep
