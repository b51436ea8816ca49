"""Compiled inner loops for the latent field.

All kernels take the field with 1-based labels and the CSR adjacency from
:class:`sthmm.graph.NeighborhoodSystem`.  Randomness is supplied as
pre-drawn uniforms so results depend only on the numpy Generator stream.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _scores(i, t, u, K, b, g, delta, indptr, indices, out):
    # b, g are the (beta, gamma) pair for time t.  Hot loops branch on t at
    # the call site; routing through site_scores costs ~10x per update.
    T = u.shape[1]
    for k in range(K):
        out[k] = b[k]
    for p in range(indptr[i], indptr[i + 1]):
        j = indices[p]
        lj = u[j, t] - 1
        if j > i:
            for k in range(K):
                out[k] += g[k, lj]
        else:
            for k in range(K):
                out[k] += g[lj, k]
    if t > 0:
        prev = u[i, t - 1] - 1
        for k in range(K):
            out[k] += delta[prev, k]
    if t < T - 1:
        nxt = u[i, t + 1] - 1
        for k in range(K):
            out[k] += delta[k, nxt]


@njit(cache=True)
def site_scores(i, t, u, K, beta, beta_star, gamma, gamma_star, delta, indptr, indices, out):
    # Unnormalised log conditional of U[i, t] = k for k = 1..K.
    if t == 0:
        _scores(i, t, u, K, beta, gamma, delta, indptr, indices, out)
    else:
        _scores(i, t, u, K, beta_star, gamma_star, delta, indptr, indices, out)


@njit(cache=True, inline="always")
def _draw(scores, K, v):
    m = scores[0]
    for k in range(1, K):
        if scores[k] > m:
            m = scores[k]
    total = 0.0
    for k in range(K):
        scores[k] = np.exp(scores[k] - m)
        total += scores[k]
    target = v * total
    acc = 0.0
    for k in range(K - 1):
        acc += scores[k]
        if target < acc:
            return k + 1
    return K


@njit(cache=True)
def sweep(u, K, beta, beta_star, gamma, gamma_star, delta, indptr, indices, loglik, uniforms):
    """Systematic scans (site-major, then time) over ``uniforms.shape[0]`` sweeps.

    ``loglik`` is either an (N, T, K) emission log-likelihood array or an
    empty (0, 0, 0) array for the pure latent model.
    """
    N, T = u.shape
    use_lik = loglik.shape[0] > 0
    scores = np.empty(K)
    for s in range(uniforms.shape[0]):
        c = 0
        for i in range(N):
            for t in range(T):
                if t == 0:
                    _scores(i, t, u, K, beta, gamma, delta, indptr, indices, scores)
                else:
                    _scores(i, t, u, K, beta_star, gamma_star, delta, indptr, indices, scores)
                if use_lik:
                    for k in range(K):
                        scores[k] += loglik[i, t, k]
                u[i, t] = _draw(scores, K, uniforms[s, c])
                c += 1


@njit(cache=True)
def log_pseudo_likelihood(u, K, beta, beta_star, gamma, gamma_star, delta, indptr, indices):
    N, T = u.shape
    scores = np.empty(K)
    total = 0.0
    for i in range(N):
        for t in range(T):
            if t == 0:
                _scores(i, t, u, K, beta, gamma, delta, indptr, indices, scores)
            else:
                _scores(i, t, u, K, beta_star, gamma_star, delta, indptr, indices, scores)
            m = scores[0]
            for k in range(1, K):
                if scores[k] > m:
                    m = scores[k]
            z = 0.0
            for k in range(K):
                z += np.exp(scores[k] - m)
            total += scores[u[i, t] - 1] - m - np.log(z)
    return total


@njit(cache=True)
def field_statistics(u, K, indptr, indices):
    # Flat layout: beta | beta_star | gamma | gamma_star | delta.
    N, T = u.shape
    f = np.zeros(2 * K + 3 * K * K)
    og = 2 * K
    ogs = og + K * K
    od = ogs + K * K
    for i in range(N):
        for t in range(T):
            a = u[i, t] - 1
            if t == 0:
                f[a] += 1.0
            else:
                f[K + a] += 1.0
                f[od + (u[i, t - 1] - 1) * K + a] += 1.0
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j > i:
                    b = u[j, t] - 1
                    if t == 0:
                        f[og + a * K + b] += 1.0
                    else:
                        f[ogs + a * K + b] += 1.0
    return f


@njit(cache=True)
def sweep_many(fields, K, beta, beta_star, gamma, gamma_star, delta, indptr, indices, uniforms):
    # Independent pure-latent chains: fields (J, N, T), uniforms (J, n_sweeps, N*T).
    no_lik = np.zeros((0, 0, 0))
    for j in range(fields.shape[0]):
        sweep(fields[j], K, beta, beta_star, gamma, gamma_star, delta, indptr, indices,
              no_lik, uniforms[j])


@njit(cache=True)
def field_statistics_many(fields, K, indptr, indices):
    J = fields.shape[0]
    out = np.empty((J, 2 * K + 3 * K * K))
    for j in range(J):
        out[j] = field_statistics(fields[j], K, indptr, indices)
    return out
