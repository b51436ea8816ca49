import io
import json

import numpy as np
import pytest

from conftest import random_theta
from sthmm.diagnostics import (
    DiagnosticsError,
    deviance,
    diagnose,
    dic,
    geweke,
    mae,
    map_decode,
    mcse_batch_means,
    misclassification,
    permute_theta,
    pivot_permutations,
    relabel_by_mu,
    spectrum0_ar,
)
from sthmm.emission import Dataset, EmissionParams
from sthmm.graph import NeighborhoodSystem, build_grid
from sthmm.latent import LatentParams, exact_field_distribution, free_parameters
from sthmm.samplers import ChainOutput, SamplerConfig, fit


def make_output(mu, sigma=None, fields=None, theta=None):
    mu = np.asarray(mu, dtype=float)
    n, K, d = mu.shape
    if sigma is None:
        sigma = np.broadcast_to(np.eye(d), (n, K, d, d)).copy()
    names = [p.name for p in free_parameters(K)]
    if theta is None:
        theta = np.zeros((n, len(names)))
    nf = 0 if fields is None else len(fields)
    return ChainOutput(
        algorithm="exchange", theta_names=names, theta=theta, mu=mu, sigma=sigma,
        fields=None if fields is None else np.asarray(fields, dtype=np.int8),
        field_draws=np.arange(1, nf + 1), acceptance=np.zeros(len(names)),
        acceptance_post=np.zeros(len(names)), final_log_scale=np.zeros(len(names)), wall_clock=0.0,
    )


def ar1(n, rho, rng):
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - rho ** 2)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    return x


class TestGeweke:
    def test_constant_chain(self):
        r = geweke(np.full(500, 3.2))
        assert r.z == 0.0 and r.passed

    def test_linear_trend(self):
        r = geweke(np.arange(1.0, 1001.0))
        assert abs(r.z) > 5 and not r.passed

    def test_iid_pass_rate(self):
        rng = np.random.default_rng(0)
        rate = np.mean([geweke(rng.standard_normal(1000)).passed for _ in range(400)])
        # 400 replicates: binomial s.e. about 1.1%.
        assert abs(rate - 0.95) < 0.04

    def test_shift_invariant(self, rng):
        x = ar1(2000, 0.5, rng)
        assert geweke(x + 100.0).z == pytest.approx(geweke(x).z, rel=1e-6)

    def test_short_chain(self):
        with pytest.raises(DiagnosticsError, match="at least 100"):
            geweke(np.zeros(99))

    def test_bad_fractions(self, rng):
        with pytest.raises(DiagnosticsError):
            geweke(rng.standard_normal(200), 0.6, 0.5)


class TestSpectrum:
    def test_white_noise(self, rng):
        assert spectrum0_ar(rng.standard_normal(20_000)) == pytest.approx(1.0, rel=0.1)

    def test_ar1(self, rng):
        # Spectral density at zero of AR(1): 1 / (1 - rho)^2.
        assert spectrum0_ar(ar1(50_000, 0.8, rng)) == pytest.approx(25.0, rel=0.15)


class TestMcse:
    def test_constant(self):
        assert mcse_batch_means(np.ones(400)) == 0.0

    def test_iid_asymptotics(self):
        x = np.random.default_rng(1).standard_normal(10 ** 6)
        assert mcse_batch_means(x) == pytest.approx(1e-3, rel=0.2)

    def test_ar1_exceeds_iid(self, rng):
        n = 10_000
        iid = mcse_batch_means(rng.standard_normal(n) / np.sqrt(1 - 0.81))
        assert mcse_batch_means(ar1(n, 0.9, rng)) > 2 * iid

    def test_batch_formula(self):
        x = np.arange(100.0)
        means = x.reshape(10, 10).mean(axis=1)
        assert mcse_batch_means(x) == pytest.approx(means.std(ddof=1) / np.sqrt(10))

    def test_shift_invariant(self, rng):
        x = rng.standard_normal(900)
        assert mcse_batch_means(x + 7.0) == pytest.approx(mcse_batch_means(x), rel=1e-9)

    def test_short(self):
        with pytest.raises(DiagnosticsError):
            mcse_batch_means(np.zeros(10))


class TestMapDecode:
    def test_identical_draws(self, rng):
        f = rng.integers(1, 4, (3, 2))
        out = make_output(np.zeros((4, 3, 1)), fields=[f] * 4)
        np.testing.assert_array_equal(map_decode(out), f)

    def test_majority(self):
        fields = np.array([[[1]], [[1]], [[2]]])
        assert map_decode(make_output(np.zeros((3, 2, 1)), fields=fields))[0, 0] == 1

    def test_tie_goes_to_lower_label(self):
        fields = np.array([[[2]], [[1]]])
        assert map_decode(make_output(np.zeros((2, 2, 1)), fields=fields))[0, 0] == 1

    def test_no_fields(self):
        with pytest.raises(DiagnosticsError):
            map_decode(make_output(np.zeros((2, 2, 1))))


class TestMisclassification:
    def test_identical(self, rng):
        f = rng.integers(1, 4, (5, 4))
        assert misclassification(f, f) == 0.0

    def test_swapped_labels(self, rng):
        f = rng.integers(1, 3, (5, 4))
        assert misclassification(3 - f, f) == 0.0

    def test_complementary_binary(self):
        a = np.array([[1, 2], [2, 1]])
        assert np.mean(a != 3 - a) == 1.0
        assert misclassification(a, 3 - a) == 0.0

    def test_symmetric_and_permutation_invariant(self, rng):
        a = rng.integers(1, 4, (6, 5))
        b = rng.integers(1, 4, (6, 5))
        lut = np.array([0, 3, 1, 2])
        m = misclassification(a, b)
        assert 0 < m <= 1
        assert misclassification(b, a) == m
        assert misclassification(lut[a], b) == m
        assert misclassification(a, lut[b]) == m

    def test_one_off(self):
        a = np.ones((2, 5), dtype=int)
        b = a.copy()
        b[0, 0] = 2
        assert misclassification(a, b) == pytest.approx(0.1)

    def test_shape_mismatch(self):
        with pytest.raises(DiagnosticsError):
            misclassification(np.ones((2, 2)), np.ones((2, 3)))

    def test_refuses_large_k(self):
        with pytest.raises(DiagnosticsError):
            misclassification(np.arange(1, 8)[None], np.arange(1, 8)[None])


class TestMae:
    def test_zero(self):
        np.testing.assert_array_equal(mae([[1.0, 2.0]], [1.0, 2.0]), [0.0, 0.0])

    def test_single_replicate(self):
        assert mae([2.061], [2.0])[0] == pytest.approx(0.061)

    def test_average_over_replicates(self):
        np.testing.assert_allclose(mae([[1.0, 0.0], [3.0, 0.5]], [2.0, 0.0]), [1.0, 0.25])


class TestRelabelling:
    def test_permute_theta_preserves_distribution(self, rng):
        g = build_grid(2)
        th = random_theta(3, rng)
        perm = np.array([2, 3, 1])
        dist = exact_field_distribution(th, g, 1)
        new = exact_field_distribution(permute_theta(th, perm), g, 1)
        inv = np.empty(4, dtype=int)
        inv[perm] = np.arange(1, 4)
        for f, p in zip(dist.fields, dist.probs):
            assert new.prob(inv[f]) == pytest.approx(p, rel=1e-10)

    def test_permute_keeps_last_prevalence_zero(self, rng):
        th = permute_theta(random_theta(3, rng), [3, 1, 2])
        assert th.beta[-1] == 0.0 and th.beta_star[-1] == 0.0

    def test_pivot_undoes_switches(self, rng):
        base = np.array([[-5.0, -5.0], [0.0, 5.0], [5.0, -5.0]])
        n = 300
        mu = base + 0.3 * rng.standard_normal((n, 3, 2))
        perms = np.array([rng.permutation(3) for _ in range(n)])
        switched = np.take_along_axis(mu, perms[:, :, None], axis=1)
        p = pivot_permutations(switched)
        fixed = np.take_along_axis(switched, (p - 1)[:, :, None], axis=1)
        np.testing.assert_array_equal(fixed, mu)

    def test_shared_first_coordinate(self, rng):
        # Two states share mu_1 = 0; sorting on one coordinate would mix them.
        base = np.array([[0.0, -5.0], [0.0, 5.0]])
        mu = base + 0.5 * rng.standard_normal((400, 2, 2))
        p = pivot_permutations(mu)
        fixed = np.take_along_axis(mu, (p - 1)[:, :, None], axis=1)
        assert np.all(fixed[:, 0, 1] < 0) and np.all(fixed[:, 1, 1] > 0)

    def test_relabel_output_consistently(self, rng):
        n, K = 120, 2
        mu = np.array([[-3.0], [3.0]]) + 0.1 * rng.standard_normal((n, K, 1))
        field = rng.integers(1, 3, (4, 2))
        theta = np.tile(np.array([2.0, 1.0, -1.0, 0.5, 0.2, 0.3, -1.0, -0.5]), (n, 1))
        flip = np.arange(n) % 2 == 1
        mu[flip] = mu[flip, ::-1]
        fields = np.array([3 - field if s else field for s in flip])
        th_flip = permute_theta(LatentParams.from_flat(2, np.array(
            [2.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.5, 0.0, 0.0, 0.2, 0.3, 0.0, 0.0, -1.0, -0.5, 0.0])), [2, 1])
        theta[flip] = th_flip.free_vector()
        out = relabel_by_mu(make_output(mu, fields=fields, theta=theta))
        assert np.all(out.mu[:, 0, 0] < 0)
        np.testing.assert_array_equal(out.fields, np.broadcast_to(field, (n, 4, 2)))
        np.testing.assert_allclose(out.theta, np.broadcast_to(theta[0], (n, 8)))


def iid_dataset(n=200, d=2, seed=2):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, 1, d)) @ np.array([[1.0, 0.0], [0.4, 0.8]])[:d, :d].T + 1.0
    return Dataset(y, NeighborhoodSystem(n, []))


class TestDic:
    def test_single_state_matches_iid_oracle(self):
        ds = iid_dataset()
        out = fit(ds, 1, SamplerConfig(iterations=3_000, burn_in=500), seed=0)
        res = dic(out, ds)
        y = ds.y.reshape(-1, 2)
        n = len(y)
        S = np.cov(y.T, bias=True)
        d_mle = n * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(S)) + 2)
        k = 2 + 3  # mean + covariance entries
        assert res.p_d == pytest.approx(k, abs=1.5)
        assert res.dhat == pytest.approx(d_mle, abs=1.5)
        assert res.dic == pytest.approx(d_mle + 2 * k, abs=3.0)
        assert res.dic == pytest.approx(res.dbar + res.p_d)

    def test_deterministic(self):
        ds = iid_dataset(60)
        cfg = SamplerConfig(iterations=300, burn_in=100)
        assert dic(fit(ds, 2, cfg, seed=5), ds) == dic(fit(ds, 2, cfg, seed=5), ds)

    def test_better_fit_lower_dic_at_matched_pd(self, rng):
        ds = iid_dataset(100)
        u = np.ones((100, 1), dtype=int)
        ybar = ds.y.reshape(-1, 2).mean(axis=0)
        eps = 0.05 * rng.standard_normal((200, 1, 2))
        good = make_output(ybar + eps, fields=[u] * 200)
        bad = make_output(ybar + 0.5 + eps, fields=[u] * 200)
        rg, rb = dic(good, ds), dic(bad, ds)
        assert rg.p_d == pytest.approx(rb.p_d, rel=1e-9)
        assert rg.dic < rb.dic

    def test_deviance_formula(self, rng):
        y = rng.standard_normal((3, 2, 1))
        u = np.array([[1, 2], [2, 2], [1, 1]])
        em = EmissionParams([[0.0], [1.0]], [1.0, 4.0])
        expect = sum((y[i, t, 0] - em.mu[u[i, t] - 1, 0]) ** 2 / em.sigma[u[i, t] - 1, 0, 0]
                     + np.log(2 * np.pi * em.sigma[u[i, t] - 1, 0, 0]) for i in range(3) for t in range(2))
        assert deviance(y, u, em) == pytest.approx(expect)

    def test_needs_fields(self):
        with pytest.raises(DiagnosticsError):
            dic(make_output(np.zeros((3, 1, 2))), iid_dataset(3))


class TestReport:
    def test_fields_and_serialisation(self):
        from sthmm.synthdata import sample_dataset, scenario_preset

        ds = sample_dataset(scenario_preset("A", seed=3), 0)
        out = relabel_by_mu(fit(ds, 2, SamplerConfig(iterations=400, burn_in=200), seed=1))
        rep = diagnose(out, ds)
        assert rep.n_draws == 200
        assert [p.name for p in rep.parameters] == out.column_names()
        assert all(p.mcse >= 0 for p in rep.parameters)
        assert 0.0 <= rep.misclassification <= 1.0
        assert rep.dic == pytest.approx(rep.dbar + rep.p_d)
        beta = next(p for p in rep.parameters if p.name == "beta_1")
        assert beta.truth == 2.0 and beta.abs_error == pytest.approx(abs(beta.mean - 2.0))
        buf = io.StringIO()
        rep.to_json(buf)
        d = json.loads(buf.getvalue())
        for key in ("algorithm", "n_draws", "parameters", "acceptance", "dic", "p_d",
                    "misclassification", "map_field", "mae_theta"):
            assert key in d
        buf = io.StringIO()
        rep.to_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "parameter,mean,mcse,geweke_z,geweke_pass,truth,abs_error"
        assert len(lines) == 1 + len(out.column_names())

    def test_short_chain_has_no_mcse(self):
        ds = iid_dataset(20)
        rep = diagnose(fit(ds, 1, SamplerConfig(iterations=60, burn_in=10), seed=0), ds)
        assert all(p.mcse is None and p.geweke_pass is None for p in rep.parameters)
        assert rep.misclassification is None
