import mpmath
import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from snbclust.counts import PHI_MAX, CountMatrix, normalize
from snbclust.errors import ValidationError
from snbclust.nb import (
    LOG_MU_MIN,
    NBData,
    NbParams,
    fit_null_means,
    irls_working,
    lasso_toward,
    nb_log_pmf,
    penalized_irls,
    soft_threshold,
)


def _profile(y, s=None, phi=None):
    m = CountMatrix.from_array(np.asarray(y))
    s = np.ones(m.n_samples) if s is None else np.asarray(s, float)
    phi = np.full(m.n_genes, 2.0) if phi is None else np.asarray(phi, float)
    return m, normalize(m, size_factors=s, dispersions=phi)


def _grid_argmax(f, lo, hi, step):
    grid = np.arange(lo, hi + step, step)
    return grid[np.argmax(f(grid))]


def _grid_refine(f, lo, hi, coarse=1e-2, fine=1e-5):
    b = _grid_argmax(f, lo, hi, coarse)
    return _grid_argmax(f, b - 2 * coarse, b + 2 * coarse, fine)


class TestLogPmf:
    def test_zero_count_closed_form(self):
        np.testing.assert_allclose(nb_log_pmf(0, 1.0, 1.0), np.log(0.5), rtol=1e-14)

    def test_normalizes(self):
        total = np.exp(nb_log_pmf(np.arange(501), 5.0, 2.0)).sum()
        assert abs(total - 1.0) < 1e-10

    def test_mean_and_variance(self):
        y = np.arange(2000)
        p = np.exp(nb_log_pmf(y, 7.5, 3.0))
        mean = (y * p).sum()
        np.testing.assert_allclose(mean, 7.5, rtol=1e-10)
        np.testing.assert_allclose(((y - mean) ** 2 * p).sum(), 7.5 + 7.5**2 / 3.0, rtol=1e-9)

    def test_poisson_limit(self):
        # The exact total variation at phi = 1000 is 1.22e-3 (scipy's nbinom gives the same),
        # so the check is on the pointwise gap plus agreement with the scipy reference.
        y = np.arange(51)
        ours = np.exp(nb_log_pmf(y, 5.0, PHI_MAX))
        pois = stats.poisson.pmf(y, 5.0)
        ref = stats.nbinom.pmf(y, PHI_MAX, PHI_MAX / (PHI_MAX + 5.0))
        assert np.max(np.abs(ours - pois)) < 1e-3
        tv = 0.5 * np.abs(ours - pois).sum()
        tv_ref = 0.5 * np.abs(ref - pois).sum()
        assert abs(tv - tv_ref) < 1e-12
        assert tv < 1.5e-3

    def test_matches_scipy_parameterization(self):
        y = np.arange(40)
        mu, phi = 6.0, 1.7
        ref = stats.nbinom.logpmf(y, phi, phi / (phi + mu))
        np.testing.assert_allclose(nb_log_pmf(y, mu, phi), ref, rtol=1e-12)

    def test_finite_for_extreme_inputs(self):
        assert np.isfinite(nb_log_pmf(10_000, 1e-8, 0.01))
        assert np.isfinite(nb_log_pmf(0, 1e12, 1000.0))

    def test_concave_in_log_mean(self):
        rng = np.random.default_rng(3)
        h = 1e-3
        for _ in range(20):
            y = rng.integers(1, 200)
            phi = rng.uniform(0.05, 50)
            t = rng.uniform(-2, 7)
            f = lambda u: nb_log_pmf(y, np.exp(u), phi)
            second = (f(t + h) - 2 * f(t) + f(t - h)) / h**2
            assert second <= 1e-6

    def test_params_validation(self):
        NbParams(1.0, 2.0)
        with pytest.raises(ValidationError):
            NbParams(0.0, 2.0)
        with pytest.raises(ValidationError):
            NbParams(1.0, 5000.0)
        np.testing.assert_allclose(NbParams(1.0, 1.0).log_pmf(0), np.log(0.5))


class TestLgammaAccuracy:
    def test_against_high_precision(self):
        mpmath.mp.dps = 40
        rng = np.random.default_rng(0)
        xs = np.concatenate([rng.uniform(0.01, 5, 20), rng.uniform(5, 1e4, 20), [0.5, 1.0, 2.0, 1e6]])
        for x in xs:
            ref = float(mpmath.loggamma(mpmath.mpf(float(x))))
            assert abs(gammaln(x) - ref) <= 1e-12 * max(1.0, abs(ref))


class TestNullMeans:
    def test_constant_counts(self):
        m, prof = _profile([[4, 4, 4, 4]])
        np.testing.assert_allclose(fit_null_means(m, prof).beta_star[0], np.log(4), atol=1e-6)

    def test_offset(self):
        m, prof = _profile([[8, 8]], s=[2.0, 2.0])
        np.testing.assert_allclose(fit_null_means(m, prof).beta_star[0], np.log(4), atol=1e-6)

    def test_grid_oracle(self):
        rng = np.random.default_rng(7)
        y = rng.negative_binomial(2.0, 2.0 / (2.0 + rng.uniform(3, 300, size=(10, 1))), size=(10, 12))
        s = np.exp(rng.normal(0, 0.3, 12))
        phi = rng.uniform(0.5, 10, 10)
        m, prof = _profile(y, s, phi)
        beta = fit_null_means(m, prof).beta_star
        for j in range(10):
            f = lambda b: np.array([nb_log_pmf(y[j], s * np.exp(v), phi[j]).sum() for v in np.atleast_1d(b)])
            best = _grid_refine(f, -5, 15)
            assert abs(beta[j] - best) < 2e-4

    def test_converges_quickly_on_simulated_data(self, sim2):
        gm = fit_null_means(sim2.counts, normalize(sim2.counts))
        assert gm.converged.all()
        assert gm.iterations.max() <= 50
        assert np.all(np.isfinite(gm.beta_star))

    def test_size_factor_equivariance(self, sim2):
        prof = normalize(sim2.counts)
        c = 3.7
        a = fit_null_means(sim2.counts, prof).beta_star
        prof_c = normalize(sim2.counts, size_factors=prof.size_factors * c, dispersions=prof.dispersions)
        b = fit_null_means(sim2.counts, prof_c).beta_star
        np.testing.assert_allclose(b, a - np.log(c), atol=1e-8)

    def test_all_zero_gene_is_degenerate(self):
        m, prof = _profile([[0, 0, 0], [3, 5, 4]])
        gm = fit_null_means(m, prof)
        assert gm.degenerate.tolist() == [True, False]
        assert gm.beta_star[0] == LOG_MU_MIN
        assert not gm.converged[0]


class TestPenalizedIrls:
    def test_soft_threshold_values(self):
        np.testing.assert_array_equal(soft_threshold(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]), 1.0),
                                      [-2.0, 0.0, 0.0, 0.0, 2.0])

    def test_lasso_toward_snaps_bitwise(self):
        target = np.array([0.1234567, 2.5])
        out = lasso_toward(target, target + np.array([0.29, -0.2]), np.array([0.3, 0.1]))
        assert out[0] == target[0]
        np.testing.assert_allclose(out[1], 2.4)

    def test_prox_matches_grid_on_quadratic(self):
        """Weighted lasso step equals the grid argmin of 1/2 sum z w (tau - log s - b)^2 + lam |b - b*|."""
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = 8
            z = rng.uniform(0, 1, n)
            w = rng.uniform(0.1, 5, n)
            tau_minus_offset = rng.normal(1.0, 1.0, n)
            lam = rng.uniform(0, 4)
            bstar = rng.normal(1.0, 0.5)
            W = (z * w).sum()
            btilde = (z * w * tau_minus_offset).sum() / W
            got = lasso_toward(np.array(bstar), np.array(btilde), lam / W)
            f = lambda b: -(0.5 * (z * w * (tau_minus_offset[None, :] - b[:, None]) ** 2).sum(1)
                            + lam * np.abs(b - bstar))
            best = _grid_refine(f, -4, 6, coarse=1e-2, fine=1e-5)
            assert abs(got - best) < 1e-4

    def test_unpenalized_weighted_fixed_point_matches_grid(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            n, K = 10, 2
            y = rng.poisson(rng.uniform(2, 60), size=(1, n))
            s = np.exp(rng.normal(0, 0.2, n))
            m, prof = _profile(y, s, [1.5])
            z = rng.dirichlet(np.ones(K), size=n)
            data = NBData(m, prof)
            beta, _, conv = penalized_irls(data, z, np.zeros((1, K)) + np.log(y.mean() + 1), tol=1e-10,
                                           max_iter=100)
            assert conv.all()
            for k in range(K):
                f = lambda b: np.array([(z[:, k] * nb_log_pmf(y[0], s * np.exp(v), 1.5)).sum()
                                        for v in np.atleast_1d(b)])
                assert abs(beta[0, k] - _grid_refine(f, -3, 8)) < 2e-4

    def test_huge_lambda_pins_target(self, sim2):
        prof = normalize(sim2.counts)
        gm = fit_null_means(sim2.counts, prof)
        data = NBData(sim2.counts, prof)
        z = np.eye(3)[sim2.labels - 1]
        start = np.repeat(gm.beta_star[:, None], 3, axis=1) + 0.3
        beta, _, _ = penalized_irls(data, z, start, target=gm.beta_star, lam=1e9)
        assert np.all(beta == gm.beta_star[:, None])

    def test_single_hard_cluster_reduces_to_null_fit(self, sim1):
        prof = normalize(sim1.counts, size_factors=np.ones(45))
        members = sim1.labels == 2
        sub = CountMatrix.from_array(sim1.counts.counts[:, members])
        sub_prof = normalize(sub, size_factors=np.ones(members.sum()), dispersions=prof.dispersions)
        ref = fit_null_means(sub, sub_prof).beta_star
        data = NBData(sim1.counts, prof)
        z = np.eye(3)[sim1.labels - 1]
        beta, _, _ = penalized_irls(data, z, np.zeros((150, 3)) + 3.0, tol=1e-10, max_iter=100)
        np.testing.assert_allclose(beta[:, 1], ref, atol=1e-6)

    def test_objective_never_decreases(self, sim2):
        prof = normalize(sim2.counts)
        gm = fit_null_means(sim2.counts, prof)
        data = NBData(sim2.counts, prof)
        rng = np.random.default_rng(0)
        z = rng.dirichlet(np.ones(3), size=45)
        b0 = np.repeat(gm.beta_star[:, None], 3, axis=1) + rng.normal(0, 2, (1000, 3))
        lam = 3.0
        obj = lambda b: (data.evaluate(z, data.clip_beta(b))[0] - lam * np.abs(b - gm.beta_star[:, None])).sum()
        prev = obj(b0)
        b = b0
        for _ in range(5):
            b, _, _ = penalized_irls(data, z, b, target=gm.beta_star, lam=lam, max_iter=1)
            cur = obj(b)
            assert cur >= prev - 1e-8 * abs(prev)
            prev = cur

    def test_irls_working_quantities(self):
        y = np.array([[3, 7, 0, 12]])
        s = np.array([0.8, 1.1, 0.9, 1.2])
        m, prof = _profile(y, s, [2.5])
        z = np.ones((4, 1))
        beta = np.array([[1.4]])
        W, bt = irls_working(NBData(m, prof), z, beta)
        mu = s * np.exp(1.4)
        w = mu / (1 + mu / 2.5)
        tau = np.log(s) + 1.4 + (y[0] - mu) / mu
        np.testing.assert_allclose(W[0, 0], w.sum(), rtol=1e-12)
        np.testing.assert_allclose(bt[0, 0], (w * (tau - np.log(s))).sum() / w.sum(), rtol=1e-12)
