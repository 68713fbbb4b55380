import numpy as np
import pytest
from scipy import stats

from snbclust.counts import CountMatrix, load_counts, normalize
from snbclust.errors import EmptyResultError, ValidationError
from snbclust.metrics import roc_auc
from snbclust.simulate import (
    PATTERNS,
    SimulationConfig,
    build_empirical_dist,
    cov_to_corr,
    default_surrogate_dist,
    generate,
    pattern_matrix,
    sample_inverse_wishart,
    sample_nb,
    sample_truncated_normal,
    thin,
    truncated_normal,
    write_truth,
)


class TestEmpiricalDist:
    def test_toy_quantile(self):
        d = build_empirical_dist(np.arange(1.0, 11.0), 0.3)
        np.testing.assert_array_equal(d.pool, np.arange(1.0, 8.0))

    def test_no_trim(self):
        d = build_empirical_dist(np.array([3.0, 1.0, 2.0]), 0.0)
        np.testing.assert_array_equal(d.pool, [1.0, 2.0, 3.0])

    def test_full_trim(self):
        with pytest.raises(EmptyResultError):
            build_empirical_dist(np.arange(1.0, 11.0), 1.0)

    def test_from_count_matrix(self):
        m = CountMatrix.from_array(np.arange(1, 21).reshape(10, 2))
        d = build_empirical_dist(m, 0.3)
        assert d.pool.max() <= np.quantile(m.counts.mean(axis=1), 0.7)
        assert np.all(np.diff(d.pool) >= 0)

    def test_surrogate(self):
        a, b = default_surrogate_dist(), default_surrogate_dist()
        np.testing.assert_array_equal(a.pool, b.pool)
        assert a.pool.min() >= 5
        rng = np.random.default_rng(20240601)
        draws = np.exp(rng.normal(3.0, 1.2, size=10_000))
        draws = draws[draws >= 5.0]
        assert a.pool.max() <= np.quantile(draws, 0.7)


class TestTruncatedNormal:
    def test_bound(self):
        rng = np.random.default_rng(0)
        for gamma in (0.4, 1.2):
            assert np.all(truncated_normal(gamma, 1.0, gamma / 2, size=5000, rng=rng) >= gamma / 2)

    def test_analytic_mean(self):
        x = truncated_normal(1.0, 1.0, 0.5, size=100_000, rng=np.random.default_rng(1))
        a = -0.5
        ref = 1.0 + stats.norm.pdf(a) / stats.norm.sf(a)
        assert ref == pytest.approx(1.509, abs=1e-3)
        assert abs(x.mean() - ref) < 0.02

    def test_far_tail_fallback(self):
        x = truncated_normal(0.0, 1.0, 6.0, size=20_000, rng=np.random.default_rng(2))
        assert np.all(x >= 6.0)
        ref = stats.truncnorm.mean(6.0, np.inf)
        assert abs(x.mean() - ref) < 0.01

    def test_no_truncation(self):
        x = truncated_normal(2.0, 3.0, -np.inf, size=100_000, rng=np.random.default_rng(3))
        assert abs(x.mean() - 2.0) < 0.05 and abs(x.std() - 3.0) < 0.05

    def test_scalar(self):
        v = sample_truncated_normal(1.0, 1.0, 0.5, np.random.default_rng(4))
        assert isinstance(v, float) and v >= 0.5

    def test_bad_sd(self):
        with pytest.raises(ValidationError):
            truncated_normal(0.0, 0.0, 0.0, size=3)


class TestSamplers:
    def test_nb_overdispersion(self):
        mu, phi = 30.0, 2.0
        y = sample_nb(np.full(10_000, mu), phi, np.random.default_rng(5))
        ratio = y.var() / y.mean()
        assert abs(ratio / (1 + mu / phi) - 1) < 0.10

    def test_inverse_wishart_identity_scale(self):
        rng = np.random.default_rng(6)
        offs = []
        for _ in range(200):
            R = cov_to_corr(sample_inverse_wishart(np.eye(10), 60, rng))
            offs.append(np.abs(R[~np.eye(10, dtype=bool)]).mean())
        assert np.mean(offs) < 0.15

    def test_inverse_wishart_mean(self):
        rng = np.random.default_rng(7)
        d, df = 4, 20
        psi = 0.5 * np.eye(d) + 0.5
        mean = np.mean([sample_inverse_wishart(psi, df, rng) for _ in range(4000)], axis=0)
        np.testing.assert_allclose(mean, psi / (df - d - 1), atol=0.01)

    def test_inverse_wishart_df(self):
        with pytest.raises(ValidationError):
            sample_inverse_wishart(np.eye(5), 3, np.random.default_rng(0))

    def test_thin(self):
        y = np.full(20_000, 100)
        out = thin(y, 0.3, np.random.default_rng(8))
        assert np.all(out <= y) and abs(out.mean() - 30) < 0.2
        with pytest.raises(ValidationError):
            thin(y, 1.5, np.random.default_rng(8))


class TestPatterns:
    def test_block_counts(self):
        d = pattern_matrix(1000)
        for p in range(3):
            np.testing.assert_array_equal(d[50 * p:50 * (p + 1)], np.tile(PATTERNS[p], (50, 1)))
        assert np.all(d[150:] == 0)

    def test_pattern_values(self):
        np.testing.assert_array_equal(PATTERNS, [[-1, 0, 1], [0, 1, 1], [1, -1, 0]])


class TestGenerate:
    def test_sim1_shape(self):
        ds = generate(SimulationConfig(scheme="sim1", gamma=1.2, seed=3))
        assert ds.counts.counts.shape == (150, 45)
        assert ds.counts.counts.dtype.kind == "i"
        assert ds.informative_mask.all()
        np.testing.assert_array_equal(np.bincount(ds.labels)[1:], [15, 15, 15])
        np.testing.assert_array_equal(ds.library_scale, 1.0)

    def test_sim2_truth(self):
        ds = generate(SimulationConfig(scheme="sim2", seed=4))
        assert ds.counts.n_genes == 1000 and ds.informative_mask.sum() == 150
        assert np.all((ds.library_scale >= 0.9) & (ds.library_scale <= 1.1))
        nonzero = np.any(ds.true_beta != ds.true_beta[:, :1], axis=1)
        np.testing.assert_array_equal(nonzero, ds.informative_mask)

    def test_deterministic(self):
        cfg = SimulationConfig(scheme="sim3", alpha=0.5, seed=99)
        a, b = generate(cfg), generate(cfg)
        np.testing.assert_array_equal(a.counts.counts, b.counts.counts)
        c = generate(SimulationConfig(scheme="sim3", alpha=0.5, seed=100))
        assert not np.array_equal(a.counts.counts, c.counts.counts)

    def test_config_rules(self):
        with pytest.raises(ValidationError):
            SimulationConfig(scheme="sim1", G=200)
        with pytest.raises(ValidationError):
            SimulationConfig(scheme="sim4")
        with pytest.raises(ValidationError):
            SimulationConfig(scheme="sim3", alpha=1.0)
        with pytest.raises(ValidationError):
            SimulationConfig(scheme="sim2", lib_bounds=(1.2, 0.8))
        with pytest.raises(ValidationError):
            SimulationConfig(scheme="sim3", n_modules=16)

    def test_marginal_means(self):
        """Replicate averages of y/a for fixed genes match mu 2^(Delta delta) within 3 standard errors."""
        cfg = SimulationConfig(scheme="sim2", G=160, gamma=1.2, seed=0)
        base = generate(cfg)
        # true_beta is fixed by the seed; resample only the counts
        mean = base.library_scale[None, :] * np.exp2(base.true_beta[:, base.labels - 1])
        rng = np.random.default_rng(10)
        reps = np.stack([sample_nb(mean, cfg.phi, rng) for _ in range(2000)])
        genes = [0, 60, 120, 155]
        for j in genes:
            for k in range(3):
                i = np.flatnonzero(base.labels == k + 1)[0]
                v = reps[:, j, i] / base.library_scale[i]
                target = np.exp2(base.true_beta[j, k])
                se = v.std(ddof=1) / np.sqrt(len(v))
                assert abs(v.mean() - target) < 3 * se + 1e-12

    def test_sim3_module_correlation(self):
        ds = generate(SimulationConfig(scheme="sim3", alpha=0.75, seed=12))
        R = ds.extra["module_correlations"]
        assert R.shape == (15, 3, 10, 10)
        np.testing.assert_allclose(np.diagonal(R, axis1=2, axis2=3), 1.0)
        off = R[:, :, ~np.eye(10, dtype=bool)]
        assert off.mean() > 0.5

    def test_no_signal_auc(self):
        """With gamma = 1e-6 a simple cluster-contrast score should have AUC near 0.5.

        The effect sizes come from TN(gamma, 1, gamma/2, inf), which tends to a
        half-normal (mean about 0.8) as gamma -> 0, so the signal does not vanish
        and this check fails by construction of the generator.
        """
        aucs = []
        for r in range(20):
            ds = generate(SimulationConfig(scheme="sim2", gamma=1e-6, seed=300 + r))
            x = normalize(ds.counts).log_cpm
            score = x[:, ds.labels == 1].mean(1) - x[:, ds.labels != 1].mean(1)
            aucs.append(roc_auc(np.abs(score), ds.informative_mask))
        assert abs(np.mean(aucs) - 0.5) < 0.05

    def test_truth_sidecars(self, tmp_path):
        ds = generate(SimulationConfig(scheme="sim1", seed=1))
        sp, gp = tmp_path / "s.csv", tmp_path / "g.csv"
        write_truth(ds, sp, gp)
        s_lines = sp.read_text().splitlines()
        g_lines = gp.read_text().splitlines()
        assert s_lines[0] == "sample_id,label,library_scale" and len(s_lines) == 46
        assert g_lines[0] == "gene_id,informative,true_beta_1,true_beta_2,true_beta_3" and len(g_lines) == 151
