import numpy as np
import pytest

from snbclust.counts import normalize
from snbclust.errors import SnbClustError, ValidationError
from snbclust.metrics import adjusted_rand_index
from snbclust.mixture import FitConfig, MixtureFit, fit, map_labels
from snbclust.nb import fit_null_means
from snbclust.selection import (
    bic,
    choose_index,
    effective_df,
    lambda_grid,
    run_lambda_path,
    sgclust_path,
    snbclust_path,
    write_path,
)
from snbclust.simulate import SimulationConfig, generate


def _fake_fit(K, G, q, loglik):
    return MixtureFit(K=K, lam=0.0, pi=np.full(K, 1 / K), beta=np.zeros((G, K)), beta_star=np.zeros(G),
                      responsibilities=np.full((4, K), 1 / K), penalized_loglik=loglik, loglik=loglik,
                      loglik_trace=np.array([loglik]), n_shrunk=q, converged=True, restarts_used=1,
                      n_iter=1, seed=0)


class TestBic:
    def test_effective_df_example(self):
        assert effective_df(3, 1000, 2550) == 452

    def test_single_cluster(self):
        for G, q in ((10, 0), (10, 7), (500, 500)):
            assert effective_df(1, G, q) == G - q

    def test_monotone_in_q(self):
        a, b = _fake_fit(3, 50, 120, -1000.0), _fake_fit(3, 50, 80, -1000.0)
        assert bic(a, 45) < bic(b, 45)

    def test_formula(self):
        f = _fake_fit(2, 10, 5, -321.5)
        assert bic(f, 30) == pytest.approx(643.0 + np.log(30) * (1 + 20 - 5))


class TestChooseIndex:
    def test_ties_go_to_larger_lambda(self):
        assert choose_index([5.0, 3.0, 3.0, 4.0]) == 2

    def test_skips_failures(self):
        assert choose_index([np.nan, 2.0, np.nan]) == 1

    def test_all_failed(self):
        with pytest.raises(SnbClustError):
            choose_index([np.nan, np.nan])

    def test_grid(self):
        g = lambda_grid(8.0)
        assert len(g) == 16 and g[-1] == pytest.approx(8.0) and g[0] == pytest.approx(8e-3)
        assert np.all(np.diff(np.log(g)) == pytest.approx(np.log(1000) / 15))


class TestRunPath:
    def test_singleton_zero(self, sim2_small):
        m, _, _ = sim2_small
        prof = normalize(m)
        gm = fit_null_means(m, prof)
        r = run_lambda_path(m, prof, gm, 3, [0.0], FitConfig(K=3, n_restarts=2))
        assert r.chosen_index == 0 and len(r.fits) == 1

    def test_grid_validation(self, sim2_small):
        m, _, _ = sim2_small
        prof = normalize(m)
        gm = fit_null_means(m, prof)
        with pytest.raises(ValidationError):
            run_lambda_path(m, prof, gm, 3, [], FitConfig(K=3))
        with pytest.raises(ValidationError):
            run_lambda_path(m, prof, gm, 3, [2.0, 1.0], FitConfig(K=3))

    def test_huge_lambda_not_chosen(self):
        """A lambda = 1e9 entry is fully shrunk and loses to sparser-but-informative fits."""
        not_chosen = 0
        reps = 10
        for r in range(reps):
            ds = generate(SimulationConfig(scheme="sim2", gamma=1.2, seed=700 + r))
            prof = normalize(ds.counts)
            gm = fit_null_means(ds.counts, prof)
            res = run_lambda_path(ds.counts, prof, gm, 3, [1.0, 2.0, 4.0, 8.0, 1e9],
                                  FitConfig(K=3, n_restarts=3, seed=r))
            assert res.q[-1] == 3 * 1000
            not_chosen += res.chosen_index != 4
        assert not_chosen >= 0.9 * reps

    def test_warm_start_at_least_cold(self, sim2_small):
        m, _, _ = sim2_small
        prof = normalize(m)
        gm = fit_null_means(m, prof)
        grid = [0.5, 1.0, 2.0, 4.0, 8.0]
        better = total = 0
        for seed in range(3):
            cfg = FitConfig(K=3, n_restarts=2, seed=seed)
            warm = run_lambda_path(m, prof, gm, 3, grid, cfg)
            for t, lam in enumerate(grid):
                total += 1
                if not np.isfinite(warm.penalized_loglik[t]):
                    continue
                try:
                    cold = fit(m, prof, gm, FitConfig(K=3, lam=lam, n_restarts=1, seed=100 + seed))
                except SnbClustError:
                    better += 1
                    continue
                better += warm.penalized_loglik[t] >= cold.penalized_loglik - 1e-8 * abs(cold.penalized_loglik)
        assert better >= 0.8 * total

    def test_write_path(self, sim2_small, tmp_path):
        m, _, _ = sim2_small
        prof = normalize(m)
        gm = fit_null_means(m, prof)
        r = run_lambda_path(m, prof, gm, 3, [1.0, 3.0], FitConfig(K=3, n_restarts=1))
        p = tmp_path / "path.csv"
        write_path(r, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "lambda,loglik,penalized_loglik,q,n_selected,bic,chosen"
        assert len(lines) == 3
        assert sum(int(l.split(",")[-1]) for l in lines[1:]) == 1


class TestDefaultPaths:
    def test_snbclust_path(self, sim2):
        prof = normalize(sim2.counts)
        gm = fit_null_means(sim2.counts, prof)
        r = snbclust_path(sim2.counts, prof, gm, FitConfig(K=3, n_restarts=3))
        assert len(r.lambdas) == 16
        assert r.q[-1] == 3 * 1000
        assert r.chosen_index == int(np.flatnonzero(r.bic == np.nanmin(r.bic))[-1])
        assert np.all(np.diff(r.n_selected) <= 0) or np.mean(np.diff(r.n_selected) <= 0) >= 0.9
        assert adjusted_rand_index(map_labels(r.chosen), sim2.labels) > 0.9

    def test_sgclust_path(self, sim2):
        x = normalize(sim2.counts).log_cpm
        r = sgclust_path(x, 3, FitConfig(K=3, n_restarts=3))
        assert len(r.lambdas) == 16 and r.method == "sgclust"
        assert r.q[-1] == 3 * 1000
        assert adjusted_rand_index(np.argmax(r.chosen.responsibilities, axis=1), sim2.labels) > 0.9
