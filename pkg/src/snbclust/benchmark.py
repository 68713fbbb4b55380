"""Replicated simulation studies comparing snbClust with the Gaussian baselines.

Simulation 1 has no non-informative genes, so every method runs without
sparsity: snbClust and sgClust at lambda = 0 and plain K-means on log-CPM.
Simulations 2 and 3 tune snbClust and sgClust by BIC along a 16-point path
and sKmeans by the gap statistic; gene scores for AUC are
``max_k |beta_jk - beta*_j|``, ``max_k |mu_jk|`` and the sKmeans weights.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._kmeans import kmeans
from .baselines import fit_sgclust, fit_skmeans, gap_statistic_s
from .counts import normalize
from .errors import SnbClustError, ValidationError
from .metrics import adjusted_rand_index, roc_auc
from .mixture import FitConfig, fit, map_labels, selected_genes
from .nb import fit_null_means
from .selection import sgclust_path, snbclust_path
from .simulate import SimulationConfig, generate

log = logging.getLogger(__name__)

METHODS = ("snbclust", "sgclust", "skmeans")
FAILURE_LIMIT = 0.20


@dataclass(frozen=True)
class BenchmarkConfig:
    scheme: str = "sim1"
    gammas: tuple = (None,)
    alphas: tuple = (0.0,)
    lib_bounds: tuple = (None,)
    replicates: int = 5
    methods: tuple = METHODS
    seed: int = 0
    n_restarts: int = 10
    n_lambda: int = 16
    gap_n_perm: int = 10
    skmeans_n_init: int = 10
    phi: float = 2.0
    threads: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValidationError("replicates must be >= 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValidationError(f"unknown methods: {sorted(bad)}")
        if not self.methods:
            raise ValidationError("no methods requested")

    def cells(self):
        """Every (gamma, alpha, lib_bounds) combination, in a fixed order."""
        out = []
        for lb in self.lib_bounds:
            for g in self.gammas:
                for a in self.alphas:
                    out.append((g, a, lb))
        return out


@dataclass
class MethodResult:
    ari: float
    auc: float
    n_selected: int
    tuning: float


def replicate_seed(base: int, r: int) -> int:
    return int(np.random.SeedSequence([int(base), int(r)]).generate_state(1, dtype=np.uint32)[0])


def _auc(scores, truth):
    if truth.all() or not truth.any():
        return float("nan")
    return roc_auc(scores, truth)


def run_snbclust(ds, cfg: BenchmarkConfig, sparse: bool, seed: int) -> MethodResult:
    prof = normalize(ds.counts)
    gm = fit_null_means(ds.counts, prof)
    fcfg = FitConfig(K=ds.config.K, n_restarts=cfg.n_restarts, seed=seed)
    if sparse:
        path = snbclust_path(ds.counts, prof, gm, fcfg, size=cfg.n_lambda)
        f = path.chosen
    else:
        f = fit(ds.counts, prof, gm, fcfg)
    scores = np.max(np.abs(f.beta - f.beta_star[:, None]), axis=1)
    return MethodResult(
        adjusted_rand_index(map_labels(f), ds.labels),
        _auc(scores, ds.informative_mask),
        int(selected_genes(f).sum()),
        float(f.lam),
    )


def run_sgclust(ds, cfg: BenchmarkConfig, sparse: bool, seed: int) -> MethodResult:
    x = normalize(ds.counts).log_cpm
    fcfg = FitConfig(K=ds.config.K, n_restarts=cfg.n_restarts, seed=seed)
    if sparse:
        f = sgclust_path(x, ds.config.K, fcfg, size=cfg.n_lambda).chosen
    else:
        f = fit_sgclust(x, ds.config.K, 0.0, fcfg)
    scores = np.max(np.abs(f.mu), axis=1)
    return MethodResult(
        adjusted_rand_index(map_labels(f.responsibilities), ds.labels),
        _auc(scores, ds.informative_mask),
        int(np.any(f.mu != 0, axis=1).sum()),
        float(f.lam),
    )


def run_skmeans(ds, cfg: BenchmarkConfig, sparse: bool, seed: int) -> MethodResult:
    x = normalize(ds.counts).log_cpm
    K = ds.config.K
    rng = np.random.default_rng(seed)
    if not sparse:
        labels, _ = kmeans(x.T, K, rng, n_init=cfg.skmeans_n_init)
        return MethodResult(adjusted_rand_index(labels, ds.labels), float("nan"), x.shape[0], float("nan"))
    gap = gap_statistic_s(x, K, n_perm=cfg.gap_n_perm, seed=seed, n_init=cfg.skmeans_n_init)
    f = fit_skmeans(x, K, gap.chosen_s, rng=rng, n_init=cfg.skmeans_n_init)
    return MethodResult(
        adjusted_rand_index(f.labels, ds.labels),
        _auc(f.weights, ds.informative_mask),
        int(np.sum(f.weights > 0)),
        float(gap.chosen_s),
    )


RUNNERS = {"snbclust": run_snbclust, "sgclust": run_sgclust, "skmeans": run_skmeans}


def _sim_config(cfg: BenchmarkConfig, cell, seed) -> SimulationConfig:
    gamma, alpha, lb = cell
    kw = dict(scheme=cfg.scheme, gamma=gamma, lib_bounds=lb, phi=cfg.phi, seed=seed)
    if cfg.scheme == "sim3":
        kw["alpha"] = alpha
    return SimulationConfig(**kw)


def _run_task(args):
    cfg, cell_index, cell, r = args
    seed = replicate_seed(cfg.seed, r)
    sim = _sim_config(cfg, cell, seed)
    ds = generate(sim)
    sparse = cfg.scheme != "sim1"
    rows = []
    for method in cfg.methods:
        row = dict(
            method=method, scheme=cfg.scheme, gamma=sim.gamma,
            alpha=sim.alpha if cfg.scheme == "sim3" else float("nan"),
            lib_lb=sim.lib_bounds[0], lib_ub=sim.lib_bounds[1],
            replicate=r, seed=seed,
        )
        try:
            res = RUNNERS[method](ds, cfg, sparse, seed)
            row.update(status="ok", ari=res.ari, auc=res.auc, n_selected=res.n_selected,
                       tuning=res.tuning, error="")
        except (SnbClustError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("%s replicate %d failed: %s", method, r, exc)
            row.update(status="failed", ari=float("nan"), auc=float("nan"), n_selected=-1,
                       tuning=float("nan"), error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return cell_index, r, rows


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    rows: list
    summary: list = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r["status"] != "ok" for r in self.rows) / len(self.rows)

    @property
    def too_many_failures(self) -> bool:
        return self.failure_rate > FAILURE_LIMIT


def run_benchmark(cfg: BenchmarkConfig) -> BenchmarkResult:
    """All replicates of every cell and method; results ordered by (cell, replicate, method)."""
    tasks = [(cfg, c, cell, r) for c, cell in enumerate(cfg.cells()) for r in range(cfg.replicates)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            outs = list(pool.map(_run_task, tasks))
    else:
        outs = [_run_task(t) for t in tasks]
    outs.sort(key=lambda o: (o[0], o[1]))
    rows = [row for _, _, rs in outs for row in rs]
    return BenchmarkResult(cfg, rows, summarize(rows, cfg.methods))


def _mean_se(values):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def _key(row):
    return (row["gamma"], row["alpha"], row["lib_lb"], row["lib_ub"])


def summarize(rows, methods=METHODS) -> list:
    """Mean and standard error of ARI and AUC per (cell, method) over successful replicates."""
    cells = []
    for row in rows:
        k = _key(row)
        if not any(_same(k, c) for c in cells):
            cells.append(k)
    out = []
    for c in cells:
        for method in methods:
            sel = [r for r in rows if r["method"] == method and _same(_key(r), c)]
            ok = [r for r in sel if r["status"] == "ok"]
            ari_m, ari_se = _mean_se([r["ari"] for r in ok])
            auc_m, auc_se = _mean_se([r["auc"] for r in ok])
            out.append(dict(
                method=method, gamma=c[0], alpha=c[1], lib_lb=c[2], lib_ub=c[3],
                n_ok=len(ok), n_failed=len(sel) - len(ok),
                ARI_mean=ari_m, ARI_se=ari_se, AUC_mean=auc_m, AUC_se=auc_se,
            ))
    return out


def _same(a, b):
    return all((x == y) or (np.isnan(x) and np.isnan(y)) for x, y in zip(a, b))


REPLICATE_COLUMNS = ["method", "scheme", "gamma", "alpha", "lib_lb", "lib_ub", "replicate", "seed",
                     "status", "ari", "auc", "n_selected", "tuning", "error"]
SUMMARY_COLUMNS = ["method", "gamma", "alpha", "lib_lb", "lib_ub", "n_ok", "n_failed",
                   "ARI_mean", "ARI_se", "AUC_mean", "AUC_se"]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _write(rows, columns, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def write_replicates(result: BenchmarkResult, path):
    _write(result.rows, REPLICATE_COLUMNS, path)


def write_summary(result: BenchmarkResult, path):
    _write(result.summary, SUMMARY_COLUMNS, path)


def write_failures(result: BenchmarkResult, path):
    _write([r for r in result.rows if r["status"] != "ok"],
           ["method", "gamma", "alpha", "lib_lb", "lib_ub", "replicate", "seed", "error"], path)


def with_replicates(cfg: BenchmarkConfig, replicates: int) -> BenchmarkConfig:
    return replace(cfg, replicates=int(replicates))
