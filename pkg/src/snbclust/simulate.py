"""Count-data generators for the three simulation schemes.

* ``sim1``: 150 informative genes, equal library sizes.
* ``sim2``: 1000 genes of which 150 informative, uniform library scaling.
* ``sim3``: as ``sim2`` with informative genes arranged in correlated modules
  whose log2 expression is drawn from inverse-Wishart covariances.

Informative genes come in three equal blocks with cluster patterns
(-1, 0, 1), (0, 1, 1) and (1, -1, 0); effects are on the log2 scale.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .counts import CountMatrix
from .errors import EmptyResultError, ValidationError

PATTERNS = np.array([[-1, 0, 1], [0, 1, 1], [1, -1, 0]])


@dataclass(frozen=True)
class EmpiricalMeanDist:
    pool: np.ndarray
    trimmed_fraction: float = 0.30

    def __post_init__(self):
        pool = np.sort(np.asarray(self.pool, dtype=float))
        if pool.size == 0:
            raise EmptyResultError("empirical mean pool is empty")
        if np.any(pool <= 0):
            raise ValidationError("baseline means must be positive")
        pool.setflags(write=False)
        object.__setattr__(self, "pool", pool)

    def sample(self, size, rng):
        return rng.choice(self.pool, size=size, replace=True)


def build_empirical_dist(source, trim: float = 0.30) -> EmpiricalMeanDist:
    """Pool of per-gene mean counts with the top ``trim`` fraction removed.

    ``source`` is a ``CountMatrix`` or a vector of gene means.
    """
    if not 0.0 <= trim < 1.0:
        raise EmptyResultError(f"trim={trim} leaves no genes")
    if isinstance(source, CountMatrix):
        means = source.counts.mean(axis=1)
    else:
        means = np.asarray(source, dtype=float)
    cut = np.quantile(means, 1.0 - trim)
    pool = np.sort(means[(means <= cut) & (means > 0)])
    return EmpiricalMeanDist(pool, trim)


def default_surrogate_dist(seed: int = 20240601, n_draws: int = 10_000) -> EmpiricalMeanDist:
    """Log-normal stand-in for an empirical mean-count distribution.

    Draws ``exp(N(3.0, 1.2))``, keeps values >= 5 and trims the top 30%.
    """
    rng = np.random.default_rng(seed)
    draws = np.exp(rng.normal(3.0, 1.2, size=n_draws))
    draws = draws[draws >= 5.0]
    return build_empirical_dist(draws, 0.30)


def truncated_normal(mean, sd, lower, size=None, rng=None):
    """Draws from N(mean, sd) conditioned on being >= lower.

    Rejection sampling while the acceptance rate is reasonable; inverse-CDF
    on the upper tail otherwise.
    """
    if sd <= 0:
        raise ValidationError("sd must be positive")
    rng = np.random.default_rng() if rng is None else rng
    shape = () if size is None else size
    n = int(np.prod(shape))
    if not np.isfinite(lower):
        out = rng.normal(mean, sd, size=n)
    else:
        a = (lower - mean) / sd
        if stats.norm.sf(a) > 0.05:
            out = np.empty(n)
            filled = 0
            while filled < n:
                batch = rng.normal(mean, sd, size=max(2 * (n - filled), 16))
                batch = batch[batch >= lower][: n - filled]
                out[filled : filled + len(batch)] = batch
                filled += len(batch)
        else:
            u = rng.uniform(size=n)
            out = mean + sd * stats.norm.isf(u * stats.norm.sf(a))
            out = np.maximum(out, lower)
    return out[0] if size is None else out.reshape(shape)


def sample_truncated_normal(mean, sd, lower, rng):
    return float(truncated_normal(mean, sd, lower, None, rng))


def sample_nb(mu, phi, rng):
    """Gamma-Poisson draw with mean ``mu`` and variance ``mu + mu**2 / phi``."""
    mu = np.asarray(mu, dtype=float)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), mu.shape)
    rate = rng.gamma(shape=phi, scale=mu / phi)
    return rng.poisson(rate)


def sample_inverse_wishart(scale, df, rng):
    """Inverse-Wishart(scale, df) via the Bartlett factor of Wishart(scale^-1, df)."""
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if df <= d - 1:
        raise ValidationError("degrees of freedom must exceed dimension - 1")
    L = np.linalg.cholesky(np.linalg.inv(scale))
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    A[np.tril_indices(d, -1)] = rng.normal(size=d * (d - 1) // 2)
    LA = L @ A
    return np.linalg.inv(LA @ LA.T)


def cov_to_corr(S):
    sd = np.sqrt(np.diag(S))
    R = S / np.outer(sd, sd)
    R[np.diag_indices_from(R)] = 1.0
    return R


def thin(counts, rate, rng):
    """Binomial thinning of read counts (downsampling)."""
    if not 0.0 <= rate <= 1.0:
        raise ValidationError("thinning rate must lie in [0, 1]")
    return rng.binomial(np.asarray(counts, dtype=np.int64), rate)


@dataclass(frozen=True)
class SimulationConfig:
    scheme: str = "sim1"
    G: int | None = None
    n_per_cluster: int = 15
    K: int = 3
    gamma: float | None = None
    lib_bounds: tuple[float, float] | None = None
    alpha: float = 0.0
    n_modules: int = 15
    module_size: int = 10
    n_informative: int = 150
    phi: float = 2.0
    iw_df: float = 60.0
    seed: int = 0

    def __post_init__(self):
        defaults = {
            "sim1": dict(G=150, gamma=1.2, lib_bounds=(1.0, 1.0)),
            "sim2": dict(G=1000, gamma=1.2, lib_bounds=(0.9, 1.1)),
            "sim3": dict(G=1000, gamma=0.5, lib_bounds=(0.9, 1.1)),
        }
        if self.scheme not in defaults:
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        for key, value in defaults[self.scheme].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        object.__setattr__(self, "lib_bounds", tuple(float(b) for b in self.lib_bounds))
        if self.K != 3:
            raise ValidationError("the gene patterns are defined for K = 3")
        if self.n_informative % 3:
            raise ValidationError("n_informative must split into three equal pattern blocks")
        if self.scheme == "sim1":
            if (self.G, self.n_per_cluster, self.lib_bounds) != (150, 15, (1.0, 1.0)) or self.n_informative != 150:
                raise ValidationError("sim1 fixes G=150, 15 samples per cluster, lib_bounds=(1,1)")
        elif self.n_informative > self.G:
            raise ValidationError("n_informative exceeds G")
        lo, hi = self.lib_bounds
        if not 0 < lo <= hi:
            raise ValidationError("lib_bounds must satisfy 0 < LB <= UB")
        if self.gamma <= 0:
            raise ValidationError("gamma must be positive")
        if self.phi <= 0:
            raise ValidationError("phi must be positive")
        if self.scheme == "sim3":
            if not 0.0 <= self.alpha < 1.0:
                raise ValidationError("alpha must lie in [0, 1)")
            if self.n_modules * self.module_size > self.n_informative:
                raise ValidationError("modules cover more genes than are informative")
            block = self.n_informative // 3
            if block % self.module_size:
                raise ValidationError("modules must not straddle pattern blocks")

    @property
    def n(self) -> int:
        return self.K * self.n_per_cluster


@dataclass
class SimulatedDataset:
    counts: CountMatrix
    labels: np.ndarray
    informative_mask: np.ndarray
    true_beta: np.ndarray
    library_scale: np.ndarray
    config: SimulationConfig
    extra: dict = field(default_factory=dict)


def pattern_matrix(G, n_informative=150):
    """Cluster pattern for every gene; non-informative rows are zero."""
    delta = np.zeros((G, 3), dtype=int)
    block = n_informative // 3
    for b in range(3):
        delta[b * block : (b + 1) * block] = PATTERNS[b]
    return delta


def generate(cfg: SimulationConfig, dist: EmpiricalMeanDist | None = None, phi=None) -> SimulatedDataset:
    """Simulate one dataset; a pure function of ``(cfg, dist, phi)``.

    ``phi`` overrides ``cfg.phi`` and may be a per-gene vector.
    """
    dist = default_surrogate_dist() if dist is None else dist
    rng = np.random.default_rng(cfg.seed)
    G, K, n = cfg.G, cfg.K, cfg.n
    phi = np.broadcast_to(np.asarray(cfg.phi if phi is None else phi, dtype=float), (G,))
    if np.any(phi <= 0):
        raise ValidationError("dispersions must be positive")

    labels = np.repeat(np.arange(1, K + 1), cfg.n_per_cluster)
    delta = pattern_matrix(G, cfg.n_informative)
    informative = np.any(delta != 0, axis=1)

    if cfg.scheme == "sim3":
        effect = truncated_normal(cfg.gamma, 1.0, cfg.gamma / 2, size=G, rng=rng)
        mu = dist.sample(G, rng)
    else:
        mu = dist.sample(G, rng)
        effect = truncated_normal(cfg.gamma, 1.0, cfg.gamma / 2, size=G, rng=rng)
    theta = np.log2(mu)[:, None] + effect[:, None] * delta  # G x K, log2 scale

    if cfg.scheme == "sim1":
        a = np.ones(n)
    else:
        a = rng.uniform(*cfg.lib_bounds, size=n)

    extra = {}
    if cfg.scheme == "sim3":
        d = cfg.module_size
        psi = (1.0 - cfg.alpha) * np.eye(d) + cfg.alpha * np.ones((d, d))
        log2_expr = np.repeat(np.log2(mu)[:, None], n, axis=1)
        covs = np.empty((cfg.n_modules, K, d, d))
        for mod in range(cfg.n_modules):
            genes = slice(mod * d, (mod + 1) * d)
            for k in range(K):
                covs[mod, k] = cov_to_corr(sample_inverse_wishart(psi, cfg.iw_df, rng))
                members = np.flatnonzero(labels == k + 1)
                draws = rng.multivariate_normal(theta[genes, k], covs[mod, k], size=len(members),
                                                method="cholesky")
                log2_expr[genes, members] = draws.T
        # informative genes outside any module keep their cluster means
        covered = cfg.n_modules * d
        for j in range(covered, G):
            if informative[j]:
                log2_expr[j] = theta[j, labels - 1]
        mean = a[None, :] * np.exp2(log2_expr)
        extra["module_correlations"] = covs
    else:
        mean = a[None, :] * np.exp2(theta[:, labels - 1])

    counts = sample_nb(mean, phi[:, None], rng)
    m = CountMatrix.from_array(counts)
    return SimulatedDataset(m, labels, informative, theta, a, cfg, extra)


def write_truth(ds: SimulatedDataset, samples_path, genes_path):
    """Write the sample-label and gene-truth sidecars."""
    with open(samples_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "library_scale"])
        for sid, lab, a in zip(ds.counts.sample_ids, ds.labels, ds.library_scale):
            w.writerow([sid, int(lab), repr(float(a))])
    with open(genes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        K = ds.true_beta.shape[1]
        w.writerow(["gene_id", "informative", *[f"true_beta_{k + 1}" for k in range(K)]])
        for gid, inf, row in zip(ds.counts.gene_ids, ds.informative_mask, ds.true_beta):
            w.writerow([gid, int(inf), *(repr(float(v)) for v in row)])


def config_record(cfg: SimulationConfig) -> dict:
    return asdict(cfg)


def with_seed(cfg: SimulationConfig, seed: int) -> SimulationConfig:
    return replace(cfg, seed=int(seed))
