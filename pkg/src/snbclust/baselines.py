"""Gaussian-based comparison methods operating on log-CPM values.

``fit_sgclust`` is an L1-penalized Gaussian mixture with a shared diagonal
covariance; ``fit_skmeans`` is sparse K-means with feature weights chosen
by soft-thresholding, and ``gap_statistic_s`` picks its L1 bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._kmeans import canonical_labels, kmeans
from .errors import DegenerateFitError, NumericError, ValidationError
from .mixture import VANISHING_FRACTION, FitConfig, m_step_pi
from .nb import soft_threshold

SIGMA2_FLOOR = 1e-6


@dataclass
class GaussianMixtureFit:
    K: int
    lam: float
    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    responsibilities: np.ndarray
    penalized_loglik: float
    loglik: float
    loglik_trace: np.ndarray
    n_zero: int
    converged: bool
    n_iter: int
    restarts_used: int = 1
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def standardize(x):
    """Row-wise zero mean, unit variance. Returns ``(z, mean, sd)``."""
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mean) / sd, mean[:, 0], sd[:, 0]


def _gauss_posterior(x, pi, mu, sigma2):
    # x: G x n, mu: G x K
    inv = 1.0 / sigma2
    quad = (
        (x**2 * inv[:, None]).sum(0)[:, None]
        - 2.0 * x.T @ (mu * inv[:, None])
        + (mu**2 * inv[:, None]).sum(0)[None, :]
    )
    log_dens = -0.5 * (quad + np.log(2.0 * np.pi * sigma2).sum())
    with np.errstate(divide="ignore"):
        log_joint = np.log(pi)[None, :] + log_dens
    log_norm = logsumexp(log_joint, axis=1)
    if not np.all(np.isfinite(log_norm)):
        raise NumericError("non-finite Gaussian mixture density")
    z = np.exp(log_joint - log_norm[:, None])
    z /= z.sum(axis=1, keepdims=True)
    return z, float(log_norm.sum())


def sgclust_m_step(x, z, sigma2, lam):
    """Penalized M-step: soft-thresholded means, then pooled per-gene variances."""
    nk = z.sum(axis=0)
    xbar = (x @ z) / nk[None, :]
    mu = soft_threshold(xbar, lam * sigma2[:, None] / nk[None, :])
    resid = (x**2) @ z - 2.0 * mu * (x @ z) + mu**2 * nk[None, :]
    sigma2 = np.maximum(resid.sum(axis=1) / x.shape[1], SIGMA2_FLOOR)
    return m_step_pi(z), mu, sigma2


def _sgclust_em(x, pi, mu, sigma2, lam, cfg):
    n = x.shape[1]
    trace, prev, converged, it = [], None, False, 0
    while True:
        z, ll = _gauss_posterior(x, pi, mu, sigma2)
        pen = ll - lam * np.abs(mu).sum()
        trace.append(pen)
        if prev is not None and abs(pen - prev) < cfg.tol_em * abs(prev):
            converged = True
            break
        if it >= cfg.max_em_iter:
            break
        prev = pen
        if np.any(z.sum(axis=0) < VANISHING_FRACTION * n):
            return None
        pi, mu, sigma2 = sgclust_m_step(x, z, sigma2, lam)
        it += 1
    return pi, mu, sigma2, z, ll, np.array(trace), converged, it


def fit_sgclust(x, K, lam, cfg: FitConfig | None = None, init_params=None, standardized=False):
    """Penalized Gaussian mixture on genes x samples continuous data.

    ``x`` is standardized per gene unless ``standardized`` is set.
    ``init_params=(pi, mu, sigma2)`` warm-starts a single EM run.
    """
    cfg = FitConfig(K=K, lam=lam) if cfg is None else cfg
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("input contains non-finite values")
    if standardized:
        xs, center, scale = x, np.zeros(x.shape[0]), np.ones(x.shape[0])
    else:
        xs, center, scale = standardize(x)
    G, n = xs.shape
    if K > n:
        raise ValidationError(f"K={K} exceeds the number of samples n={n}")

    starts = []
    if init_params is not None:
        starts.append(tuple(np.array(p, dtype=float) for p in init_params))
    else:
        seen = set()
        for ss in np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts):
            rng = np.random.default_rng(ss)
            if cfg.init == "random_partition":
                labels = rng.permutation(np.arange(n) % K)
            else:
                labels, _ = kmeans(xs.T, K, rng, n_init=cfg.kmeans_n_init)
            labels = canonical_labels(labels)
            if labels.tobytes() in seen:
                continue
            seen.add(labels.tobytes())
            z0 = np.zeros((n, K))
            z0[np.arange(n), labels] = 1.0
            starts.append(sgclust_m_step(xs, z0, np.ones(G), lam))

    best, used = None, 0
    for pi0, mu0, s0 in starts:
        used += 1
        try:
            res = _sgclust_em(xs, pi0, mu0, s0, lam, cfg)
        except NumericError:
            res = None
        if res is not None and (best is None or res[5][-1] > best[5][-1]):
            best = res
    if best is None:
        raise DegenerateFitError("every sgClust restart produced a vanishing cluster")
    pi, mu, sigma2, z, ll, trace, converged, it = best
    return GaussianMixtureFit(
        K=K, lam=float(lam), pi=pi, mu=mu, sigma2=sigma2, responsibilities=z,
        penalized_loglik=float(trace[-1]), loglik=ll, loglik_trace=trace,
        n_zero=int(np.sum(mu == 0.0)), converged=converged, n_iter=it,
        restarts_used=used, center=center, scale=scale,
    )


def sgclust_bic(fit: GaussianMixtureFit, n: int) -> float:
    """BIC with K-1 mixing weights, G variances and the non-zero means."""
    G, K = fit.mu.shape
    d_e = (K - 1) + G + K * G - fit.n_zero
    return -2.0 * fit.loglik + np.log(n) * d_e


def sgclust_lambda_max(xs, z):
    """Smallest lambda that zeroes every mean for fixed responsibilities."""
    nk = z.sum(axis=0)
    xbar = (xs @ z) / nk[None, :]
    sigma2 = np.maximum(((xs**2).sum(axis=1)) / xs.shape[1], SIGMA2_FLOOR)
    return float(np.max(np.abs(xbar) * nk[None, :] / sigma2[:, None]))


# --- sparse K-means -------------------------------------------------------


@dataclass
class SparseKmeansFit:
    labels: np.ndarray
    weights: np.ndarray
    s: float
    objective: float
    bcss: np.ndarray
    objective_trace: np.ndarray
    n_iter: int


def per_gene_bcss(x, labels):
    """Between-cluster sum of squares per gene (pairwise-distance form).

    ``TSS_j = (1/n) sum_{i,i'} d_j`` and ``WCSS_j = sum_k (1/n_k) sum_{i,i' in C_k} d_j``
    with ``d_j`` the squared difference; both equal twice the centred sums.
    """
    x = np.asarray(x, dtype=float)
    tss = 2.0 * ((x - x.mean(axis=1, keepdims=True)) ** 2).sum(axis=1)
    wcss = np.zeros(x.shape[0])
    for k in np.unique(labels):
        xk = x[:, labels == k]
        wcss += 2.0 * ((xk - xk.mean(axis=1, keepdims=True)) ** 2).sum(axis=1)
    return tss - wcss


def _l1_bisect(b, s, tol=1e-12, max_iter=200):
    """Soft-threshold level that makes the normalized weights meet ``||w||_1 = s``."""
    def normed(delta):
        v = soft_threshold(b, delta)
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    w = normed(0.0)
    if np.abs(w).sum() <= s:
        return w, 0.0
    lo, hi = 0.0, float(np.max(b))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if np.abs(normed(mid)).sum() > s:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    w = normed(hi)
    if not np.any(w > 0):
        # tied maxima with s < sqrt(#ties): the optimum spreads s evenly over the tie set
        top = b == np.max(b)
        w = top * min(1.0 / np.sqrt(top.sum()), s / top.sum())
    return w, hi


def update_weights(bcss, s):
    """Maximize ``sum w_j b_j`` subject to ``||w||_2 <= 1``, ``||w||_1 <= s``, ``w >= 0``.

    Returns ``(weights, delta)``.
    """
    b = np.maximum(np.asarray(bcss, dtype=float), 0.0)
    if not np.any(b > 0):
        raise DegenerateFitError("no gene has positive between-cluster sum of squares")
    if s < 1:
        raise ValidationError("sparsity bound s must be >= 1")
    # weights are scale-free; rescaling avoids underflow in the l2 norm
    scale = np.max(b)
    w, delta = _l1_bisect(b / scale, s)
    return w, delta * scale


def fit_skmeans(x, K, s, cfg: FitConfig | None = None, rng=None, max_iter=20, tol=1e-4, n_init=10):
    """Sparse K-means on genes x samples data by alternating clusters and weights."""
    x = np.asarray(x, dtype=float)
    G, n = x.shape
    if not 1.0 <= s <= np.sqrt(G) + 1e-12:
        raise ValidationError(f"s={s} outside [1, sqrt(G)]")
    if K > n:
        raise ValidationError(f"K={K} exceeds the number of samples n={n}")
    if rng is None:
        rng = np.random.default_rng(0 if cfg is None else cfg.seed)
    X = x.T
    w = np.full(G, 1.0 / np.sqrt(G))
    labels, _ = kmeans(X, K, rng, n_init=n_init, weights=w)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        bcss = per_gene_bcss(x, labels)
        w_new, _ = update_weights(bcss, s)
        trace.append(float(w_new @ bcss))
        change = np.abs(w_new - w).sum() / np.abs(w).sum()
        w = w_new
        if change < tol:
            break
        active = w > 0
        new_labels, _ = kmeans(X[:, active], K, rng, n_init=n_init, weights=w[active],
                               init_labels=labels)
        trace.append(float(w @ per_gene_bcss(x, new_labels)))
        labels = new_labels
    bcss = per_gene_bcss(x, labels)
    return SparseKmeansFit(
        labels=canonical_labels(labels) + 1, weights=w, s=float(s),
        objective=float(w @ bcss), bcss=bcss, objective_trace=np.array(trace), n_iter=it,
    )


def default_s_grid(G, size=10):
    return np.geomspace(1.5, np.sqrt(G), size)


@dataclass
class GapResult:
    s_grid: np.ndarray
    gaps: np.ndarray
    sds: np.ndarray
    chosen_s: float
    chosen_index: int


def gap_statistic_s(x, K, s_grid=None, n_perm=10, seed=0, n_init=10) -> GapResult:
    """Choose the sparsity bound by the permutation gap statistic.

    ``gap(s) = log O(s) - mean_b log O*_b(s)`` where ``O`` is the weighted
    BCSS objective and ``O*_b`` its value on data with each gene permuted
    independently across samples. Picks the smallest ``s`` whose gap is
    within one permutation standard deviation of the maximum.
    """
    x = np.asarray(x, dtype=float)
    G, n = x.shape
    s_grid = default_s_grid(G) if s_grid is None else np.asarray(s_grid, dtype=float)
    if n_perm < 2:
        raise ValidationError("the gap statistic needs at least 2 permutations")
    if np.any(s_grid < 1) or np.any(s_grid > np.sqrt(G) + 1e-12):
        raise ValidationError("s_grid must lie within [1, sqrt(G)]")
    rng = np.random.default_rng(seed)
    observed = np.array([np.log(fit_skmeans(x, K, s, rng=rng, n_init=n_init).objective)
                         for s in s_grid])
    perm = np.empty((n_perm, len(s_grid)))
    for b in range(n_perm):
        xp = rng.permuted(x, axis=1)
        for t, s in enumerate(s_grid):
            perm[b, t] = np.log(fit_skmeans(xp, K, s, rng=rng, n_init=n_init).objective)
    gaps = observed - perm.mean(axis=0)
    sds = perm.std(axis=0, ddof=1)
    best = int(np.argmax(gaps))
    idx = int(np.flatnonzero(gaps >= gaps[best] - sds[best])[0])
    return GapResult(s_grid, gaps, sds, float(s_grid[idx]), idx)
