"""Sparse negative binomial mixture clustering (penalized EM).

Cluster means ``beta_jk`` live on the natural-log scale and are shrunk
toward the gene's global mean ``beta_star_j`` by a lasso penalty
``lam * sum |beta_jk - beta_star_j|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from ._kmeans import canonical_labels, kmeans
from .errors import DegenerateFitError, NumericError, ValidationError
from .nb import NBData, penalized_irls

VANISHING_FRACTION = 1e-6


@dataclass(frozen=True)
class WarmStart:
    beta: np.ndarray
    pi: np.ndarray


@dataclass(frozen=True)
class FitConfig:
    K: int
    lam: float = 0.0
    tol_em: float = 1e-6
    max_em_iter: int = 200
    tol_irls_inner: float = 1e-6
    max_irls_iter: int = 50
    n_restarts: int = 10
    seed: int = 0
    init: str | WarmStart = "kmeans_logcpm"
    kmeans_n_init: int = 20

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValidationError("K must be >= 1")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.tol_em <= 0 or self.tol_irls_inner <= 0:
            raise ValidationError("tolerances must be positive")
        if self.n_restarts < 1:
            raise ValidationError("n_restarts must be >= 1")
        if not isinstance(self.init, WarmStart) and self.init not in (
            "kmeans_logcpm",
            "random_partition",
        ):
            raise ValidationError(f"unknown init {self.init!r}")


@dataclass
class MixtureFit:
    K: int
    lam: float
    pi: np.ndarray
    beta: np.ndarray
    beta_star: np.ndarray
    responsibilities: np.ndarray
    penalized_loglik: float
    loglik: float
    loglik_trace: np.ndarray
    n_shrunk: int
    converged: bool
    restarts_used: int
    n_iter: int
    seed: int = 0
    penalty: str = "lasso"
    groups: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def lasso_penalty(beta, beta_star, lam):
    if lam == 0:
        return 0.0
    return float(lam * np.abs(beta - beta_star[:, None]).sum())


def _as_data(m, prof):
    return m if isinstance(m, NBData) else NBData(m, prof)


def _posterior(data: NBData, pi, beta):
    with np.errstate(divide="ignore"):
        log_joint = np.log(pi)[None, :] + data.sample_loglik(beta)
    log_norm = logsumexp(log_joint, axis=1)
    if not np.all(np.isfinite(log_norm)):
        raise NumericError("a sample has zero density under every component")
    z = np.exp(log_joint - log_norm[:, None])
    z /= z.sum(axis=1, keepdims=True)
    return z, float(log_norm.sum())


def e_step(m, prof, pi, beta) -> np.ndarray:
    """Posterior cluster probabilities, shape (n, K), computed in log space."""
    pi = np.asarray(pi, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return _posterior(_as_data(m, prof), pi, beta)[0]


def mixture_loglik(m, prof, pi, beta) -> float:
    """Observed-data (unpenalized) mixture log-likelihood."""
    return _posterior(_as_data(m, prof), np.asarray(pi, float), np.asarray(beta, float))[1]


def m_step_pi(responsibilities) -> np.ndarray:
    z = np.asarray(responsibilities, dtype=float)
    return z.sum(axis=0) / z.shape[0]


def m_step_beta(m, prof, responsibilities, beta_star, beta_current, lam, cfg=None):
    """Penalized IRLS update of every cluster mean given responsibilities.

    Each (j, k) coordinate is solved independently; the penalized
    weighted least-squares step has the closed form
    ``beta_star + sign(d) * max(|d| - lam / W, 0)`` with ``d`` the
    unpenalized IRLS target minus ``beta_star``.
    """
    tol = cfg.tol_irls_inner if cfg is not None else 1e-6
    max_iter = cfg.max_irls_iter if cfg is not None else 50
    data = _as_data(m, prof)
    beta, _, _ = penalized_irls(
        data,
        responsibilities,
        beta_current,
        target=np.asarray(beta_star, dtype=float),
        lam=float(lam),
        tol=tol,
        max_iter=max_iter,
    )
    return beta


def map_labels(fit) -> np.ndarray:
    """1-based MAP cluster labels; ties go to the smaller index."""
    z = fit.responsibilities if hasattr(fit, "responsibilities") else np.asarray(fit)
    return np.argmax(z, axis=1) + 1


def selected_genes(fit: MixtureFit) -> np.ndarray:
    """Genes whose cluster means are not all shrunk to the target."""
    if fit.groups is not None:
        # fused fits: informative iff some pair of cluster means differs by more than group_tol
        return np.ptp(fit.beta, axis=1) > fit.extra.get("group_tol", 0.0)
    return np.any(fit.beta != fit.beta_star[:, None], axis=1)


def count_shrunk(beta, beta_star) -> int:
    return int(np.sum(beta == beta_star[:, None]))


def _initial_partitions(cfg: FitConfig, x_logcpm, n):
    """One hard partition per restart, duplicates removed."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)
    seen, parts = set(), []
    for ss in seqs:
        rng = np.random.default_rng(ss)
        if cfg.init == "kmeans_logcpm":
            labels, _ = kmeans(x_logcpm.T, cfg.K, rng, n_init=cfg.kmeans_n_init)
        else:
            labels = rng.permutation(np.arange(n) % cfg.K)
        labels = canonical_labels(labels)
        key = labels.tobytes()
        if key in seen:
            continue
        seen.add(key)
        parts.append(labels)
    return parts


class _Degenerate(Exception):
    pass


def run_em(data: NBData, beta_star, cfg: FitConfig, pi, beta, m_step, penalty):
    """EM from initial parameters until the relative penalized log-likelihood change drops below tol.

    ``m_step(z, beta)`` returns updated means and ``penalty(beta)`` the
    penalty value. Returns ``(pi, beta, z, loglik, trace, converged, n_iter)``.
    """
    n = data.shape[1]
    trace = []
    prev = None
    converged = False
    it = 0
    while True:
        z, ll = _posterior(data, pi, beta)
        pen_ll = ll - penalty(beta)
        trace.append(pen_ll)
        if prev is not None and abs(pen_ll - prev) < cfg.tol_em * abs(prev):
            converged = True
            break
        if it >= cfg.max_em_iter:
            break
        prev = pen_ll
        if np.any(z.sum(axis=0) < VANISHING_FRACTION * n):
            raise _Degenerate
        pi = m_step_pi(z)
        beta = m_step(z, beta)
        it += 1
    return pi, beta, z, ll, np.array(trace), converged, it


def _hard(labels, K):
    z = np.zeros((len(labels), K))
    z[np.arange(len(labels)), labels] = 1.0
    return z


def _logcpm_from(data: NBData):
    y = data.y
    return np.log10((y + 0.5) / (y.sum(axis=0) + 1.0) * 1e6)


def fit_restarts(data: NBData, beta_star, cfg: FitConfig, m_step, penalty, x_logcpm=None):
    """Shared restart driver for the lasso and fused variants."""
    G, n = data.shape
    K = int(cfg.K)
    if K > n:
        raise ValidationError(f"K={K} exceeds the number of samples n={n}")
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_star.shape != (G,):
        raise ValidationError("beta_star length does not match the gene count")

    starts = []
    if isinstance(cfg.init, WarmStart):
        beta0 = np.asarray(cfg.init.beta, dtype=float)
        pi0 = np.asarray(cfg.init.pi, dtype=float)
        if beta0.shape != (G, K) or pi0.shape != (K,):
            raise ValidationError("warm start has the wrong shape")
        starts.append((pi0, beta0))
    else:
        if x_logcpm is None:
            x_logcpm = _logcpm_from(data)
        for labels in _initial_partitions(cfg, x_logcpm, n):
            z0 = _hard(labels, K)
            beta_init = np.repeat(beta_star[:, None], K, axis=1)
            starts.append((m_step_pi(z0), m_step(z0, beta_init)))

    best = None
    used = 0
    for pi0, beta0 in starts:
        used += 1
        try:
            res = run_em(data, beta_star, cfg, pi0, beta0, m_step, penalty)
        except (_Degenerate, NumericError):
            continue
        if best is None or res[4][-1] > best[4][-1]:
            best = res
    if best is None:
        raise DegenerateFitError("every restart produced a vanishing cluster")
    pi, beta, z, ll, trace, converged, it = best
    return dict(
        pi=pi, beta=beta, z=z, loglik=ll, trace=trace, converged=converged,
        n_iter=it, restarts_used=used,
    )


def fit(m, prof, beta_star, cfg: FitConfig, x_logcpm=None) -> MixtureFit:
    """Fit the lasso-penalized NB mixture; best penalized likelihood over restarts wins.

    ``beta_star`` may be a ``GlobalMeans`` or a plain vector.
    """
    beta_star = np.asarray(getattr(beta_star, "beta_star", beta_star), dtype=float)
    data = _as_data(m, prof)
    lam = float(cfg.lam)

    def m_step(z, beta):
        return m_step_beta(data, None, z, beta_star, beta, lam, cfg)

    def penalty(beta):
        return lasso_penalty(beta, beta_star, lam)

    if x_logcpm is None and prof is not None:
        x_logcpm = prof.log_cpm
    r = fit_restarts(data, beta_star, cfg, m_step, penalty, x_logcpm)
    return MixtureFit(
        K=int(cfg.K),
        lam=lam,
        pi=r["pi"],
        beta=r["beta"],
        beta_star=beta_star.copy(),
        responsibilities=r["z"],
        penalized_loglik=float(r["trace"][-1]),
        loglik=r["loglik"],
        loglik_trace=r["trace"],
        n_shrunk=count_shrunk(r["beta"], beta_star),
        converged=r["converged"],
        restarts_used=r["restarts_used"],
        n_iter=r["n_iter"],
        seed=cfg.seed,
    )


def warm_config(cfg: FitConfig, fit: MixtureFit, lam=None) -> FitConfig:
    """Config that restarts EM from a previous fit's parameters."""
    return replace(
        cfg,
        lam=cfg.lam if lam is None else lam,
        init=WarmStart(fit.beta.copy(), fit.pi.copy()),
        n_restarts=1,
    )
