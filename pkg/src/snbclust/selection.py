"""BIC-based tuning of the penalty along warm-started lambda paths."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import fit_sgclust, sgclust_bic, sgclust_lambda_max, standardize
from .errors import SnbClustError, ValidationError
from .mixture import FitConfig, MixtureFit, fit, selected_genes, warm_config
from .nb import NBData

log = logging.getLogger(__name__)

N_LAMBDA = 16
LAMBDA_RATIO = 1e-3


def effective_df(K: int, G: int, q: int) -> int:
    """(K - 1) mixing weights plus the K*G means not shrunk to the global mean."""
    return (K - 1) + K * G - q


def bic(fit: MixtureFit, n: int) -> float:
    """BIC from the unpenalized mixture log-likelihood at the penalized estimate."""
    G = fit.beta.shape[0]
    return -2.0 * fit.loglik + np.log(n) * effective_df(fit.K, G, fit.n_shrunk)


@dataclass
class PathResult:
    lambdas: np.ndarray
    fits: list
    penalized_loglik: np.ndarray
    loglik: np.ndarray
    q: np.ndarray
    n_selected: np.ndarray
    bic: np.ndarray
    chosen_index: int
    method: str = "snbclust"
    errors: dict = field(default_factory=dict)

    @property
    def chosen(self):
        return self.fits[self.chosen_index]

    @property
    def chosen_lambda(self) -> float:
        return float(self.lambdas[self.chosen_index])


def choose_index(bic_values) -> int:
    """argmin of BIC over finite entries; ties go to the larger lambda."""
    b = np.asarray(bic_values, dtype=float)
    ok = np.isfinite(b)
    if not ok.any():
        raise SnbClustError("no lambda on the path produced a fit")
    best = np.min(b[ok])
    return int(np.flatnonzero(ok & (b == best))[-1])


def lambda_grid(lam_max: float, size: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> np.ndarray:
    return np.geomspace(lam_max * ratio, lam_max, size)


def _score_at_target(data: NBData, z, beta_star):
    lmu = np.clip(data.log_s[None, :] + beta_star[:, None], -50, 50)
    mu = np.exp(lmu)
    resid = (data.y - mu) / (1.0 + mu / data.phi[:, None])
    return resid @ z  # G x K


def snbclust_lambda_max(m, prof, beta_star, cfg: FitConfig, pilot: MixtureFit | None = None,
                        max_doublings: int = 30) -> float:
    """Smallest lambda (up to doubling) at which a pilot-warm-started fit is fully shrunk.

    The search starts at the KKT bound ``max |score(beta_star)|`` under the
    pilot responsibilities.
    """
    data = m if isinstance(m, NBData) else NBData(m, prof)
    beta_star = np.asarray(getattr(beta_star, "beta_star", beta_star), dtype=float)
    if pilot is None:
        pilot = fit(data, prof, beta_star, replace(cfg, lam=0.0))
    K, G = pilot.K, len(beta_star)
    lam = float(np.max(np.abs(_score_at_target(data, pilot.responsibilities, beta_star))))
    lam = max(lam, 1e-8)
    for _ in range(max_doublings):
        f = fit(data, prof, beta_star, warm_config(cfg, pilot, lam))
        if f.n_shrunk == K * G:
            return lam
        lam *= 2.0
    return lam


def run_lambda_path(m, prof, beta_star, K, lambda_grid, cfg: FitConfig | None = None) -> PathResult:
    """Fit each lambda in increasing order, warm-starting from the previous solution."""
    lambdas = np.asarray(lambda_grid, dtype=float)
    if lambdas.size == 0:
        raise ValidationError("lambda grid is empty")
    if np.any(np.diff(lambdas) <= 0) or np.any(lambdas < 0):
        raise ValidationError("lambda grid must be non-negative and increasing")
    cfg = FitConfig(K=K) if cfg is None else replace(cfg, K=K)
    data = m if isinstance(m, NBData) else NBData(m, prof)
    beta_star = np.asarray(getattr(beta_star, "beta_star", beta_star), dtype=float)
    x = prof.log_cpm if prof is not None else None
    n = data.shape[1]

    fits, errors, prev = [], {}, None
    for t, lam in enumerate(lambdas):
        c = replace(cfg, lam=lam) if prev is None else warm_config(cfg, prev, lam)
        try:
            f = fit(data, prof, beta_star, c, x_logcpm=x)
        except SnbClustError as exc:
            log.warning("lambda=%g failed: %s", lam, exc)
            errors[t] = str(exc)
            fits.append(None)
            continue
        fits.append(f)
        prev = f
    return _summarize(lambdas, fits, n, errors, "snbclust")


def _summarize(lambdas, fits, n, errors, method):
    nan = float("nan")
    pen = np.array([f.penalized_loglik if f else nan for f in fits])
    ll = np.array([f.loglik if f else nan for f in fits])
    if method == "snbclust":
        q = np.array([f.n_shrunk if f else -1 for f in fits])
        nsel = np.array([int(selected_genes(f).sum()) if f else -1 for f in fits])
        b = np.array([bic(f, n) if f else nan for f in fits])
    else:
        q = np.array([f.n_zero if f else -1 for f in fits])
        nsel = np.array([int(np.any(f.mu != 0, axis=1).sum()) if f else -1 for f in fits])
        b = np.array([sgclust_bic(f, n) if f else nan for f in fits])
    return PathResult(lambdas, fits, pen, ll, q, nsel, b, choose_index(b), method, errors)


def snbclust_path(m, prof, beta_star, cfg: FitConfig, size: int = N_LAMBDA) -> PathResult:
    """Default path: lambda_max by doubling search, then a log-spaced grid."""
    data = NBData(m, prof)
    beta_star = np.asarray(getattr(beta_star, "beta_star", beta_star), dtype=float)
    pilot = fit(data, prof, beta_star, replace(cfg, lam=0.0), x_logcpm=prof.log_cpm)
    lam_max = snbclust_lambda_max(data, prof, beta_star, cfg, pilot=pilot)
    result = run_lambda_path(data, prof, beta_star, cfg.K, lambda_grid(lam_max, size), cfg)
    result.errors["lambda_max"] = lam_max
    return result


def sgclust_path(x, K, cfg: FitConfig, lambdas=None, size: int = N_LAMBDA) -> PathResult:
    """BIC path for the penalized Gaussian mixture with warm starts."""
    xs, _, _ = standardize(x)
    n = xs.shape[1]
    cfg = replace(cfg, K=K)
    if lambdas is None:
        pilot = fit_sgclust(xs, K, 0.0, replace(cfg, lam=0.0), standardized=True)
        lam = max(sgclust_lambda_max(xs, pilot.responsibilities), 1e-8)
        for _ in range(30):
            f = fit_sgclust(xs, K, lam, cfg, standardized=True,
                            init_params=(pilot.pi, pilot.mu, pilot.sigma2))
            if f.n_zero == K * xs.shape[0]:
                break
            lam *= 2.0
        lambdas = lambda_grid(lam, size)
    lambdas = np.asarray(lambdas, dtype=float)
    fits, errors, prev = [], {}, None
    for t, lam in enumerate(lambdas):
        init = None if prev is None else (prev.pi, prev.mu, prev.sigma2)
        try:
            f = fit_sgclust(xs, K, lam, replace(cfg, lam=lam), init_params=init, standardized=True)
        except SnbClustError as exc:
            errors[t] = str(exc)
            fits.append(None)
            continue
        fits.append(f)
        prev = f
    return _summarize(lambdas, fits, n, errors, "sgclust")


def write_path(result: PathResult, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "loglik", "penalized_loglik", "q", "n_selected", "bic", "chosen"])
        for t, lam in enumerate(result.lambdas):
            w.writerow([
                repr(float(lam)), repr(float(result.loglik[t])),
                repr(float(result.penalized_loglik[t])), int(result.q[t]),
                int(result.n_selected[t]), repr(float(result.bic[t])),
                int(t == result.chosen_index),
            ])
