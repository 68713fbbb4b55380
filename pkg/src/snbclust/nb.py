"""Negative binomial kernel and penalized IRLS for log-link cluster means.

The NB is parameterized by mean ``mu`` and dispersion ``phi`` with
``Var = mu + mu**2 / phi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .counts import PHI_MAX, PHI_MIN, CountMatrix, NormalizationProfile
from .errors import ValidationError

MU_MIN = 1e-8
MU_MAX = 1e12
LOG_MU_MIN = np.log(MU_MIN)
LOG_MU_MAX = np.log(MU_MAX)
TOL_IRLS = 1e-8
MAX_IRLS_ITER = 100
W_EPS = 1e-10


@dataclass(frozen=True)
class NbParams:
    mu: float
    phi: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValidationError(f"NB mean must be positive, got {self.mu}")
        if not PHI_MIN <= self.phi <= PHI_MAX:
            raise ValidationError(f"dispersion {self.phi} outside [{PHI_MIN}, {PHI_MAX}]")

    def log_pmf(self, y):
        return nb_log_pmf(y, self.mu, self.phi)


def nb_log_pmf(y, mu, phi):
    """log P(Y = y) for NB(mu, phi); broadcasts over array arguments."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    log_denom = np.log(phi + mu)
    out = (
        gammaln(y + phi)
        - gammaln(phi)
        - gammaln(y + 1.0)
        + phi * (np.log(phi) - log_denom)
        + y * (np.log(mu) - log_denom)
    )
    return out[()] if out.ndim == 0 else out


class NBData:
    """Counts plus the beta-independent pieces of the NB log-likelihood.

    Caches the lgamma terms so repeated E-steps only pay for the
    mean-dependent part.
    """

    def __init__(self, m: CountMatrix, prof: NormalizationProfile):
        self.y = m.counts.astype(float)
        self.s = np.asarray(prof.size_factors, dtype=float)
        self.log_s = np.log(self.s)
        self.phi = np.asarray(prof.dispersions, dtype=float)
        if self.log_s.shape != (self.y.shape[1],) or self.phi.shape != (self.y.shape[0],):
            raise ValidationError("normalization profile does not match the count matrix")
        phi = self.phi[:, None]
        self.phi_y = phi + self.y
        self.y_log_s = self.y * self.log_s[None, :]
        self.const = (
            gammaln(self.y + phi) - gammaln(phi) - gammaln(self.y + 1.0) + phi * np.log(phi)
        )
        self.const_per_sample = self.const.sum(axis=0)
        self.beta_lo = LOG_MU_MIN - self.log_s.min()
        self.beta_hi = LOG_MU_MAX - self.log_s.max()

    @property
    def shape(self):
        return self.y.shape

    def clip_beta(self, beta):
        return np.clip(beta, self.beta_lo, self.beta_hi)

    def mu(self, beta):
        """``s_i exp(beta_jk)``, shape (G, n, K); beta must already be clipped."""
        return np.exp(beta)[:, None, :] * self.s[None, :, None]

    def sample_loglik(self, beta):
        """Sum over genes of log f(y_ij; s_i exp(beta_jk)), shape (n, K)."""
        beta = self.clip_beta(beta)
        mu = self.mu(beta)
        log_denom = np.log(self.phi[:, None, None] + mu)
        out = -np.einsum("gn,gnk->nk", self.phi_y, log_denom)
        out += self.y.T @ beta
        out += (self.y_log_s.sum(axis=0) + self.const_per_sample)[:, None]
        return out

    def evaluate(self, z, beta, rows=None):
        """Per-coordinate Q and IRLS quantities for the given gene rows.

        Returns ``(q, W, score)`` with ``q_jk = sum_i z_ik [y log mu - (phi + y) log(phi + mu)]``
        (lgamma constants dropped), ``W_jk = sum_i z_ik mu / (1 + mu / phi)`` and
        ``score_jk = sum_i z_ik (y - mu) / (1 + mu / phi)``.
        """
        if rows is None:
            y, phi_y, y_log_s, phi = self.y, self.phi_y, self.y_log_s, self.phi
        else:
            y, phi_y, y_log_s, phi = self.y[rows], self.phi_y[rows], self.y_log_s[rows], self.phi[rows]
        mu = np.exp(beta)[:, None, :] * self.s[None, :, None]
        phi3 = phi[:, None, None]
        denom = phi3 + mu
        q = y_log_s @ z + beta * (y @ z) - np.einsum("gnk,nk->gk", phi_y[:, :, None] * np.log(denom), z)
        ratio = phi3 / denom
        W = np.einsum("gnk,nk->gk", mu * ratio, z)
        score = np.einsum("gnk,nk->gk", (y[:, :, None] - mu) * ratio, z)
        return q, W, score


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_toward(target, unpenalized, threshold):
    """Weighted-lasso proximal step centred on ``target``.

    Returns ``target`` bit-for-bit wherever the threshold closes the gap.
    """
    diff = unpenalized - target
    shrunk = target + np.sign(diff) * np.maximum(np.abs(diff) - threshold, 0.0)
    return np.where(np.abs(diff) <= threshold, target, shrunk)


def irls_working(data, z, beta):
    """Weighted totals and unpenalized IRLS targets for every (j, k).

    Returns ``(W, beta_tilde)`` where ``W_jk = sum_i z_ik w_ijk`` and
    ``beta_tilde`` is the weighted mean of the working response minus
    the offset.
    """
    _, W, score = data.evaluate(np.asarray(z, float), data.clip_beta(np.asarray(beta, float)))
    with np.errstate(invalid="ignore", divide="ignore"):
        return W, beta + score / W


def lasso_update(target, lam):
    def update(W, beta_tilde, beta, rows):
        t = target[rows][:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            new = lasso_toward(t, beta_tilde, lam / W) if lam > 0 else beta_tilde
        return np.where(W > W_EPS, new, t)
    return update


def lasso_penalty_terms(target, lam):
    def penalty(beta, rows):
        if lam == 0:
            return 0.0
        return lam * np.abs(beta - target[rows][:, None])
    return penalty


def penalized_irls(
    data: NBData,
    z,
    beta0,
    target=None,
    lam: float = 0.0,
    tol: float = 1e-6,
    max_iter: int = 50,
    update=None,
    penalty=None,
    coupled: bool = False,
):
    """Maximize ``sum_i z_ik log f(y_ij; s_i exp(beta_jk)) - penalty`` over every (j, k).

    Each pass re-linearizes the likelihood (weights ``mu / (1 + mu/phi)``,
    working response ``log s + beta + (y - mu)/mu``) and solves the
    penalized weighted least-squares problem in closed form. A step that
    lowers the objective is halved until it does not, which keeps the
    inner loop an ascent method. Genes whose coordinates all moved less
    than ``tol`` are frozen.

    ``update(W, beta_tilde, beta, rows)`` and ``penalty(beta, rows)`` let
    callers swap in another penalty; with ``coupled`` the ascent check is
    made per gene rather than per coordinate.

    Returns ``(beta, n_iter, converged)``; the last two are per coordinate.
    """
    z = np.asarray(z, dtype=float)
    beta = data.clip_beta(np.array(beta0, dtype=float, copy=True))
    G, K = beta.shape
    target = np.zeros(G) if target is None else np.asarray(target, dtype=float)
    if update is None:
        update = lasso_update(target, lam)
    if penalty is None:
        penalty = lasso_penalty_terms(target, lam)

    def objective(b, rows):
        q, W, score = data.evaluate(z, b, rows)
        return q - penalty(b, rows), W, score

    def worse(q_new, q_old):
        if coupled:
            qn, qo = q_new.sum(axis=1), q_old.sum(axis=1)
            return np.repeat((qn < qo - 1e-10 * (1.0 + np.abs(qo)))[:, None], K, axis=1)
        return q_new < q_old - 1e-10 * (1.0 + np.abs(q_old))

    n_iter = np.zeros((G, K), dtype=int)
    converged = np.zeros((G, K), dtype=bool)
    rows = np.arange(G)
    b = beta
    q, W, score = objective(b, rows)
    for _ in range(max_iter):
        with np.errstate(invalid="ignore", divide="ignore"):
            beta_tilde = b + score / W
        full = update(W, beta_tilde, b, rows)
        full = np.where(np.isfinite(full), data.clip_beta(full), b)
        prop = full
        q_new, W_new, s_new = objective(prop, rows)
        bad = worse(q_new, q)
        step = 1.0
        for _ in range(30):
            if not bad.any():
                break
            step *= 0.5
            sub = np.flatnonzero(bad.any(axis=1))
            trial = b[sub] + step * (full[sub] - b[sub])
            qt, Wt, st = objective(trial, rows[sub])
            m = bad[sub]
            prop[sub] = np.where(m, trial, prop[sub])
            q_new[sub] = np.where(m, qt, q_new[sub])
            W_new[sub] = np.where(m, Wt, W_new[sub])
            s_new[sub] = np.where(m, st, s_new[sub])
            bad = worse(q_new, q)
        prop = np.where(bad, b, prop)
        delta = np.abs(prop - b)
        q = np.where(bad, q, q_new)
        W = np.where(bad, W, W_new)
        score = np.where(bad, score, s_new)
        n_iter[rows] += 1
        b = prop
        beta[rows] = b
        done = delta < tol
        converged[rows] = done
        keep = ~np.all(done, axis=1)
        if not keep.any():
            break
        rows, b, q, W, score = rows[keep], b[keep], q[keep], W[keep], score[keep]
    return beta, n_iter, converged


@dataclass(frozen=True)
class GlobalMeans:
    beta_star: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    degenerate: np.ndarray


def fit_null_means(
    m: CountMatrix, prof: NormalizationProfile, tol: float = TOL_IRLS, max_iter: int = MAX_IRLS_ITER
) -> GlobalMeans:
    """Per-gene log-scale global mean under the no-cluster NB model.

    IRLS starts from ``log((sum_i y_ij + 0.5) / sum_i s_i)``. All-zero
    genes are pinned to ``log(MU_MIN)`` and flagged degenerate.
    """
    data = m if isinstance(m, NBData) else NBData(m, prof)
    G, n = data.shape
    s = np.exp(data.log_s)
    total = data.y.sum(axis=1)
    beta0 = np.log((total + 0.5) / s.sum())[:, None]
    z = np.ones((n, 1))
    beta, n_iter, converged = penalized_irls(data, z, beta0, lam=0.0, tol=tol, max_iter=max_iter)
    beta, n_iter, converged = beta[:, 0], n_iter[:, 0], converged[:, 0]
    failed = ~np.isfinite(beta)
    if failed.any():
        beta[failed] = np.log(np.maximum(total[failed], MU_MIN) / s.sum())
        converged[failed] = False
    degenerate = total == 0
    beta[degenerate] = LOG_MU_MIN
    converged[degenerate] = False
    return GlobalMeans(beta, converged, n_iter, degenerate)
