"""Fused variant of snbClust: pairwise MCP shrinkage between cluster means.

The M-step keeps the IRLS re-linearization of the lasso variant but solves
each gene's penalized weighted least-squares problem

    1/2 sum_k W_k (beta_k - b_k)^2 + sum_{k<k'} P(beta_k - beta_k'; lam, gamma)

by ADMM with pairwise-difference splitting variables ``eta = D beta`` and
scaled duals. Genes whose cluster means fuse into a single group carry no
cluster information.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .errors import ValidationError
from .mixture import FitConfig, MixtureFit, _as_data, count_shrunk, fit_restarts
from .nb import W_EPS, fit_null_means, penalized_irls


def mcp_penalty(x, lam, gamma_mcp):
    """Minimax concave penalty: ``lam|x| - x^2/(2 gamma)`` up to ``gamma lam``, then flat."""
    if lam < 0 or gamma_mcp <= 1:
        raise ValidationError("MCP needs lam >= 0 and gamma > 1")
    a = np.abs(np.asarray(x, dtype=float))
    out = np.where(a <= gamma_mcp * lam, lam * a - a * a / (2.0 * gamma_mcp), 0.5 * gamma_mcp * lam * lam)
    return out[()] if out.ndim == 0 else out


def mcp_prox(v, step_lambda, gamma_mcp, rho):
    """argmin_x rho/2 (x - v)^2 + P(x; step_lambda, gamma_mcp); requires gamma*rho > 1."""
    if gamma_mcp * rho <= 1:
        raise ValidationError("mcp_prox requires gamma_mcp * rho > 1")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    t = step_lambda / rho
    ramp = np.sign(v) * (a - t) / (1.0 - 1.0 / (gamma_mcp * rho))
    out = np.where(a <= t, 0.0, np.where(a <= gamma_mcp * step_lambda, ramp, v))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class FusedConfig:
    lam: float = 0.0
    gamma_mcp: float = 3.0
    rho_admm: float = 1.0
    tol_admm: float = 1e-6
    max_admm_iter: int = 500
    group_tol: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.gamma_mcp <= 1:
            raise ValidationError("gamma_mcp must exceed 1")
        if self.rho_admm <= 0 or self.tol_admm <= 0 or self.max_admm_iter < 1:
            raise ValidationError("ADMM settings must be positive")
        if self.group_tol < 0:
            raise ValidationError("group_tol must be >= 0")
        if self.gamma_mcp * self.rho_admm <= 1:
            raise ValidationError("gamma_mcp * rho_admm must exceed 1")


@dataclass
class FusedState:
    beta: np.ndarray
    eta: np.ndarray
    dual: np.ndarray
    converged: np.ndarray
    n_iter: int


def difference_matrix(K: int) -> np.ndarray:
    """Rows ``e_k - e_k'`` for every pair k < k'."""
    pairs = list(combinations(range(K), 2))
    D = np.zeros((len(pairs), K))
    for p, (a, b) in enumerate(pairs):
        D[p, a], D[p, b] = 1.0, -1.0
    return D


def fused_penalty_rows(beta, lam, gamma_mcp) -> np.ndarray:
    """Per-gene sum of MCP terms over all cluster pairs."""
    beta = np.asarray(beta, dtype=float)
    K = beta.shape[1]
    if K < 2 or lam == 0:
        return np.zeros(beta.shape[0])
    diffs = beta @ difference_matrix(K).T
    return mcp_penalty(diffs, lam, gamma_mcp).sum(axis=1)


def fused_penalty(beta, lam, gamma_mcp) -> float:
    return float(fused_penalty_rows(beta, lam, gamma_mcp).sum())


def quadratic_objective(beta, W, target, lam, gamma_mcp) -> np.ndarray:
    """Per-gene ``1/2 sum_k W_k (beta_k - target_k)^2 + sum_pairs MCP``."""
    return 0.5 * np.sum(W * (beta - target) ** 2, axis=1) + fused_penalty_rows(beta, lam, gamma_mcp)


def group_labels(beta, tol) -> np.ndarray:
    """Per-gene 1-based group labels: clusters joined when their means differ by <= tol.

    Groups are the connected components of that relation, numbered in order of
    first appearance.
    """
    beta = np.asarray(beta, dtype=float)
    G, K = beta.shape
    reach = np.abs(beta[:, :, None] - beta[:, None, :]) <= tol
    for _ in range(max(K - 1, 0).bit_length()):
        reach = np.einsum("gab,gbc->gac", reach.astype(np.int8), reach.astype(np.int8)) > 0
    rep = np.argmax(reach, axis=2)  # smallest member of each component
    labels = np.zeros((G, K), dtype=int)
    for j in range(G):
        order = {}
        for k in range(K):
            labels[j, k] = order.setdefault(rep[j, k], len(order) + 1)
    return labels


def _snap_groups(beta, W, eta_zero_pairs, pairs, K):
    """Set each fused component to the W-weighted mean of its members."""
    out = beta.copy()
    G = beta.shape[0]
    adj = np.zeros((G, K, K), dtype=bool)
    adj[:, np.arange(K), np.arange(K)] = True
    for p, (a, b) in enumerate(pairs):
        adj[:, a, b] |= eta_zero_pairs[:, p]
        adj[:, b, a] |= eta_zero_pairs[:, p]
    for _ in range(max(K - 1, 0).bit_length()):
        adj = np.einsum("gab,gbc->gac", adj.astype(np.int8), adj.astype(np.int8)) > 0
    w = np.maximum(W, W_EPS)
    num = np.einsum("gab,gb->ga", adj, w * beta)
    den = np.einsum("gab,gb->ga", adj, w)
    joined = adj.sum(axis=2) > 1
    out[joined] = (num / den)[joined]
    return out


def admm_fused(W, target, beta_init, cfg: FusedConfig) -> FusedState:
    """Solve the per-gene fused-MCP weighted least-squares problem for all genes at once.

    Each gene's problem is divided by ``c = mean_k W_k`` first, so the
    quadratic has unit average curvature; the MCP becomes ``P(.; lam/c,
    gamma c)`` (the same function scaled by 1/c) and ``rho`` is applied on
    that scale. The better of the ADMM endpoint (after snapping fused
    groups) and ``beta_init`` is returned.
    """
    W = np.asarray(W, dtype=float)
    target = np.asarray(target, dtype=float)
    beta_init = np.asarray(beta_init, dtype=float)
    G, K = W.shape
    if K < 2 or cfg.lam == 0:
        return FusedState(target.copy(), np.zeros((G, 0)), np.zeros((G, 0)), np.ones(G, bool), 0)

    pairs = list(combinations(range(K), 2))
    D = difference_matrix(K)
    c = np.maximum(W.mean(axis=1), W_EPS)
    Wn = W / c[:, None]
    lam = cfg.lam / c
    gam = cfg.gamma_mcp * c
    rho = cfg.rho_admm
    # MCP prox on the normalized scale needs gamma' * rho > 1; fall back to rho'=2/gamma' when violated
    rho_g = np.maximum(rho, 2.0 / gam)

    A = Wn[:, :, None] * np.eye(K)[None] + rho_g[:, None, None] * (D.T @ D)[None]
    A_inv = np.linalg.inv(A)
    Wb = Wn * target

    beta = beta_init.copy()
    eta = beta @ D.T
    u = np.zeros_like(eta)
    converged = np.zeros(G, dtype=bool)
    it = 0
    for it in range(1, cfg.max_admm_iter + 1):
        rhs = Wb + rho_g[:, None] * ((eta - u) @ D)
        beta_new = np.einsum("gab,gb->ga", A_inv, rhs)
        v = beta_new @ D.T + u
        a = np.abs(v)
        t = (lam / rho_g)[:, None]
        gl = (gam * lam)[:, None]
        ramp = np.sign(v) * (a - t) / (1.0 - 1.0 / (gam * rho_g))[:, None]
        eta_new = np.where(a <= t, 0.0, np.where(a <= gl, ramp, v))
        r = beta_new @ D.T - eta_new
        u_new = u + r
        dual_res = rho_g[:, None] * ((eta_new - eta) @ D)
        done = (np.max(np.abs(r), axis=1) < cfg.tol_admm) & (np.max(np.abs(dual_res), axis=1) < cfg.tol_admm)
        upd = ~converged
        beta[upd], eta[upd], u[upd] = beta_new[upd], eta_new[upd], u_new[upd]
        converged |= done
        if converged.all():
            break

    snapped = _snap_groups(beta, W, eta == 0.0, pairs, K)
    f_init = quadratic_objective(beta_init, W, target, cfg.lam, cfg.gamma_mcp)
    f_snap = quadratic_objective(snapped, W, target, cfg.lam, cfg.gamma_mcp)
    f_raw = quadratic_objective(beta, W, target, cfg.lam, cfg.gamma_mcp)
    best = np.where((f_snap <= f_raw)[:, None], snapped, beta)
    f_best = np.minimum(f_snap, f_raw)
    out = np.where((f_best <= f_init)[:, None], best, beta_init)
    return FusedState(out, eta, u, converged, it)


def m_step_beta_fused(m, prof, responsibilities, beta_current, cfg: FusedConfig,
                      tol_irls: float = 1e-6, max_irls_iter: int = 50):
    """IRLS re-linearization around an ADMM fused-MCP solve, per gene."""
    data = _as_data(m, prof)
    z = np.asarray(responsibilities, dtype=float)
    beta_current = np.asarray(beta_current, dtype=float)
    G, K = beta_current.shape

    def update(W, beta_tilde, beta, rows):
        ok = W > W_EPS
        bt = np.where(ok, beta_tilde, beta)
        Wc = np.where(ok, W, 0.0)
        if K < 2 or cfg.lam == 0:
            return bt
        return admm_fused(Wc, bt, beta, cfg).beta

    def penalty(beta, rows):
        return np.repeat(fused_penalty_rows(beta, cfg.lam, cfg.gamma_mcp)[:, None] / K, K, axis=1)

    beta, _, _ = penalized_irls(
        data, z, beta_current, lam=0.0, tol=tol_irls, max_iter=max_irls_iter,
        update=update, penalty=penalty, coupled=True,
    )
    return beta


def fit_fused(m, prof, cfg_em: FitConfig, cfg_fused: FusedConfig, beta_star=None,
              x_logcpm=None) -> MixtureFit:
    """Penalized EM with the fused-MCP M-step.

    ``beta_star`` (null-model means) is used only to start each restart;
    it is estimated when not given. ``groups`` holds per-gene group labels.
    """
    data = _as_data(m, prof)
    if beta_star is None:
        beta_star = fit_null_means(data, prof)
    beta_star = np.asarray(getattr(beta_star, "beta_star", beta_star), dtype=float)
    cfg_em = replace(cfg_em, lam=cfg_fused.lam)

    def m_step(z, beta):
        return m_step_beta_fused(data, None, z, beta, cfg_fused,
                                 cfg_em.tol_irls_inner, cfg_em.max_irls_iter)

    def penalty(beta):
        return fused_penalty(beta, cfg_fused.lam, cfg_fused.gamma_mcp)

    if x_logcpm is None and prof is not None:
        x_logcpm = prof.log_cpm
    r = fit_restarts(data, beta_star, cfg_em, m_step, penalty, x_logcpm)
    groups = group_labels(r["beta"], cfg_fused.group_tol)
    return MixtureFit(
        K=int(cfg_em.K),
        lam=float(cfg_fused.lam),
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
        seed=cfg_em.seed,
        penalty="fused_mcp",
        groups=groups,
        extra={"gamma_mcp": cfg_fused.gamma_mcp, "rho_admm": cfg_fused.rho_admm,
               "group_tol": cfg_fused.group_tol},
    )


def write_groups(fit: MixtureFit, gene_ids, path):
    if fit.groups is None:
        raise ValidationError("fit has no group structure")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene_id", *[f"group_{k + 1}" for k in range(fit.K)]])
        for gid, row in zip(gene_ids, fit.groups):
            w.writerow([gid, *(int(v) for v in row)])
