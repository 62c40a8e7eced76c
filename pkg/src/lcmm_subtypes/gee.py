"""Generalized estimating equations with subject-level clustering.

Gaussian-identity and binomial-logit families with independence or
exchangeable working correlation. Fisher scoring for the coefficients,
moment estimates for the dispersion and the exchangeable correlation, and a
cluster-robust sandwich covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

FAMILIES = ("gaussian", "binomial")
CORRELATIONS = ("independence", "exchangeable")
ETA_LIMIT = 30.0


class GeeError(ValueError):
    pass


class RankDeficientError(GeeError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class GeeBoundaryError(GeeError):
    """No finite estimate: constant or separated binary outcome."""


class GeeConvergenceError(GeeError):
    pass


@dataclass(frozen=True)
class GeeResult:
    outcome: str
    predictors: tuple
    family: str
    correlation: str
    coef: np.ndarray
    robust_cov: np.ndarray
    naive_cov: np.ndarray
    alpha: float
    scale: float
    n_clusters: int
    n_units: int
    iterations: int

    @property
    def se(self):
        return np.sqrt(np.diag(self.robust_cov))

    @property
    def z(self):
        return self.coef / self.se

    @property
    def p_values(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def index(self, name) -> int:
        return self.predictors.index(name)

    def wald_test(self, names):
        """Joint Wald chi-square test that the named coefficients are all zero."""
        idx = [self.index(n) for n in names]
        b = self.coef[idx]
        C = self.robust_cov[np.ix_(idx, idx)]
        stat = float(b @ np.linalg.solve(C, b))
        return stat, len(idx), float(stats.chi2.sf(stat, len(idx)))


def collinear_columns(X, names, tol=1e-10):
    """Columns that are linear combinations of the columns before them."""
    bad = []
    keep = []
    for j in range(X.shape[1]):
        trial = X[:, keep + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] <= tol * max(s[0], 1.0):
            bad.append(names[j])
        else:
            keep.append(j)
    return bad


def _cluster_blocks(groups):
    """Group row indices by cluster, batched by cluster size."""
    _, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    by_size = {}
    for c, n in enumerate(counts):
        by_size.setdefault(int(n), []).append(order[bounds[c] : bounds[c + 1]])
    return {n: np.array(rows) for n, rows in sorted(by_size.items())}, len(counts)


def _mean_var(eta, family):
    if family == "gaussian":
        return eta, np.ones_like(eta), np.ones_like(eta)
    mu = 1.0 / (1.0 + np.exp(-eta))
    v = mu * (1.0 - mu)
    return mu, v, v  # mean, variance function, d mu / d eta


def _working_inverse(n, m, alpha):
    """Inverse of the n x n exchangeable correlation, repeated m times."""
    if n == 1 or alpha == 0.0:
        return np.broadcast_to(np.eye(n), (m, n, n))
    Rinv = (np.eye(n) - alpha / (1.0 + (n - 1) * alpha) * np.ones((n, n))) / (1.0 - alpha)
    return np.broadcast_to(Rinv, (m, n, n))


def gee_fit(y, X, groups, family="gaussian", correlation="exchangeable", names=None, outcome="y",
            max_iter=100, tol=1e-8) -> GeeResult:
    """Fit a marginal GLM by GEE.

    ``y`` (n,), ``X`` (n, p) and ``groups`` (n,) give the unit rows; units
    sharing a group label are one cluster.
    """
    if family not in FAMILIES:
        raise GeeError(f"unknown family {family!r}")
    if correlation not in CORRELATIONS:
        raise GeeError(f"unknown working correlation {correlation!r}")
    y = np.asarray(y, float)
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    groups = np.asarray(groups)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    if len(y) != n or len(groups) != n or len(names) != p:
        raise GeeError("y, X, groups and names have inconsistent lengths")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise GeeError("non-finite values in outcome or design")
    bad = collinear_columns(X, names)
    if bad or n <= p:
        raise RankDeficientError(bad or names)
    blocks, n_clusters = _cluster_blocks(groups)
    if n_clusters < 2:
        raise GeeError("at least two clusters are required")
    if family == "binomial":
        if not np.all((y == 0) | (y == 1)):
            raise GeeError("binomial outcome must be 0/1")
        if y.min() == y.max():
            raise GeeBoundaryError(f"outcome {outcome!r} is constant; no finite logit estimate")

    beta = np.zeros(p)
    if family == "gaussian":
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
    alpha = 0.0
    scale = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        if family == "binomial" and np.max(np.abs(eta)) > ETA_LIMIT:
            raise GeeBoundaryError(f"fitted probabilities for {outcome!r} reach 0 or 1 (separation)")
        mu, var, dmu = _mean_var(eta, family)
        r = (y - mu) / np.sqrt(var)
        scale = float(r @ r) / (n - p)
        if correlation == "exchangeable":
            alpha = _exchangeable_alpha(r, blocks, scale, p)
        step, _, _ = _score_step(X, y, mu, var, dmu, blocks, alpha)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise GeeConvergenceError(f"GEE for {outcome!r} did not converge in {max_iter} iterations")

    eta = X @ beta
    mu, var, dmu = _mean_var(eta, family)
    _, Binv, meat = _score_step(X, y, mu, var, dmu, blocks, alpha)
    robust = Binv @ meat @ Binv
    robust = 0.5 * (robust + robust.T)
    return GeeResult(outcome, names, family, correlation, beta, robust, Binv * scale, alpha, scale,
                     n_clusters, n, it)


def _exchangeable_alpha(r, blocks, scale, p):
    num = 0.0
    pairs = 0.0
    for size, rows in blocks.items():
        if size < 2:
            continue
        rr = r[rows]
        num += float(np.sum((rr.sum(axis=1) ** 2 - (rr**2).sum(axis=1)) / 2.0))
        pairs += rows.shape[0] * size * (size - 1) / 2.0
    if pairs <= p:
        return 0.0
    alpha = num / (scale * (pairs - p))
    return float(np.clip(alpha, -0.99 / (max(blocks) - 1) if max(blocks) > 1 else -0.99, 0.99))


def _score_step(X, y, mu, var, dmu, blocks, alpha):
    p = X.shape[1]
    B = np.zeros((p, p))
    U = np.zeros(p)
    meat = np.zeros((p, p))
    for size, rows in blocks.items():
        m = rows.shape[0]
        D = dmu[rows][:, :, None] * X[rows]  # (m, size, p)
        sd = np.sqrt(var[rows])
        Rinv = _working_inverse(size, m, alpha)
        Vinv = Rinv / (sd[:, :, None] * sd[:, None, :])
        DtVinv = np.transpose(D, (0, 2, 1)) @ Vinv  # (m, p, size)
        res = (y[rows] - mu[rows])[:, :, None]
        B += np.sum(DtVinv @ D, axis=0)
        s = (DtVinv @ res)[:, :, 0]  # per-cluster scores
        U += s.sum(axis=0)
        meat += s.T @ s
    Binv = np.linalg.inv(B)
    return Binv @ U, Binv, meat
