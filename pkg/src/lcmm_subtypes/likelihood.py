"""Marginal likelihood of the latent-class linear mixed model and its gradient.

For eye i in class g the latent outcome is Gaussian with mean
``X1 beta + X2 v_g`` and covariance ``V_i = Z L L' Z' + sigma^2 I``.
The batched path works on per-eye sufficient statistics and the q x q matrix
``M_i = I + L' Z'Z L / sigma^2`` (Woodbury / Sylvester identities), so the
n_i x n_i covariance is never formed.  :func:`eye_class_log_density` is the
direct dense version, kept as a reference for single eyes.
"""

from __future__ import annotations

import math

import numpy as np

from . import links
from .cohort import Cohort, EyeSeries
from .model import BASIS_FUNCTIONS, Layout, ModelSpec, Parameters

LOG_2PI = math.log(2 * math.pi)


class NumericalError(ArithmeticError):
    pass


def _basis_matrix(names, t):
    if not names:
        return np.zeros((len(t), 0))
    return np.column_stack([BASIS_FUNCTIONS[n](t) for n in names])


def eye_class_log_density(eye: EyeSeries, g: int, params: Parameters, spec: ModelSpec, extra_cov=None) -> float:
    """Log density of one eye's observations given membership in class ``g`` (0-based).

    ``extra_cov`` is an optional callable ``t -> (n, n)`` covariance added to
    V_i (hook for a serially correlated process term; unused by default).
    """
    t = np.asarray(eye.times, float)
    y = np.asarray(eye.values, float)
    lam = links.transform(y, params.link)
    mu = _basis_matrix(spec.common_basis, t) @ params.beta + _basis_matrix(spec.class_basis, t) @ params.v[g]
    Z = _basis_matrix(spec.random_basis, t)
    V = Z @ params.B @ Z.T + params.sigma**2 * np.eye(len(t))
    if extra_cov is not None:
        V = V + extra_cov(t)
    chol = None
    for attempt in range(4):
        try:
            chol = np.linalg.cholesky(V + (1e-8 * attempt) * np.eye(len(t)))
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        raise NumericalError(f"covariance of eye {eye.eye_id!r} is not positive definite")
    from scipy.linalg import solve_triangular

    z = solve_triangular(chol, lam - mu, lower=True)
    logjac = float(np.sum(links.log_jacobian(y, params.link)))
    return -0.5 * (len(t) * LOG_2PI + 2.0 * np.sum(np.log(np.diag(chol))) + z @ z) + logjac


def _logsumexp_rows(a):
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _spd_inv_logdet(M):
    """Inverse and log-determinant of a stack of small SPD matrices."""
    q = M.shape[-1]
    if q == 1:
        return 1.0 / M, np.log(M[:, 0, 0])
    if q == 2:
        a, b, d = M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]
        det = a * d - b * b
        inv = np.empty_like(M)
        inv[:, 0, 0] = d / det
        inv[:, 1, 1] = a / det
        inv[:, 0, 1] = inv[:, 1, 0] = -b / det
        return inv, np.log(det)
    c = np.linalg.cholesky(M)
    return np.linalg.inv(M), 2.0 * np.sum(np.log(np.diagonal(c, axis1=1, axis2=2)), axis=1)


class Design:
    """Per-eye sufficient statistics for one cohort and model specification."""

    def __init__(self, cohort: Cohort, spec: ModelSpec):
        if not cohort.eyes:
            raise ValueError("empty cohort")
        self.spec = spec
        self.layout = Layout(spec)
        self.eye_ids = cohort.eye_ids
        self.value_range = cohort.value_range
        counts = np.array([e.n_visits for e in cohort.eyes])
        self.counts = counts.astype(float)
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.eye_of_obs = np.repeat(np.arange(len(counts)), counts)
        self.t = np.concatenate([e.times for e in cohort.eyes]).astype(float)
        self.y = np.concatenate([e.values for e in cohort.eyes]).astype(float)
        names = list(dict.fromkeys((*spec.common_basis, *spec.class_basis, *spec.random_basis)))
        self.H = _basis_matrix(names, self.t)
        self.ix = np.array([names.index(n) for n in (*spec.common_basis, *spec.class_basis)], dtype=int)
        self.iz = np.array([names.index(n) for n in spec.random_basis], dtype=int)
        HtH = self.eye_sum(self.H[:, :, None] * self.H[:, None, :])
        self.XtX = HtH[:, self.ix][:, :, self.ix]
        self.ZtX = HtH[:, self.iz][:, :, self.ix]
        self.ZtZ = HtH[:, self.iz][:, :, self.iz]
        self.Xobs = self.H[:, self.ix]
        self.Zobs = self.H[:, self.iz]
        if spec.class_covariates:
            C = np.column_stack([np.ones(len(cohort))] + [cohort.covariate(c) for c in spec.class_covariates])
            if not np.all(np.isfinite(C)):
                raise ValueError("class-membership covariates must be complete")
            self.C = C
        else:
            self.C = np.ones((len(cohort), 1))
        self.XtX_pinv = np.linalg.pinv(self.XtX, hermitian=True)
        self._identity = self._anchor(self.y, np.zeros(len(counts))) if spec.link == "identity" else None

    @property
    def n_eyes(self) -> int:
        return len(self.counts)

    def eye_sum(self, a):
        return np.add.reduceat(a, self.starts, axis=0)

    def moments(self, lam):
        """Per-eye X'lam, Z'lam and lam'lam (used for starting values)."""
        Hl = self.eye_sum(self.H * lam[:, None])
        return Hl[:, self.ix], Hl[:, self.iz], self.eye_sum(lam * lam)

    def _anchor(self, lam, sumlogjac):
        # per-eye least-squares fit, its residual sum of squares and Z'e
        ols = (self.XtX_pinv @ self.eye_sum(self.Xobs * lam[:, None])[:, :, None])[:, :, 0]
        e = lam - np.sum(self.Xobs * ols[self.eye_of_obs], axis=1)
        return lam, sumlogjac, ols, self.eye_sum(e * e), self.eye_sum(self.Zobs * e[:, None])

    def latent(self, link):
        """Latent values, per-eye log-Jacobian sums and least-squares anchors under ``link``.

        Residual quantities are later expanded around each eye's own OLS fit,
        so no large terms cancel even when sigma is tiny.
        """
        if self._identity is not None:
            return self._identity
        return self._anchor(links.transform(self.y, link), self.eye_sum(links.log_jacobian(self.y, link)))


class Evaluation:
    """Result of one likelihood evaluation at a flat parameter vector."""

    __slots__ = ("loglik", "eye_loglik", "class_logdens", "log_prior", "tau", "grad")


def evaluate(design: Design, theta, gradient: bool = True) -> Evaluation:
    spec = design.spec
    lay = design.layout
    theta = np.asarray(theta, float)
    beta, v, L, sc, xi = lay.unpack(theta)
    params = lay.to_params(theta, design.value_range)
    s2 = params.sigma**2
    G, q = spec.n_classes, spec.q

    lam, sumlogjac, ols, rss, Zte = design.latent(params.link)
    Theta = np.hstack([np.broadcast_to(beta, (G, spec.p1)), v])  # (G, p)

    XtX, ZtX, ZtZ = design.XtX, design.ZtX, design.ZtZ
    D = ols[:, None, :] - Theta[None]  # (n, G, p)
    Dt = D.transpose(0, 2, 1)
    Xr = (XtX @ Dt).transpose(0, 2, 1)
    Zr = (ZtX @ Dt).transpose(0, 2, 1) + Zte[:, None, :]
    rr = rss[:, None] + np.sum(D * Xr, axis=2)

    K = L.T @ ZtZ @ L
    M = np.eye(q) + K / s2
    # q x q inverse of M only; the n_i x n_i covariance is never formed
    Minv, logdetM = _spd_inv_logdet(M)
    w = Zr @ L / s2  # rows are L' Zr
    Minv_w = w @ Minv  # Minv symmetric
    quad = rr / s2 - np.sum(w * Minv_w, axis=2)
    logdetV = design.counts * math.log(s2) + logdetM
    logdens = -0.5 * ((design.counts * LOG_2PI + logdetV)[:, None] + quad) + sumlogjac[:, None]

    eta = design.C @ xi.T
    eta = np.hstack([eta, np.zeros((design.n_eyes, 1))])
    log_prior = eta - _logsumexp_rows(eta)[:, None]
    joint = log_prior + logdens
    eye_ll = _logsumexp_rows(joint)
    if not np.all(np.isfinite(eye_ll)):
        bad = int(np.flatnonzero(~np.isfinite(eye_ll))[0])
        raise NumericalError(f"non-finite likelihood contribution for eye {design.eye_ids[bad]!r}")
    tau = np.exp(joint - eye_ll[:, None])

    ev = Evaluation()
    ev.loglik = float(eye_ll.sum())
    ev.eye_loglik = eye_ll
    ev.class_logdens = logdens
    ev.log_prior = log_prior
    ev.tau = tau
    ev.grad = None
    if not gradient:
        return ev

    grad = np.zeros(lay.size)
    c = Minv_w @ L.T  # rows are L M^-1 w
    XtVr = (Xr - c @ ZtX) / s2
    ZtVr = (Zr - c @ ZtZ) / s2
    wXt = np.einsum("ng,ngp->gp", tau, XtVr)
    grad[lay.beta] = wXt[:, : spec.p1].sum(axis=0)
    grad[lay.v] = wXt[:, spec.p1 :].ravel()

    LtZZ = L.T @ ZtZ
    ZtVZ = (ZtZ - LtZZ.transpose(0, 2, 1) @ Minv @ LtZZ / s2) / s2
    tZ = tau[:, :, None] * ZtVr
    S = np.einsum("ngq,ngk->qk", tZ, ZtVr) - ZtVZ.sum(axis=0)
    dL = S @ L
    grad[lay.chol] = dL[lay.tril]

    trVinv = (design.counts - np.sum(Minv * K, axis=(1, 2)) / s2) / s2
    Vr2 = (rr - 2.0 * np.sum(c * Zr, axis=2) + np.sum((c @ ZtZ) * c, axis=2)) / (s2 * s2)
    d_s2 = 0.5 * np.sum(tau * (Vr2 - trVinv[:, None]))

    if spec.link == "identity":
        grad[lay.scale] = [2.0 * s2 * d_s2]
    else:
        # per-observation derivative of the class-averaged log density w.r.t. the latent value
        e = design.eye_of_obs
        R = lam[:, None] - design.Xobs @ Theta.T
        VR = (R - np.einsum("nq,ngq->ng", design.Zobs, c[e])) / s2
        dlam = -np.sum(tau[e] * VR, axis=1)
        dlam_a, dlam_b, dlj_a, dlj_b = links.shape_partials(design.y, params.link)
        grad[lay.scale] = [
            dlam @ dlam_a + dlj_a.sum(),
            dlam @ dlam_b + dlj_b.sum(),
            -(dlam @ lam) - len(lam),
        ]

    pi = np.exp(log_prior)
    grad[lay.xi] = ((tau - pi)[:, : G - 1].T @ design.C).ravel()
    ev.grad = grad
    return ev


def log_likelihood(cohort: Cohort, params: Parameters, spec: ModelSpec) -> float:
    design = Design(cohort, spec)
    return evaluate(design, design.layout.from_params(params), gradient=False).loglik


def log_likelihood_gradient(cohort: Cohort, params: Parameters, spec: ModelSpec) -> np.ndarray:
    """Gradient over the free parameters, in the order of :class:`Layout`."""
    design = Design(cohort, spec)
    return evaluate(design, design.layout.from_params(params)).grad
