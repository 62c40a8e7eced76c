"""Fitting the latent-class mixed model: starts, quasi-Newton ascent, memberships, summaries."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from . import __version__, links
from .cohort import Cohort
from .likelihood import Design, NumericalError, _basis_matrix, evaluate
from .links import LinkSpec
from .model import Layout, ModelSpec, Parameters, SpecError, intercept_column, slope_column
from .parallel import parallel_map

log = logging.getLogger(__name__)

FIT_FORMAT = "lcmm-subtypes/fit"
SIGMA_LOG_CAP = math.log(1e8)  # keeps line searches away from exp overflow


class FitError(RuntimeError):
    def __init__(self, msg, diagnostics=()):
        super().__init__(msg)
        self.diagnostics = list(diagnostics)


@dataclass(frozen=True)
class StartRecord:
    index: int
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float
    message: str

    def to_dict(self):
        return {"index": self.index, "loglik": self.loglik, "converged": self.converged,
                "iterations": self.iterations, "grad_norm": self.grad_norm, "message": self.message}


@dataclass
class FitResult:
    spec: ModelSpec
    params: Parameters
    loglik: float
    n_params: int
    converged: bool
    iterations: int
    grad_norm: float
    start_index: int
    class_order: list
    n_eyes: int
    time_window: tuple
    theta: np.ndarray  # flat vector in canonical class order
    cov: np.ndarray | None = None  # inverse negative Hessian of the log-likelihood at theta
    degenerate: bool = False
    starts: list = field(default_factory=list)

    @property
    def proportions(self) -> np.ndarray:
        return self.params.proportions

    def to_dict(self):
        return {
            "format": FIT_FORMAT,
            "version": __version__,
            "spec": self.spec.to_dict(),
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "n_params": self.n_params,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "start_index": self.start_index,
            "class_order": list(self.class_order),
            "n_eyes": self.n_eyes,
            "time_window": list(self.time_window),
            "theta": self.theta.tolist(),
            "cov": None if self.cov is None else self.cov.tolist(),
            "degenerate": self.degenerate,
            "starts": [s.to_dict() for s in self.starts],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FIT_FORMAT:
            raise ValueError("not a fit file")
        if d.get("version") != __version__:
            raise VersionMismatch(f"fit file written by version {d.get('version')}, this is {__version__}")
        spec = ModelSpec.from_dict(d["spec"])
        return cls(
            spec=spec,
            params=Parameters.from_dict(d["params"], spec),
            loglik=d["loglik"],
            n_params=d["n_params"],
            converged=d["converged"],
            iterations=d["iterations"],
            grad_norm=d["grad_norm"],
            start_index=d["start_index"],
            class_order=list(d["class_order"]),
            n_eyes=d["n_eyes"],
            time_window=tuple(d["time_window"]),
            theta=np.asarray(d["theta"], float),
            cov=None if d["cov"] is None else np.asarray(d["cov"], float),
            degenerate=d["degenerate"],
            starts=[StartRecord(**s) for s in d["starts"]],
        )


class VersionMismatch(ValueError):
    pass


def save_fit(fit: FitResult, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fit.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_fit(path) -> FitResult:
    with open(path, encoding="utf-8") as fh:
        return FitResult.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# initial values


def _eye_line_fits(design: Design, lam):
    """Per-eye OLS intercept and slope of the latent values on time."""
    t = design.t
    s = design.eye_sum
    n = design.counts
    st, stt, sy, sty = s(t), s(t * t), s(lam), s(t * lam)
    den = n * stt - st * st
    slope = np.where(den > 0, (n * sty - st * sy) / np.where(den > 0, den, 1.0), 0.0)
    intercept = (sy - slope * st) / n
    return intercept, slope


def _initial_link(design: Design) -> LinkSpec:
    if design.spec.link == "identity":
        return LinkSpec("identity", value_range=design.value_range)
    base = LinkSpec("beta", 1.0, 1.0, 0.0, 1.0, design.value_range)
    x = links.rescale(design.y, base)
    a, b = _eye_line_fits(design, x)
    resid = x - (a[design.eye_of_obs] + b[design.eye_of_obs] * design.t)
    dof = max(float(np.sum(design.counts - 2)), 1.0)
    scale = math.sqrt(max(float(resid @ resid) / dof, 1e-12))
    return base.with_params(delta2=scale)


def initial_theta(design: Design):
    """Slope-stratified start and per-parameter perturbation scales."""
    spec = design.spec
    lay = design.layout
    G, p1, p2, q = spec.n_classes, spec.p1, spec.p2, spec.q
    link = _initial_link(design)
    lam = design.latent(link)[0]
    XtL, ZtL, LtL = design.moments(lam)
    _, slope = _eye_line_fits(design, lam)

    # groups by descending slope quantile so group 0 starts as the improving class
    order = np.argsort(-slope, kind="stable")
    group = np.empty(design.n_eyes, dtype=int)
    group[order] = np.minimum((np.arange(design.n_eyes) * G) // design.n_eyes, G - 1)

    p = p1 + p2
    coefs = np.zeros((G, p))
    for g in range(G):
        m = group == g
        A = design.XtX[m].sum(axis=0)
        rhs = XtL[m].sum(axis=0)
        coefs[g] = np.linalg.lstsq(A, rhs, rcond=None)[0]
    beta = coefs[:, :p1].mean(axis=0)
    v = coefs[:, p1:]
    Theta = np.hstack([np.broadcast_to(beta, (G, p1)), v])[group]

    # per-eye random-effect fits of the residuals
    Zr = ZtL - np.einsum("nqp,np->nq", design.ZtX, Theta)
    rr = LtL - 2 * np.sum(XtL * Theta, axis=1) + np.einsum("np,npk,nk->n", Theta, design.XtX, Theta)
    ridge = 1e-8 * np.eye(q)
    b = np.linalg.solve(design.ZtZ + ridge, Zr[..., None])[..., 0]
    resid_ss = rr - np.sum(b * Zr, axis=1)
    dof = max(float(np.sum(design.counts - q)), 1.0)
    s2 = max(float(resid_ss.sum()) / dof, 1e-12)
    if spec.link == "beta":
        s2_scale = s2
        s2 = 1.0
    B = np.cov(b.T, ddof=1).reshape(q, q) if design.n_eyes > 1 else np.eye(q)
    noise = np.mean(np.linalg.inv(design.ZtZ + ridge), axis=0) * s2
    B = B - noise
    evals, evecs = np.linalg.eigh(0.5 * (B + B.T))
    floor = 1e-4 * max(float(np.max(evals)), 1e-8)
    B = (evecs * np.maximum(evals, floor)) @ evecs.T
    L = np.linalg.cholesky(B + 1e-12 * np.eye(q))

    theta = np.zeros(lay.size)
    theta[lay.beta] = beta
    theta[lay.v] = v.ravel()
    theta[lay.chol] = L[lay.tril]
    if spec.link == "identity":
        theta[lay.scale] = [0.5 * math.log(max(s2, spec.sigma_floor**2 * 4))]
    else:
        # rescale so the within-eye noise is about 1 on the latent scale
        k = 1.0 / math.sqrt(s2_scale)
        theta[lay.v] = v.ravel() * k
        theta[lay.beta] = beta * k
        theta[lay.chol] = (L * k)[lay.tril]
        theta[lay.scale] = [0.0, 0.0, math.log(link.delta2 / k)]

    # perturbation scales: between-eye spread for fixed effects, |value| otherwise
    X2 = design.XtX[:, p1:, p1:]
    per_eye = np.linalg.solve(X2 + 1e-8 * np.eye(p2), XtL[:, p1:, None])[..., 0]
    spread = per_eye.std(axis=0) if design.n_eyes > 1 else np.ones(p2)
    if spec.link == "beta":
        spread = spread / math.sqrt(s2_scale)
    scale = np.maximum(np.abs(theta), 1e-3)
    scale[lay.v] = np.tile(np.maximum(spread, 1e-3), G)
    scale[lay.xi] = 1.0
    return theta, scale


# ---------------------------------------------------------------------------
# optimisation


def _objective(design: Design):
    n = design.n_eyes

    def f(theta):
        try:
            ev = evaluate(design, theta)
        except (NumericalError, np.linalg.LinAlgError, links.LinkDomainError, FloatingPointError):
            return np.inf, np.zeros_like(theta)
        return -ev.loglik / n, -ev.grad / n

    return f


def _bounds(design: Design):
    lay = design.layout
    bounds = [(None, None)] * lay.size
    if design.spec.link == "identity":
        bounds[lay.scale.start] = (math.log(design.spec.sigma_floor), SIGMA_LOG_CAP)
    else:
        for k in range(lay.scale.start, lay.scale.stop - 1):
            bounds[k] = (math.log(0.05), math.log(50.0))
    return bounds


def _projected_grad_norm(theta, grad, bounds):
    g = np.array(grad, float)
    for k, (lo, hi) in enumerate(bounds):
        if lo is not None and theta[k] <= lo + 1e-12 and g[k] > 0:
            g[k] = 0.0
        if hi is not None and theta[k] >= hi - 1e-12 and g[k] < 0:
            g[k] = 0.0
    return float(np.max(np.abs(g))) if g.size else 0.0


def optimize(design: Design, theta0, index=0, trace=None):
    """Maximise the log-likelihood from ``theta0`` with L-BFGS-B.

    Returns (theta, StartRecord).  Objective and gradient are scaled per eye.
    ``trace``, if a list, receives the objective after every iteration.
    """
    spec = design.spec
    f = _objective(design)
    bounds = _bounds(design)
    theta0 = np.array(theta0, float)
    for k, (lo, hi) in enumerate(bounds):
        theta0[k] = np.clip(theta0[k], lo if lo is not None else -np.inf, hi if hi is not None else np.inf)
    val0, _ = f(theta0)
    if not np.isfinite(val0):
        return theta0, StartRecord(index, -math.inf, False, 0, math.inf, "non-finite start")
    cb = None
    if trace is not None:
        trace.append(val0)

        def cb(xk):
            trace.append(f(xk)[0])

    res = minimize(
        f, theta0, jac=True, method="L-BFGS-B", bounds=bounds, callback=cb,
        options={"maxiter": spec.optimizer.max_iter, "gtol": spec.optimizer.gtol, "ftol": 1e-15, "maxcor": 20},
    )
    theta, nit = res.x, int(res.nit)
    val, grad = f(theta)
    gnorm = _projected_grad_norm(theta, grad, bounds)
    msg = res.message if isinstance(res.message, str) else str(res.message)
    if np.isfinite(val) and gnorm >= spec.optimizer.gtol:
        theta, val, grad, steps = _newton_polish(design, f, theta, val, grad, bounds, spec.optimizer.gtol)
        if steps:
            nit += steps
            gnorm = _projected_grad_norm(theta, grad, bounds)
            msg += f"; {steps} Newton polish steps"
    converged = bool(np.isfinite(val) and gnorm < spec.optimizer.gtol)
    ll = -val * design.n_eyes if np.isfinite(val) else -math.inf
    return theta, StartRecord(index, float(ll), converged, nit, gnorm, msg)


def _active(theta, grad, bounds):
    out = np.zeros(len(theta), bool)
    for k, (lo, hi) in enumerate(bounds):
        out[k] = (lo is not None and theta[k] <= lo + 1e-12 and grad[k] > 0) or (
            hi is not None and theta[k] >= hi - 1e-12 and grad[k] < 0)
    return out


def _newton_polish(design, f, theta, val, grad, bounds, gtol, max_steps=5):
    """A few safeguarded Newton steps when the quasi-Newton phase stalls.

    Uses the finite-difference Hessian of the analytic gradient with
    eigenvalues replaced by their absolute values, restricted to coordinates
    not held at a bound, and backtracks until the objective does not rise.
    """
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    steps = 0
    gnorm = _projected_grad_norm(theta, grad, bounds)
    for _ in range(max_steps):
        if gnorm < gtol:
            break
        free = ~_active(theta, grad, bounds)
        try:
            H = -numerical_hessian(design, theta, floor=1e-4) / design.n_eyes
        except NumericalError:
            break
        w, U = np.linalg.eigh(H[np.ix_(free, free)])
        w = np.maximum(np.abs(w), 1e-10 * max(np.max(np.abs(w)), 1.0))
        direction = np.zeros_like(theta)
        direction[free] = -U @ ((U.T @ grad[free]) / w)
        t = 1.0
        for _ in range(40):
            cand = np.clip(theta + t * direction, lo, hi)
            cv, cg = f(cand)
            cn = _projected_grad_norm(cand, cg, bounds) if np.isfinite(cv) else np.inf
            if cv < val or (cv <= val + 1e-13 * max(1.0, abs(val)) and cn < gnorm):
                break
            t *= 0.5
        else:
            break
        theta, val, grad, gnorm = cand, cv, cg, cn
        steps += 1
    return theta, val, grad, steps


def _start_points(theta0, scale, settings, lay):
    seqs = np.random.SeedSequence(settings.seed).spawn(max(settings.n_starts, 1))
    points = [theta0]
    for k in range(1, settings.n_starts):
        rng = np.random.default_rng(seqs[k])
        points.append(theta0 + settings.perturb * scale * rng.standard_normal(len(theta0)))
    return points


def _run_start(args):
    design, theta0, index = args
    return optimize(design, theta0, index)


# ---------------------------------------------------------------------------
# canonical form


def canonical_order(spec: ModelSpec, v: np.ndarray) -> np.ndarray:
    """Internal class indices sorted from the most positive slope to the steepest decline."""
    k = slope_column(spec)
    key = v[:, k] if k is not None else v[:, 0]
    return np.argsort(-key, kind="stable")


def permute_theta(lay: Layout, theta, order):
    """Reorder class blocks of ``theta`` so new class j is old class order[j]."""
    spec = lay.spec
    G = spec.n_classes
    out = np.array(theta, float)
    v = theta[lay.v].reshape(G, spec.p2)
    out[lay.v] = v[order].ravel()
    xi = theta[lay.xi].reshape(G - 1, spec.n_membership_covariates)
    eta = np.vstack([xi, np.zeros((1, xi.shape[1]))])[order]
    out[lay.xi] = (eta[:-1] - eta[-1]).ravel()
    return out


def _normalize_chol(lay: Layout, theta):
    _, _, L, _, _ = lay.unpack(theta)
    signs = np.where(np.diag(L) < 0, -1.0, 1.0)
    out = np.array(theta, float)
    out[lay.chol] = (L * signs)[lay.tril]
    return out


def _permutation_jacobian(lay: Layout, theta, order):
    """Jacobian of :func:`permute_theta` (linear in theta)."""
    n = len(theta)
    J = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        J[:, k] = permute_theta(lay, e, order)
    return J


def _to_canonical_params(lay: Layout, theta, value_range) -> Parameters:
    """Parameters with the beta-link location expressed through delta1.

    Under the beta link the intercept of canonical class 1 is set to zero and
    the shift is carried by delta1 (likelihood unchanged).
    """
    params = lay.to_params(theta, value_range)
    if lay.spec.link != "beta":
        return params
    col = intercept_column(lay.spec)
    if col is None:
        return params
    where, k = col
    v = params.v.copy()
    beta = params.beta.copy()
    shift = v[0, k] if where == "class" else beta[k]
    if where == "class":
        v[:, k] -= shift
    else:
        beta[k] -= shift
    link = params.link.with_params(delta1=shift * params.link.delta2)
    return Parameters(beta, v, params.chol_B, params.sigma, link, params.xi)


# ---------------------------------------------------------------------------
# public API


def numerical_hessian(design: Design, theta, rel_step=1e-5, floor=1.0):
    """Central-difference Hessian of the log-likelihood from the analytic gradient.

    The step for coordinate k is ``rel_step * max(|theta_k|, floor)``.
    """
    n = len(theta)
    H = np.zeros((n, n))
    for k in range(n):
        h = rel_step * max(floor, abs(theta[k]))
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (evaluate(design, theta + e).grad - evaluate(design, theta - e).grad) / (2 * h)
    return 0.5 * (H + H.T)


def _covariance(design, theta):
    try:
        H = numerical_hessian(design, theta)
        neg = -H
        np.linalg.cholesky(neg)
        return np.linalg.inv(neg)
    except (np.linalg.LinAlgError, NumericalError):
        return None


def fit(cohort: Cohort, spec: ModelSpec, warm_start: FitResult | None = None, n_jobs: int = 1) -> FitResult:
    """Fit the G-class model from ``spec.optimizer.n_starts`` starting points.

    Start 0 comes from a slope-quantile split of per-eye OLS lines; the rest
    perturb it. A warm start, if given, is tried first. The best converged
    start wins and classes are put in canonical order.
    """
    if not cohort.eyes:
        raise SpecError("cannot fit an empty cohort")
    if spec.n_classes > len(cohort):
        raise SpecError(f"{spec.n_classes} classes exceed {len(cohort)} eyes")
    design = Design(cohort, spec)
    lay = design.layout
    theta0, scale = initial_theta(design)
    points = _start_points(theta0, scale, spec.optimizer, lay)
    if warm_start is not None:
        points = [lay.from_params(warm_start.params)] + points[: max(spec.optimizer.n_starts - 1, 0)]
    results = parallel_map(_run_start, [(design, p, i) for i, p in enumerate(points)], n_jobs)
    records = [r for _, r in results]
    ok = [i for i, r in enumerate(records) if r.converged and np.isfinite(r.loglik)]
    if not ok:
        raise FitError(f"no start converged for G={spec.n_classes}", [r.to_dict() for r in records])
    best = max(ok, key=lambda i: (records[i].loglik, -i))
    theta = _normalize_chol(lay, results[best][0])
    ev = evaluate(design, theta, gradient=False)
    order = canonical_order(spec, lay.unpack(theta)[1])
    theta = permute_theta(lay, theta, order)
    params = _to_canonical_params(lay, theta, cohort.value_range)
    cov = _covariance(design, theta)
    pi = params.proportions if not spec.class_covariates else np.exp(ev.log_prior).mean(axis=0)[order]
    degenerate = bool(np.any(pi < 1.0 / (10 * len(cohort))))
    if degenerate:
        log.warning("degenerate class at G=%d (min proportion %.2e)", spec.n_classes, float(pi.min()))
    rec = records[best]
    return FitResult(
        spec=spec,
        params=params,
        loglik=float(ev.loglik),
        n_params=spec.n_free_params(),
        converged=rec.converged,
        iterations=rec.iterations,
        grad_norm=rec.grad_norm,
        start_index=best,
        class_order=[int(k) for k in order],
        n_eyes=len(cohort),
        time_window=(0.0, float(design.t.max())),
        theta=theta,
        cov=cov,
        degenerate=degenerate,
        starts=records,
    )


@dataclass(frozen=True)
class MembershipTable:
    eye_ids: list
    tau: np.ndarray  # (n, G), canonical class order
    map_class: np.ndarray  # 1-based
    max_posterior: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.tau.shape[1]

    def label_map(self) -> dict:
        return dict(zip(self.eye_ids, self.map_class.tolist()))

    @classmethod
    def from_labels(cls, eye_ids, labels, n_classes=None):
        """One-hot table from known labels (1-based)."""
        labels = np.asarray(labels, int)
        G = n_classes or int(labels.max())
        tau = np.zeros((len(labels), G))
        tau[np.arange(len(labels)), labels - 1] = 1.0
        return cls(list(eye_ids), tau, labels.copy(), np.ones(len(labels)))


def memberships_from_tau(eye_ids, tau) -> MembershipTable:
    tau = np.asarray(tau, float)
    # argmax returns the first maximum: ties go to the lowest canonical index
    k = np.argmax(tau, axis=1)
    return MembershipTable(list(eye_ids), tau, k + 1, tau[np.arange(len(k)), k])


def posterior_memberships(cohort: Cohort, fit_result: FitResult) -> MembershipTable:
    design = Design(cohort, fit_result.spec)
    theta = design.layout.from_params(fit_result.params)
    ev = evaluate(design, theta, gradient=False)
    return memberships_from_tau(cohort.eye_ids, ev.tau)


@dataclass(frozen=True)
class ClassSummary:
    cls: int
    proportion: float
    intercept: float
    intercept_ci: tuple | None
    slope: float
    slope_ci: tuple | None
    times: np.ndarray
    mean_curve: np.ndarray  # observed (dB) scale


def _param_covariance(fit_result: FitResult):
    """Covariance of the natural class intercepts/slopes, or None."""
    if fit_result.cov is None:
        return None
    spec = fit_result.spec
    lay = Layout(spec)
    n = lay.size
    # linear map theta -> (v with canonical-class-1 intercept removed under the beta link)
    J = np.eye(n)
    col = intercept_column(spec)
    if spec.link == "beta" and col is not None and col[0] == "class":
        k = col[1]
        ref = lay.v.start + k
        for g in range(spec.n_classes):
            J[lay.v.start + g * spec.p2 + k, ref] -= 1.0
    return J @ fit_result.cov @ J.T


def class_trajectory_summary(fit_result: FitResult, n_points: int = 50, level: float = 0.95) -> list:
    """Per-class latent intercept and slope with Wald CIs, plus the mean curve in dB."""
    spec = fit_result.spec
    if tuple(spec.class_basis) != ("1", "t"):
        raise SpecError("trajectory summary needs class_basis = ('1', 't')")
    lay = Layout(spec)
    cov = _param_covariance(fit_result)
    z = norm.ppf(0.5 + level / 2)
    p = fit_result.params
    t = np.linspace(fit_result.time_window[0], fit_result.time_window[1], n_points)
    X1 = _basis_matrix(spec.common_basis, t)
    out = []
    props = p.proportions
    for g in range(spec.n_classes):
        b0, b1 = p.v[g]
        ci0 = ci1 = None
        if cov is not None:
            i0 = lay.v.start + g * spec.p2
            se0 = math.sqrt(max(cov[i0, i0], 0.0))
            se1 = math.sqrt(max(cov[i0 + 1, i0 + 1], 0.0))
            ci0 = (b0 - z * se0, b0 + z * se0) if se0 > 0 else None
            ci1 = (b1 - z * se1, b1 + z * se1)
        latent_mean = b0 + b1 * t + X1 @ p.beta
        curve = _latent_to_observed(latent_mean, p.link)
        out.append(ClassSummary(g + 1, float(props[g]), float(b0), ci0, float(b1), ci1, t, curve))
    return out


def _latent_to_observed(lam, link: LinkSpec):
    if link.kind == "identity":
        return np.asarray(lam, float)
    lo = links.transform(link.value_range[0], link)
    hi = links.transform(link.value_range[1], link)
    return links.inverse_transform(np.clip(lam, lo, hi), link)
