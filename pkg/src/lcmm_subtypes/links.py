"""Monotone links between the observed outcome scale and the latent Gaussian scale.

Two links are supported: ``identity`` and ``beta``. The beta link rescales an
observation into the unit interval and pushes it through a Beta CDF, followed by
an affine map ``(I(y~; a, b) - delta1) / delta2``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import betaln, digamma

RESCALE_EPS = 1e-4
DOMAIN_GUARD = 1e-9

_CF_TINY = 1e-300
_CF_EPS = 1e-15
_CF_MAXIT = 2000


class LinkDomainError(ValueError):
    """Raised when a value falls outside the domain or image of a link."""


@dataclass(frozen=True)
class LinkSpec:
    kind: str = "identity"
    shape_a: float = 1.0
    shape_b: float = 1.0
    delta1: float = 0.0
    delta2: float = 1.0
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("identity", "beta"):
            raise ValueError(f"unknown link kind {self.kind!r}")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError(f"value_range must satisfy min < max, got {self.value_range}")
        if self.kind == "beta":
            if not (self.shape_a > 0 and self.shape_b > 0):
                raise ValueError("beta link shapes must be positive")
            if not self.delta2 > 0:
                raise ValueError("beta link scale delta2 must be positive")

    @property
    def span(self) -> float:
        lo, hi = self.value_range
        return hi - lo + 2 * RESCALE_EPS

    def with_params(self, **kw) -> "LinkSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "shape_a": float(self.shape_a),
            "shape_b": float(self.shape_b),
            "delta1": float(self.delta1),
            "delta2": float(self.delta2),
            "value_range": [float(v) for v in self.value_range],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinkSpec":
        return cls(
            kind=d["kind"],
            shape_a=d["shape_a"],
            shape_b=d["shape_b"],
            delta1=d["delta1"],
            delta2=d["delta2"],
            value_range=tuple(d["value_range"]),
        )


# ---------------------------------------------------------------------------
# regularized incomplete beta


def _betacf(a, b, x):
    """Continued fraction for I_x(a, b) (modified Lentz), vectorized."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        h = np.where(active, h * d * c, h)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) >= _CF_EPS
        if not active.any():
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b) for x in [0, 1].

    Uses the continued fraction directly when x < (a+1)/(a+b+2) and the
    symmetry I_x(a, b) = 1 - I_{1-x}(b, a) otherwise.
    """
    a, b, x = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(x, float))
    out = np.empty(x.shape)
    zero = x <= 0.0
    one = x >= 1.0
    out[zero] = 0.0
    out[one] = 1.0
    inner = ~(zero | one)
    if inner.any():
        ai, bi, xi = a[inner], b[inner], x[inner]
        log_front = ai * np.log(xi) + bi * np.log1p(-xi) - betaln(ai, bi)
        front = np.exp(log_front)
        direct = xi < (ai + 1.0) / (ai + bi + 2.0)
        res = np.empty(xi.shape)
        if direct.any():
            res[direct] = front[direct] * _betacf(ai[direct], bi[direct], xi[direct]) / ai[direct]
        flip = ~direct
        if flip.any():
            res[flip] = 1.0 - front[flip] * _betacf(bi[flip], ai[flip], 1.0 - xi[flip]) / bi[flip]
        out[inner] = res
    return out if out.ndim else float(out)


def beta_logpdf(x, a, b):
    x = np.asarray(x, float)
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


# ---------------------------------------------------------------------------
# link operations


def _check_domain(y, link: LinkSpec):
    lo, hi = link.value_range
    bad = (y < lo - DOMAIN_GUARD) | (y > hi + DOMAIN_GUARD) | ~np.isfinite(y)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        val = float(np.atleast_1d(y)[idx])
        raise LinkDomainError(
            f"value {val!r} at position {idx} outside link range [{lo}, {hi}]"
        )


def rescale(y, link: LinkSpec):
    lo, _ = link.value_range
    return (np.asarray(y, float) - lo + RESCALE_EPS) / link.span


def transform(y, link: LinkSpec):
    """Map observed values to the latent scale."""
    y = np.asarray(y, float)
    if link.kind == "identity":
        if not np.all(np.isfinite(y)):
            raise LinkDomainError("non-finite value passed to identity link")
        return y.copy() if y.ndim else float(y)
    _check_domain(y, link)
    u = betainc_reg(link.shape_a, link.shape_b, rescale(y, link))
    return (u - link.delta1) / link.delta2


def log_jacobian(y, link: LinkSpec):
    y = np.asarray(y, float)
    if link.kind == "identity":
        return np.zeros_like(y) if y.ndim else 0.0
    _check_domain(y, link)
    return (
        beta_logpdf(rescale(y, link), link.shape_a, link.shape_b)
        - np.log(link.delta2)
        - np.log(link.span)
    )


def jacobian(y, link: LinkSpec):
    """Derivative of :func:`transform` with respect to ``y`` (always > 0)."""
    return np.exp(log_jacobian(y, link))


def inverse_transform(lam, link: LinkSpec):
    """Inverse of :func:`transform`; the beta case bisects the monotone CDF."""
    lam = np.asarray(lam, float)
    if link.kind == "identity":
        return lam.copy() if lam.ndim else float(lam)
    lo, hi = link.value_range
    x_lo = float(rescale(lo - DOMAIN_GUARD, link))
    x_hi = float(rescale(hi + DOMAIN_GUARD, link))
    a, b = link.shape_a, link.shape_b
    u = link.delta1 + link.delta2 * lam
    u_lo = betainc_reg(a, b, x_lo)
    u_hi = betainc_reg(a, b, x_hi)
    # relative slack absorbs the rounding of (u - delta1) / delta2 on the way in
    slack = 4 * np.finfo(float).eps * max(1.0, abs(link.delta1), link.delta2 * np.max(np.abs(lam), initial=0.0))
    if np.any((u < u_lo - slack) | (u > u_hi + slack)) or not np.all(np.isfinite(u)):
        raise LinkDomainError("latent value outside the image of the beta link")
    u = np.clip(u, u_lo, u_hi)
    left = np.full(u.shape, x_lo)
    right = np.full(u.shape, x_hi)
    for _ in range(200):
        mid = 0.5 * (left + right)
        below = betainc_reg(a, b, mid) < u
        left = np.where(below, mid, left)
        right = np.where(below, right, mid)
        if np.all(right - left <= 4 * np.finfo(float).eps * np.maximum(right, 1e-300)):
            break
    x = 0.5 * (left + right)
    y = x * link.span + lo - RESCALE_EPS
    return y if y.ndim else float(y)


def shape_partials(y, link: LinkSpec, rel_step: float = 1e-5):
    """Partials of the latent value and the log-Jacobian w.r.t. log(a), log(b).

    The CDF partials use a central difference in the shape parameter; the
    log-density partials are closed form.

    Returns ``(dlam_dloga, dlam_dlogb, dlogjac_dloga, dlogjac_dlogb)``.
    """
    x = rescale(y, link)
    a, b, d2 = link.shape_a, link.shape_b, link.delta2
    ha = rel_step * a
    hb = rel_step * b
    dI_da = (betainc_reg(a + ha, b, x) - betainc_reg(a - ha, b, x)) / (2 * ha)
    dI_db = (betainc_reg(a, b + hb, x) - betainc_reg(a, b - hb, x)) / (2 * hb)
    psi_ab = digamma(a + b)
    dlj_da = np.log(x) - digamma(a) + psi_ab
    dlj_db = np.log1p(-x) - digamma(b) + psi_ab
    return a * dI_da / d2, b * dI_db / d2, a * dlj_da, b * dlj_db
