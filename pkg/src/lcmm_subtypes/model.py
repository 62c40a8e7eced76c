"""Model specification, parameter containers and the flat parameter layout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .links import LinkSpec

BASIS_FUNCTIONS = {
    "1": lambda t: np.ones_like(t),
    "t": lambda t: t,
    "t2": lambda t: t**2,
    "t3": lambda t: t**3,
}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    max_iter: int = 500
    gtol: float = 1e-5
    n_starts: int = 20
    seed: int = 0
    perturb: float = 0.1

    def to_dict(self):
        return {"max_iter": self.max_iter, "gtol": self.gtol, "n_starts": self.n_starts,
                "seed": self.seed, "perturb": self.perturb}


@dataclass(frozen=True)
class ModelSpec:
    n_classes: int = 4
    common_basis: tuple = ()
    class_basis: tuple = ("1", "t")
    random_basis: tuple = ("1", "t")
    link: str = "identity"
    class_covariates: tuple = ()
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    sigma_floor: float = 1e-4

    def __post_init__(self):
        if self.n_classes < 1:
            raise SpecError("n_classes must be >= 1")
        for name in (*self.common_basis, *self.class_basis, *self.random_basis):
            if name not in BASIS_FUNCTIONS:
                raise SpecError(f"unknown basis function {name!r}; choose from {sorted(BASIS_FUNCTIONS)}")
        if not (self.common_basis or self.class_basis):
            raise SpecError("at least one fixed-effect basis function is required")
        if len(self.random_basis) > len(self.common_basis) + len(self.class_basis):
            raise SpecError("random basis larger than the fixed-effect bases")
        if self.link not in ("identity", "beta"):
            raise SpecError(f"unknown link {self.link!r}")

    @property
    def p1(self) -> int:
        return len(self.common_basis)

    @property
    def p2(self) -> int:
        return len(self.class_basis)

    @property
    def q(self) -> int:
        return len(self.random_basis)

    @property
    def n_membership_covariates(self) -> int:
        return 1 + len(self.class_covariates)

    def n_free_params(self) -> int:
        G = self.n_classes
        n = self.p1 + G * self.p2 + self.q * (self.q + 1) // 2 + (G - 1) * self.n_membership_covariates
        n += 1 if self.link == "identity" else 3
        return n

    def with_classes(self, G: int) -> "ModelSpec":
        return ModelSpec(G, self.common_basis, self.class_basis, self.random_basis, self.link,
                         self.class_covariates, self.optimizer, self.sigma_floor)

    def with_optimizer(self, **kw) -> "ModelSpec":
        opt = OptimizerSettings(**{**self.optimizer.to_dict(), **kw})
        return ModelSpec(self.n_classes, self.common_basis, self.class_basis, self.random_basis, self.link,
                         self.class_covariates, opt, self.sigma_floor)

    def to_dict(self):
        return {
            "n_classes": self.n_classes,
            "common_basis": list(self.common_basis),
            "class_basis": list(self.class_basis),
            "random_basis": list(self.random_basis),
            "link": self.link,
            "class_covariates": list(self.class_covariates),
            "optimizer": self.optimizer.to_dict(),
            "sigma_floor": self.sigma_floor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_classes"], tuple(d["common_basis"]), tuple(d["class_basis"]), tuple(d["random_basis"]),
                   d["link"], tuple(d["class_covariates"]), OptimizerSettings(**d["optimizer"]), d["sigma_floor"])


@dataclass(frozen=True)
class Parameters:
    """Model parameters in their natural form.

    ``xi`` has shape (G-1, 1 + n_class_covariates); the last class is the
    reference with logits fixed at zero.
    """

    beta: np.ndarray
    v: np.ndarray
    chol_B: np.ndarray
    sigma: float
    link: LinkSpec
    xi: np.ndarray

    @property
    def B(self) -> np.ndarray:
        return self.chol_B @ self.chol_B.T

    @property
    def n_classes(self) -> int:
        return self.v.shape[0]

    def class_logits(self, covariates=None) -> np.ndarray:
        """Logits (n, G) of class membership; last column is zero."""
        if covariates is None:
            covariates = np.ones((1, self.xi.shape[1]))
        eta = covariates @ self.xi.T
        return np.hstack([eta, np.zeros((eta.shape[0], 1))])

    @property
    def proportions(self) -> np.ndarray:
        """Class probabilities for the intercept-only membership model."""
        eta = self.class_logits()[0]
        e = np.exp(eta - eta.max())
        return e / e.sum()

    def to_dict(self):
        return {
            "beta": self.beta.tolist(),
            "v": self.v.tolist(),
            "chol_B": self.chol_B.tolist(),
            "sigma": float(self.sigma),
            "link": self.link.to_dict(),
            "xi": self.xi.tolist(),
        }

    @classmethod
    def from_dict(cls, d, spec: ModelSpec):
        G = spec.n_classes
        return cls(
            np.asarray(d["beta"], float).reshape(spec.p1),
            np.asarray(d["v"], float).reshape(G, spec.p2),
            np.asarray(d["chol_B"], float).reshape(spec.q, spec.q),
            float(d["sigma"]),
            LinkSpec.from_dict(d["link"]),
            np.asarray(d["xi"], float).reshape(G - 1, spec.n_membership_covariates),
        )


class Layout:
    """Slices of the flat optimisation vector.

    Order: beta, v (row-major), lower-triangular entries of chol_B, then
    log(sigma) for the identity link or (log a, log b, log delta2) for the beta
    link, then xi (row-major).  Under the beta link delta1 is held at zero in
    this vector; the class intercepts carry the location.
    """

    def __init__(self, spec: ModelSpec):
        G, p1, p2, q = spec.n_classes, spec.p1, spec.p2, spec.q
        self.spec = spec
        self.tril = np.tril_indices(q)
        pos = 0

        def take(n):
            nonlocal pos
            s = slice(pos, pos + n)
            pos += n
            return s

        self.beta = take(p1)
        self.v = take(G * p2)
        self.chol = take(len(self.tril[0]))
        self.scale = take(1 if spec.link == "identity" else 3)
        self.xi = take((G - 1) * spec.n_membership_covariates)
        self.size = pos

    def unpack(self, theta):
        s = self.spec
        beta = theta[self.beta]
        v = theta[self.v].reshape(s.n_classes, s.p2)
        L = np.zeros((s.q, s.q))
        L[self.tril] = theta[self.chol]
        xi = theta[self.xi].reshape(s.n_classes - 1, s.n_membership_covariates)
        return beta, v, L, theta[self.scale], xi

    def to_params(self, theta, value_range) -> Parameters:
        beta, v, L, sc, xi = self.unpack(np.asarray(theta, float))
        if self.spec.link == "identity":
            sigma = float(np.exp(sc[0]))
            link = LinkSpec("identity", value_range=value_range)
        else:
            sigma = 1.0
            link = LinkSpec("beta", float(np.exp(sc[0])), float(np.exp(sc[1])), 0.0, float(np.exp(sc[2])), value_range)
        return Parameters(beta.copy(), v.copy(), L, sigma, link, xi.copy())

    def from_params(self, params: Parameters) -> np.ndarray:
        """Flat vector; under the beta link delta1 is folded into the intercept."""
        s = self.spec
        theta = np.zeros(self.size)
        beta = np.array(params.beta, float)
        v = np.array(params.v, float)
        if s.link == "beta" and params.link.delta1 != 0.0:
            shift = params.link.delta1 / params.link.delta2
            col = intercept_column(s)
            if col is None:
                raise SpecError("beta link with non-zero delta1 needs an intercept basis column")
            where, k = col
            if where == "class":
                v[:, k] += shift
            else:
                beta[k] += shift
        theta[self.beta] = beta
        theta[self.v] = v.ravel()
        theta[self.chol] = params.chol_B[self.tril]
        if s.link == "identity":
            theta[self.scale] = [np.log(params.sigma)]
        else:
            lk = params.link
            theta[self.scale] = [np.log(lk.shape_a), np.log(lk.shape_b), np.log(lk.delta2)]
        theta[self.xi] = np.asarray(params.xi, float).ravel()
        return theta

    def names(self) -> list:
        s = self.spec
        out = [f"beta[{b}]" for b in s.common_basis]
        out += [f"v[{g + 1},{b}]" for g in range(s.n_classes) for b in s.class_basis]
        out += [f"chol_B[{i},{j}]" for i, j in zip(*self.tril)]
        out += ["log_sigma"] if s.link == "identity" else ["log_a", "log_b", "log_delta2"]
        cov = ("intercept", *s.class_covariates)
        out += [f"xi[{g + 1},{c}]" for g in range(s.n_classes - 1) for c in cov]
        return out


def intercept_column(spec: ModelSpec):
    """Where the constant basis function lives: ("class", k), ("common", k) or None."""
    if "1" in spec.class_basis:
        return "class", spec.class_basis.index("1")
    if "1" in spec.common_basis:
        return "common", spec.common_basis.index("1")
    return None


def slope_column(spec: ModelSpec):
    return spec.class_basis.index("t") if "t" in spec.class_basis else None
