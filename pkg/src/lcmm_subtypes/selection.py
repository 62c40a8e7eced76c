"""Choosing the number of latent classes by the integrated completed likelihood."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .cohort import Cohort
from .estimator import FitError, FitResult, fit, posterior_memberships
from .model import ModelSpec
from .parallel import parallel_map

log = logging.getLogger(__name__)

SELECTION_RULE = "min-ICL"
SELECTION_HEADER = ["G", "loglik", "n_params", "AIC", "BIC", "entropy", "ICL", "converged"]


def entropy(tau) -> float:
    """-sum tau log tau with 0 log 0 = 0."""
    tau = np.asarray(tau, float)
    pos = tau > 0
    return float(-np.sum(tau[pos] * np.log(tau[pos]))) + 0.0  # no negative zero


def information_criteria(loglik: float, n_params: int, n_units: int, tau):
    """AIC, BIC (N = number of eyes), ICL = BIC + 2 * entropy, and the entropy."""
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * math.log(n_units)
    e = entropy(tau)
    return aic, bic, bic + 2.0 * e, e


def fit_criteria(fit_result: FitResult, memberships):
    return information_criteria(fit_result.loglik, fit_result.n_params, fit_result.n_eyes, memberships.tau)


@dataclass(frozen=True)
class SelectionRow:
    G: int
    loglik: float
    n_params: int
    AIC: float
    BIC: float
    entropy: float
    ICL: float
    converged: bool


@dataclass
class SelectionReport:
    rows: list
    selected_G: int
    selection_rule: str = SELECTION_RULE
    fits: dict | None = None

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SELECTION_HEADER)
            for r in self.rows:
                w.writerow([r.G, repr(r.loglik), r.n_params, repr(r.AIC), repr(r.BIC), repr(r.entropy), repr(r.ICL),
                            int(r.converged)])


def _fit_candidate(args):
    cohort, spec = args
    try:
        f = fit(cohort, spec)
    except FitError as exc:
        return None, str(exc)
    return f, None


def select_classes(cohort: Cohort, base_spec: ModelSpec, G_range=range(1, 7), n_jobs: int = 1,
                   keep_fits: bool = False) -> SelectionReport:
    """Fit every G in ``G_range`` and pick the converged candidate with minimum ICL."""
    Gs = sorted(set(int(g) for g in G_range))
    if not Gs or Gs[0] < 1:
        raise ValueError("G_range must be non-empty with every G >= 1")
    results = parallel_map(_fit_candidate, [(cohort, base_spec.with_classes(G)) for G in Gs], n_jobs)
    rows = []
    fits = {}
    for G, (f, err) in zip(Gs, results):
        if f is None:
            log.warning("G=%d failed: %s", G, err)
            n_params = base_spec.with_classes(G).n_free_params()
            rows.append(SelectionRow(G, math.nan, n_params, math.nan, math.nan, math.nan, math.nan, False))
            continue
        mem = posterior_memberships(cohort, f)
        aic, bic, icl, e = fit_criteria(f, mem)
        rows.append(SelectionRow(G, f.loglik, f.n_params, aic, bic, e, icl, f.converged))
        if keep_fits:
            fits[G] = f
    rows = flag_nonmonotone(rows)
    ok = [r for r in rows if r.converged and np.isfinite(r.ICL)]
    if not ok:
        raise FitError("no candidate class count converged", [r.__dict__ for r in rows])
    selected = min(ok, key=lambda r: (r.ICL, r.G)).G
    return SelectionReport(rows, selected, SELECTION_RULE, fits if keep_fits else None)


def flag_nonmonotone(rows):
    """Mark a candidate non-converged when its log-likelihood falls below a smaller G's."""
    out = []
    best = -math.inf
    for r in rows:
        if r.converged and r.loglik < best - 1e-3 * abs(best):
            log.warning("log-likelihood at G=%d below a smaller G; flagged as a convergence failure", r.G)
            r = replace(r, converged=False)
        if r.converged:
            best = max(best, r.loglik)
        out.append(r)
    return out
