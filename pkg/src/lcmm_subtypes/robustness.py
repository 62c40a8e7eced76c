"""Membership stability under eye subsampling and visit truncation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cohort import MIN_VISITS, Cohort
from .estimator import FitError, FitResult, fit, posterior_memberships
from .model import ModelSpec
from .parallel import parallel_map

TRIAL_HEADER = ["protocol", "parameter", "trial", "accuracy", "n_common", "converged"]
AGGREGATE_HEADER = ["protocol", "parameter", "mean_accuracy", "ci_low", "ci_high", "n_trials", "n_failed", "n_excluded_eyes"]


def agreement_matrix(ref, trial, n_classes):
    A = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(A, (np.asarray(trial) - 1, np.asarray(ref) - 1), 1)
    return A  # rows: trial class, columns: reference class


def align_labels(reference_labels: dict, trial_labels: dict, common_eyes=None, n_classes=None):
    """Best one-to-one relabelling of the trial clustering onto the reference.

    Returns ``(permutation, accuracy)`` where ``permutation[k - 1]`` is the
    reference class matched to trial class ``k``.
    """
    if common_eyes is None:
        common_eyes = [e for e in reference_labels if e in trial_labels]
    common_eyes = list(common_eyes)
    if not common_eyes:
        raise ValueError("no eyes in common between the two clusterings")
    ref = np.array([reference_labels[e] for e in common_eyes])
    trial = np.array([trial_labels[e] for e in common_eyes])
    G = n_classes or int(max(ref.max(), trial.max()))
    A = agreement_matrix(ref, trial, G)
    rows, cols = linear_sum_assignment(A, maximize=True)
    perm = np.empty(G, dtype=int)
    perm[rows] = cols + 1
    return perm, float(A[rows, cols].sum()) / len(common_eyes)


@dataclass(frozen=True)
class TrialRecord:
    protocol: str
    parameter: float
    trial: int
    accuracy: float
    n_common: int
    converged: bool
    permutation: tuple = ()
    n_excluded: int = 0


@dataclass(frozen=True)
class AggregateRow:
    protocol: str
    parameter: float
    mean_accuracy: float
    ci_low: float
    ci_high: float
    n_trials: int
    n_failed: int
    n_excluded_eyes: int


@dataclass
class StabilityReport:
    protocol: str
    trials: list
    aggregates: list = field(default_factory=list)

    def aggregate(self, parameter) -> AggregateRow:
        for row in self.aggregates:
            if row.parameter == parameter:
                return row
        raise KeyError(parameter)

    def write_trials(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRIAL_HEADER)
            for t in self.trials:
                w.writerow([t.protocol, _num(t.parameter), t.trial, repr(t.accuracy), t.n_common, int(t.converged)])

    def write_aggregates(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AGGREGATE_HEADER)
            for a in self.aggregates:
                w.writerow([a.protocol, _num(a.parameter), repr(a.mean_accuracy), repr(a.ci_low), repr(a.ci_high),
                            a.n_trials, a.n_failed, a.n_excluded_eyes])


def _num(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _aggregate(protocol, trials):
    out = []
    for param in sorted({t.parameter for t in trials}, key=lambda p: -p if protocol == "subsample" else p):
        group = [t for t in trials if t.parameter == param]
        acc = np.array([t.accuracy for t in group if t.converged])
        failed = sum(not t.converged for t in group)
        excluded = max((t.n_excluded for t in group), default=0)
        if len(acc) == 0:
            out.append(AggregateRow(protocol, param, math.nan, math.nan, math.nan, 0, failed, excluded))
            continue
        mean = float(acc.mean())
        if len(acc) > 1:
            half = 1.959963984540054 * float(acc.std(ddof=1)) / math.sqrt(len(acc))
            lo, hi = max(mean - half, 0.0), min(mean + half, 1.0)
        else:
            lo = hi = mean
        out.append(AggregateRow(protocol, param, mean, lo, hi, len(acc), failed, excluded))
    return out


def _refit_spec(spec: ModelSpec, refit_starts: int, seed: int) -> ModelSpec:
    return spec.with_optimizer(n_starts=refit_starts, seed=seed)


def _run_trial(args):
    protocol, param, trial, sub, spec, reference_fit, ref_labels, n_excluded = args
    try:
        f = fit(sub, spec, warm_start=reference_fit)
    except FitError:
        return TrialRecord(protocol, param, trial, math.nan, len(sub), False, (), n_excluded)
    labels = posterior_memberships(sub, f).label_map()
    perm, acc = align_labels(ref_labels, labels, sub.eye_ids, spec.n_classes)
    return TrialRecord(protocol, param, trial, acc, len(sub), True, tuple(int(p) for p in perm), n_excluded)


def subsample_stability(cohort: Cohort, spec: ModelSpec, reference_fit: FitResult,
                        fractions=(0.9, 0.8, 0.7, 0.6, 0.5, 0.4), trials_per_fraction: int = 20, seed: int = 0,
                        refit_starts: int = 5, n_jobs: int = 1) -> StabilityReport:
    """Refit on random eye subsets and score agreement with the reference memberships.

    Each refit starts from the reference parameters plus ``refit_starts - 1``
    fresh starts.
    """
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    ref_labels = posterior_memberships(cohort, reference_fit).label_map()
    n = len(cohort)
    jobs = []
    for fi, frac in enumerate(fractions):
        for trial in range(trials_per_fraction):
            rng = np.random.default_rng(np.random.SeedSequence([seed, fi, trial]))
            k = max(int(round(frac * n)), spec.n_classes)
            idx = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
            sub = cohort.subset(idx)
            tspec = _refit_spec(spec, refit_starts, int(rng.integers(2**31)))
            jobs.append(("subsample", float(frac), trial, sub, tspec, reference_fit, ref_labels, 0))
    trials = parallel_map(_run_trial, jobs, n_jobs)
    return StabilityReport("subsample", trials, _aggregate("subsample", trials))


def truncated_cohort(cohort: Cohort, drop: int):
    """Cohort with the last ``drop`` visits removed; eyes left with < 5 visits are dropped."""
    eyes = [e.truncated(drop) for e in cohort.eyes if e.n_visits - drop >= MIN_VISITS]
    sub = Cohort(tuple(eyes), cohort.value_range, cohort.covariate_schema)
    return sub, len(cohort) - len(eyes)


def truncation_stability(cohort: Cohort, spec: ModelSpec, reference_fit: FitResult, drops=(1, 2, 3),
                         seed: int = 0, refit_starts: int = 5, n_jobs: int = 1) -> StabilityReport:
    """Refit after dropping the last k visits of every eye and score agreement."""
    ref_labels = posterior_memberships(cohort, reference_fit).label_map()
    jobs = []
    for k in drops:
        if k < 0:
            raise ValueError("drop counts must be non-negative")
        sub, n_excluded = truncated_cohort(cohort, k)
        tspec = _refit_spec(spec, refit_starts, seed)
        jobs.append(("truncate", float(k), 0, sub, tspec, reference_fit, ref_labels, n_excluded))
    trials = parallel_map(_run_trial, jobs, n_jobs)
    return StabilityReport("truncate", trials, _aggregate("truncate", trials))


def relabel_fit(fit_result: FitResult, perm) -> FitResult:
    """Same fit with classes listed in a different order (new class j = old perm[j])."""
    from .estimator import permute_theta
    from .model import Layout, Parameters

    perm = np.asarray(perm, int)
    lay = Layout(fit_result.spec)
    params = fit_result.params
    eta = np.vstack([params.xi, np.zeros((1, params.xi.shape[1]))])[perm]
    new = Parameters(params.beta, params.v[perm], params.chol_B, params.sigma, params.link, eta[:-1] - eta[-1])
    return replace(fit_result, params=new, theta=permute_theta(lay, fit_result.theta, perm),
                   class_order=[fit_result.class_order[k] for k in perm], cov=None)
