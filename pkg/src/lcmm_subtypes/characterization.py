"""Baseline differences between clusters and fast-progressor odds ratios."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort
from .gee import GeeBoundaryError, GeeError, GeeResult, gee_fit
from .parallel import parallel_map
from .survival import kaplan_meier, logrank_test

Z95 = 1.959963984540054
MIN_PREVALENCE = 0.01


@dataclass(frozen=True)
class ClusterComparison:
    variable: str
    kind: str
    gee: GeeResult
    wald_stat: float
    df: int
    p_value: float


@dataclass(frozen=True)
class OddsRatioRow:
    variable: str
    odds_ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    contrast: str
    fast_cluster: int
    boundary: bool = False


@dataclass(frozen=True)
class ChordRow:
    cluster: int
    variable: str
    odds_ratio: float


def variable_kind(cohort: Cohort, variable: str) -> str:
    try:
        return cohort.covariate_schema[variable]
    except KeyError:
        raise KeyError(f"covariate {variable!r} not in the cohort schema") from None


def _frame(memberships, cohort: Cohort, variable: str):
    """Aligned cluster labels, covariate values and subject ids (complete cases)."""
    pos = {e: k for k, e in enumerate(memberships.eye_ids)}
    x_all = cohort.covariate(variable)
    idx = [i for i, e in enumerate(cohort.eyes) if e.eye_id in pos and np.isfinite(x_all[i])]
    labels = np.array([memberships.map_class[pos[cohort.eyes[i].eye_id]] for i in idx], int)
    subjects = np.array([cohort.eyes[i].subject_id for i in idx], dtype=object)
    return labels, x_all[idx], subjects


def compare_across_clusters(memberships, cohort: Cohort, variable: str,
                            correlation: str = "exchangeable") -> ClusterComparison:
    """GEE of the variable on cluster indicators; joint Wald test of equality across clusters."""
    kind = variable_kind(cohort, variable)
    labels, x, subjects = _frame(memberships, cohort, variable)
    present = sorted(set(labels.tolist()))
    if len(present) < 2:
        raise GeeError(f"only one cluster present for {variable!r}; no contrast to test")
    dummies = [f"cluster{g}" for g in present[1:]]
    X = np.column_stack([np.ones(len(x))] + [(labels == g).astype(float) for g in present[1:]])
    family = "binomial" if kind == "binary" else "gaussian"
    res = gee_fit(x, X, subjects, family, correlation, names=("intercept", *dummies), outcome=variable)
    stat, df, p = res.wald_test(dummies)
    return ClusterComparison(variable, kind, res, stat, df, p)


def fast_progressor_odds(memberships, cohort: Cohort, variable: str, fast: int | None = None,
                         reference=(1, 2), correlation: str = "exchangeable") -> OddsRatioRow:
    """Odds ratio for membership in the fastest cluster versus the reference clusters.

    Univariable binomial-logit GEE of (cluster == fast) on the variable, on
    eyes from the fast and reference clusters only.
    """
    fast = memberships.n_classes if fast is None else fast
    reference = tuple(g for g in reference if g != fast)
    contrast = f"cluster{fast}-vs-clusters{''.join(map(str, reference))}"
    labels, x, subjects = _frame(memberships, cohort, variable)
    keep = np.isin(labels, (fast, *reference))
    labels, x, subjects = labels[keep], x[keep], subjects[keep]
    y = (labels == fast).astype(float)
    for g in (fast, *reference):
        if not np.any(labels == g):
            raise GeeError(f"cluster {g} is empty; {contrast} odds ratio undefined")
    boundary = OddsRatioRow(variable, math.nan, math.nan, math.nan, math.nan, contrast, fast, True)
    if np.ptp(x) == 0:
        return boundary
    if variable_kind(cohort, variable) == "binary":
        table = [[np.sum((x == a) & (y == b)) for b in (0, 1)] for a in (0, 1)]
        if min(min(r) for r in table) == 0:
            return boundary
    X = np.column_stack([np.ones(len(x)), x])
    try:
        res = gee_fit(y, X, subjects, "binomial", correlation, names=("intercept", variable), outcome=contrast)
    except GeeBoundaryError:
        return boundary
    b, se = float(res.coef[1]), float(res.se[1])
    return OddsRatioRow(variable, math.exp(b), math.exp(b - Z95 * se), math.exp(b + Z95 * se),
                        float(res.p_values[1]), contrast, fast)


def association_chord_table(odds_rows) -> list:
    """Rows with OR > 1, strongest first, for an external chord-diagram renderer."""
    rows = [ChordRow(r.fast_cluster, r.variable, r.odds_ratio) for r in odds_rows
            if not r.boundary and np.isfinite(r.odds_ratio) and r.odds_ratio > 1.0]
    return sorted(rows, key=lambda r: (-r.odds_ratio, r.variable))


def cluster_descriptives(memberships, cohort: Cohort, variable: str):
    """Per cluster: (mean, SD) for continuous variables, (count, percent) for binary ones."""
    kind = variable_kind(cohort, variable)
    labels, x, _ = _frame(memberships, cohort, variable)
    out = []
    for g in range(1, memberships.n_classes + 1):
        xs = x[labels == g]
        if kind == "binary":
            out.append((float(xs.sum()), 100.0 * float(xs.mean()) if len(xs) else math.nan))
        else:
            sd = float(xs.std(ddof=1)) if len(xs) > 1 else (0.0 if len(xs) else math.nan)
            out.append((float(xs.mean()) if len(xs) else math.nan, sd))
    return out


@dataclass(frozen=True)
class VariableSummary:
    variable: str
    kind: str
    descriptives: list
    p_all: float
    odds: OddsRatioRow | None


@dataclass
class CharacterizationReport:
    n_classes: int
    variables: list
    excluded: list = field(default_factory=list)
    survival: list | None = None
    logrank: tuple | None = None

    @property
    def odds_rows(self):
        return [v.odds for v in self.variables if v.odds is not None]

    def chord_table(self):
        return association_chord_table(self.odds_rows)

    def header(self):
        G = self.n_classes
        return ["variable", *[f"c{g}" for g in range(1, G + 1)], "p_all", f"p_{G}_vs_12", "or", "or_low", "or_high"]

    def to_csv(self, path):
        """Two rows per variable: mean and SD (continuous) or percent and count (binary).

        Test columns sit on the first row of each pair.
        """
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for v in self.variables:
                first, second = ("mean", "sd") if v.kind == "continuous" else ("percent", "count")
                a = [d[0] for d in v.descriptives]
                b = [d[1] for d in v.descriptives]
                if v.kind == "binary":
                    a, b = b, a
                o = v.odds
                tests = [v.p_all, o.p_value if o else math.nan, o.odds_ratio if o else math.nan,
                         o.ci_low if o else math.nan, o.ci_high if o else math.nan]
                w.writerow([f"{v.variable}:{first}", *map(_fmt, a), *map(_fmt, tests)])
                w.writerow([f"{v.variable}:{second}", *map(_fmt, b), *([""] * 5)])

    def write_chord_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster", "variable", "or"])
            for r in self.chord_table():
                w.writerow([r.cluster, r.variable, _fmt(r.odds_ratio)])


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _summarize_variable(args):
    memberships, cohort, variable = args
    kind = variable_kind(cohort, variable)
    desc = cluster_descriptives(memberships, cohort, variable)
    try:
        p_all = compare_across_clusters(memberships, cohort, variable).p_value
    except GeeError:
        p_all = math.nan
    odds = None
    if memberships.n_classes >= 2:
        try:
            odds = fast_progressor_odds(memberships, cohort, variable)
        except GeeError:
            odds = None
    return VariableSummary(variable, kind, desc, p_all, odds)


def characterize(memberships, cohort: Cohort, variables=None, events=None, n_jobs: int = 1,
                 min_prevalence: float = MIN_PREVALENCE) -> CharacterizationReport:
    """Per-variable cluster comparisons and odds ratios, plus survival curves when events are given.

    Binary variables whose overall prevalence is below ``min_prevalence`` are skipped.
    """
    variables = list(cohort.covariate_schema) if variables is None else list(variables)
    keep, excluded = [], []
    for v in variables:
        if variable_kind(cohort, v) == "binary":
            x = cohort.covariate(v)
            x = x[np.isfinite(x)]
            if len(x) == 0 or x.mean() < min_prevalence:
                excluded.append(v)
                continue
        keep.append(v)
    rows = parallel_map(_summarize_variable, [(memberships, cohort, v) for v in keep], n_jobs)
    report = CharacterizationReport(memberships.n_classes, rows, excluded)
    if events is not None:
        report.survival = kaplan_meier(memberships, events)
        try:
            report.logrank = logrank_test(memberships, events)
        except (ValueError, np.linalg.LinAlgError):
            report.logrank = None
    return report
