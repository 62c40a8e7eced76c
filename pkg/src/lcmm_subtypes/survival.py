"""Kaplan-Meier curves per cluster and a k-sample log-rank test."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .cohort import DataValidationError

SURVIVAL_HEADER = ["cluster", "time", "survival", "n_risk", "n_event", "censored"]


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous step function; row 0 is the baseline at t = 0."""

    cluster: int
    times: np.ndarray
    survival: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray
    n_censored: np.ndarray

    def at(self, t: float) -> float:
        k = np.searchsorted(self.times, t, side="right") - 1
        return float(self.survival[max(k, 0)])

    @property
    def terminal(self) -> float:
        return float(self.survival[-1])


def product_limit(times, flags, cluster=0) -> SurvivalCurve:
    times = np.asarray(times, float)
    flags = np.asarray(flags, int)
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise DataValidationError("event times must be finite and non-negative")
    if len(times) == 0:
        z = np.zeros(1, int)
        return SurvivalCurve(cluster, np.zeros(1), np.ones(1), z, z, z)
    grid, inv = np.unique(times, return_inverse=True)
    n_event = np.bincount(inv, weights=flags == 1, minlength=len(grid)).astype(int)
    n_cens = np.bincount(inv, weights=flags == 0, minlength=len(grid)).astype(int)
    n_risk = len(times) - np.concatenate([[0], np.cumsum(n_event + n_cens)[:-1]])
    surv = np.cumprod((n_risk - n_event) / np.maximum(n_risk, 1))
    return SurvivalCurve(
        cluster,
        np.concatenate([[0.0], grid]),
        np.concatenate([[1.0], surv]),
        np.concatenate([[len(times)], n_risk]).astype(int),
        np.concatenate([[0], n_event]),
        np.concatenate([[0], n_cens]),
    )


def _grouped(memberships, events):
    labels = memberships.label_map()
    missing = [e.eye_id for e in events if e.eye_id not in labels]
    if missing:
        raise DataValidationError(f"event for unknown eye {missing[0]!r}")
    return (np.array([labels[e.eye_id] for e in events], int),
            np.array([e.event_time_years for e in events], float),
            np.array([e.event_flag for e in events], int))


def kaplan_meier(memberships, events) -> list:
    """One product-limit curve per cluster label 1..G (empty clusters get a flat curve)."""
    cl, t, d = _grouped(memberships, events)
    return [product_limit(t[cl == g], d[cl == g], g) for g in range(1, memberships.n_classes + 1)]


def logrank_test(memberships, events):
    """k-sample log-rank chi-square over clusters with at least one eye; returns (stat, df, p)."""
    cl, t, d = _grouped(memberships, events)
    groups = [g for g in range(1, memberships.n_classes + 1) if np.any(cl == g)]
    k = len(groups)
    if k < 2:
        raise ValueError("log-rank test needs at least two non-empty clusters")
    O = np.zeros(k)
    E = np.zeros(k)
    V = np.zeros((k, k))
    for tj in np.unique(t[d == 1]):
        at_risk = np.array([np.sum((cl == g) & (t >= tj)) for g in groups], float)
        dj = np.array([np.sum((cl == g) & (t == tj) & (d == 1)) for g in groups], float)
        n, dt = at_risk.sum(), dj.sum()
        O += dj
        E += dt * at_risk / n
        if n > 1:
            frac = at_risk / n
            V += dt * (n - dt) / (n - 1) * (np.diag(frac) - np.outer(frac, frac))
    diff = (O - E)[:-1]
    stat = float(diff @ np.linalg.solve(V[:-1, :-1], diff))
    return stat, k - 1, float(stats.chi2.sf(stat, k - 1))


def write_survival_csv(curves, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVIVAL_HEADER)
        for c in curves:
            for row in zip(c.times, c.survival, c.n_risk, c.n_event, c.n_censored):
                w.writerow([c.cluster, repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3]), int(row[4])])
