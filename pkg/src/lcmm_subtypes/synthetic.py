"""Synthetic cohorts with known latent classes, covariates and conversion events.

Defaults follow the four-subtype cohort (Improvers, Stables, Slow and Fast
progressors): class sizes 25/54/17/4 %, MD slopes 0.08/-0.06/-0.21/-0.45
dB/year, baseline covariates drawn class-conditionally from the per-cluster
means/SDs and prevalences, and exponential conversion hazards tuned to the
per-cluster conversion fractions 3.9/9.1/23.0/41.4 %.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .cohort import Cohort, EventRecord, EyeSeries, make_cohort


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClassConfig:
    proportion: float
    intercept: float
    slope: float
    hazard: float = 0.0


@dataclass(frozen=True)
class CovariateConfig:
    name: str
    kind: str  # "continuous" | "binary"
    means: tuple = ()
    sds: tuple = ()
    prevalences: tuple = ()


def _conversion_rate(fraction, years=11.59):
    return -math.log(1.0 - fraction) / years


DEFAULT_CLASSES = (
    ClassConfig(0.25, -0.45, 0.08, _conversion_rate(0.039)),
    ClassConfig(0.54, 0.14, -0.06, _conversion_rate(0.091)),
    ClassConfig(0.17, 0.30, -0.21, _conversion_rate(0.230)),
    ClassConfig(0.04, 0.20, -0.45, _conversion_rate(0.414)),
)

DEFAULT_COVARIATES = (
    CovariateConfig("age", "continuous", (51.8, 55.8, 61.3, 63.9), (8.3, 9.2, 8.7, 9.0)),
    CovariateConfig("iop", "continuous", (24.7, 24.8, 25.4, 25.7), (2.8, 2.9, 3.2, 3.3)),
    CovariateConfig("cct", "continuous", (574.3, 574.1, 570.5, 557.5), (37.5, 38.5, 41.2, 38.7)),
    CovariateConfig("psd", "continuous", (2.0, 2.0, 2.0, 2.2), (0.58, 0.48, 0.37, 0.36)),
    CovariateConfig("re", "continuous", (-1.0, -0.68, -0.24, 0.09), (2.3, 2.5, 2.3, 2.0)),
    CovariateConfig("cdr", "continuous", (0.36, 0.36, 0.37, 0.36), (0.19, 0.19, 0.20, 0.19)),
    CovariateConfig("vcdr", "continuous", (0.38, 0.39, 0.39, 0.40), (0.20, 0.20, 0.22, 0.21)),
    CovariateConfig("calcium_channel_blockers", "binary", prevalences=(0.074, 0.128, 0.126, 0.218)),
    CovariateConfig("male", "binary", prevalences=(0.404, 0.421, 0.465, 0.579)),
    CovariateConfig("heart_disease", "binary", prevalences=(0.040, 0.062, 0.075, 0.128)),
    CovariateConfig("diabetes", "binary", prevalences=(0.076, 0.114, 0.170, 0.203)),
    CovariateConfig("other_conditions", "binary", prevalences=(0.252, 0.282, 0.306, 0.394)),
    CovariateConfig("african_american", "binary", prevalences=(0.286, 0.222, 0.232, 0.346)),
    CovariateConfig("stroke", "binary", prevalences=(0.005, 0.012, 0.0056, 0.038)),
    CovariateConfig("migraine", "binary", prevalences=(0.110, 0.120, 0.094, 0.045)),
    CovariateConfig("high_bp", "binary", prevalences=(0.322, 0.387, 0.416, 0.414)),
    CovariateConfig("cancer", "binary", prevalences=(0.039, 0.056, 0.083, 0.068)),
    CovariateConfig("prescribed_tcai", "binary", prevalences=(0.0054, 0.0054, 0.0054, 0.0054)),
)


@dataclass(frozen=True)
class GeneratorConfig:
    n_eyes: int = 3133
    classes: tuple = DEFAULT_CLASSES
    intercept_sd: float = 1.3
    slope_sd: float = 0.015
    re_correlation: float = 0.0
    error_sd: float = 0.5
    visits_per_year: float = 1.84
    follow_up_mean: float = 11.59
    follow_up_sd: float = 3.07
    min_follow_up: float = 2.5
    time_jitter: float = 0.1
    covariates: tuple = DEFAULT_COVARIATES
    covariate_correlation: float = 0.5
    two_eyes_per_subject: bool = True
    re_sharing: float = 0.5
    intercept_scale: str = "db"
    latent_db_range: tuple = (-2.0, 2.0)
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def validate(self):
        if self.n_eyes < 1:
            raise ConfigError("n_eyes must be positive")
        if not self.classes:
            raise ConfigError("at least one class is required")
        props = np.array([c.proportion for c in self.classes])
        if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-12:
            raise ConfigError(f"class proportions must be a simplex, got {props.tolist()}")
        if any(c.hazard < 0 for c in self.classes):
            raise ConfigError("hazards must be non-negative")
        for name in ("intercept_sd", "slope_sd", "error_sd", "follow_up_sd", "time_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not -1 <= self.re_correlation <= 1:
            raise ConfigError("re_correlation must lie in [-1, 1]")
        for w in (self.re_sharing, self.covariate_correlation):
            if not 0 <= w <= 1:
                raise ConfigError("sharing weights must lie in [0, 1]")
        if self.visits_per_year <= 0:
            raise ConfigError("visits_per_year must be positive")
        if self.time_jitter >= 0.5 / self.visits_per_year:
            raise ConfigError("time_jitter too large for the visit spacing")
        if self.intercept_scale not in ("db", "latent"):
            raise ConfigError("intercept_scale must be 'db' or 'latent'")
        G = self.n_classes
        for cov in self.covariates:
            if cov.kind == "continuous":
                if len(cov.means) != G or len(cov.sds) != G:
                    raise ConfigError(f"covariate {cov.name}: expected {G} means and SDs")
                if any(s < 0 for s in cov.sds):
                    raise ConfigError(f"covariate {cov.name}: SDs must be non-negative")
            elif cov.kind == "binary":
                if len(cov.prevalences) != G:
                    raise ConfigError(f"covariate {cov.name}: expected {G} prevalences")
                if any(not 0 <= p <= 1 for p in cov.prevalences):
                    raise ConfigError(f"covariate {cov.name}: prevalences must lie in [0, 1]")
            else:
                raise ConfigError(f"covariate {cov.name}: unknown kind {cov.kind!r}")

    def class_intercepts_db(self) -> np.ndarray:
        b = np.array([c.intercept for c in self.classes], dtype=float)
        if self.intercept_scale == "latent":
            lo, hi = self.latent_db_range
            b = lo + b * (hi - lo)
        return b


def odds_ratio_shift(sd: float, odds_ratio: float) -> float:
    """Mean shift between two equal-variance Gaussian groups giving the per-unit odds ratio.

    For x | group ~ N(mu_k, sd^2) the log-odds of group membership is linear in
    x with slope (mu_1 - mu_0) / sd^2.
    """
    return sd * sd * math.log(odds_ratio)


@dataclass(frozen=True)
class Simulation:
    cohort: Cohort
    events: list
    labels: np.ndarray  # true class (1-based) per cohort eye

    def label_map(self) -> dict:
        return dict(zip(self.cohort.eye_ids, self.labels.tolist()))


def generate(config: GeneratorConfig = GeneratorConfig()) -> Simulation:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, G = config.n_eyes, config.n_classes
    props = np.array([c.proportion for c in config.classes])
    labels = rng.choice(G, size=n, p=props)

    if config.two_eyes_per_subject:
        subject_idx = np.arange(n) // 2
    else:
        subject_idx = np.arange(n)
    n_subjects = int(subject_idx[-1]) + 1

    # random effects: eyes of one subject share a fraction of the draw
    rho = config.re_correlation
    chol_u = np.array([
        [config.intercept_sd, 0.0],
        [rho * config.slope_sd, math.sqrt(1 - rho * rho) * config.slope_sd],
    ])
    z_subj = rng.standard_normal((n_subjects, 2))
    z_own = rng.standard_normal((n, 2))
    w = config.re_sharing
    z = math.sqrt(w) * z_subj[subject_idx] + math.sqrt(1 - w) * z_own
    u = z @ chol_u.T

    follow = config.follow_up_mean + config.follow_up_sd * rng.standard_normal(n)
    follow = np.maximum(follow, config.min_follow_up)
    n_visits = np.maximum(1 + np.rint(follow * config.visits_per_year).astype(int), 5)

    intercepts = config.class_intercepts_db()
    slopes = np.array([c.slope for c in config.classes])
    eye_names = []
    subj_names = []
    series = []
    for i in range(n):
        k = n_visits[i]
        j = np.arange(k)
        jitter = rng.uniform(-config.time_jitter, config.time_jitter, size=k)
        jitter[0] = 0.0
        t = j / config.visits_per_year + jitter
        noise = config.error_sd * rng.standard_normal(k)
        g = labels[i]
        y = intercepts[g] + slopes[g] * t + u[i, 0] + u[i, 1] * t + noise
        s = int(subject_idx[i])
        subj = f"S{s + 1:05d}"
        eye = f"{subj}-{'L' if config.two_eyes_per_subject and i % 2 else 'R'}"
        eye_names.append(eye)
        subj_names.append(subj)
        series.append((t, y))

    covs = _draw_covariates(config, rng, labels, subject_idx, n_subjects)
    schema = {c.name: c.kind for c in config.covariates}
    eyes = [
        EyeSeries(eye_names[i], subj_names[i], series[i][0], series[i][1], {k: v[i] for k, v in covs.items()})
        for i in range(n)
    ]

    hazards = np.array([c.hazard for c in config.classes])[labels]
    e = rng.exponential(size=n)
    with np.errstate(divide="ignore"):
        event_t = np.where(hazards > 0, e / np.where(hazards > 0, hazards, 1.0), np.inf)
    last = np.array([s[0][-1] for s in series])
    events = [
        EventRecord(eye_names[i], float(min(event_t[i], last[i])), int(event_t[i] <= last[i])) for i in range(n)
    ]

    cohort = make_cohort(eyes, schema)
    if len(cohort) != n:
        raise AssertionError("generator produced invalid eyes")
    return Simulation(cohort, events, labels + 1)


def _draw_covariates(config, rng, labels, subject_idx, n_subjects):
    out = {}
    rho = config.covariate_correlation
    for cov in config.covariates:
        z = math.sqrt(rho) * rng.standard_normal(n_subjects)[subject_idx] + math.sqrt(1 - rho) * rng.standard_normal(len(labels))
        if cov.kind == "continuous":
            mu = np.asarray(cov.means, float)[labels]
            sd = np.asarray(cov.sds, float)[labels]
            out[cov.name] = mu + sd * z
        else:
            p = np.asarray(cov.prevalences, float)[labels]
            out[cov.name] = (norm.cdf(z) < p).astype(float)
    return out


# ---------------------------------------------------------------------------
# files


def write_cohort(sim: Simulation, out_dir) -> dict:
    """Write trajectories, covariates, events and true labels as CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = sim.cohort
    paths = {
        "trajectories": out / "trajectories.csv",
        "covariates": out / "covariates.csv",
        "events": out / "events.csv",
        "true_labels": out / "true_labels.csv",
    }
    with open(paths["trajectories"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eye_id", "subject_id", "time_years", "value"])
        for eye in cohort.eyes:
            for t, v in zip(eye.times, eye.values):
                w.writerow([eye.eye_id, eye.subject_id, repr(float(t)), repr(float(v))])
    names = list(cohort.covariate_schema)
    with open(paths["covariates"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eye_id", *names])
        for eye in cohort.eyes:
            row = [eye.eye_id]
            for nm in names:
                val = eye.covariates.get(nm, math.nan)
                if math.isnan(val):
                    row.append("")
                elif cohort.covariate_schema[nm] == "binary":
                    row.append(str(int(val)))
                else:
                    row.append(repr(float(val)))
            w.writerow(row)
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eye_id", "event_time_years", "event_flag"])
        for ev in sim.events:
            w.writerow([ev.eye_id, repr(float(ev.event_time_years)), ev.event_flag])
    with open(paths["true_labels"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eye_id", "class"])
        for eye_id, g in zip(cohort.eye_ids, sim.labels):
            w.writerow([eye_id, int(g)])
    return paths


def read_true_labels(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return {row["eye_id"]: int(row["class"]) for row in reader}


# ---------------------------------------------------------------------------
# key-value config files
#
#   [cohort]            scalar GeneratorConfig fields, one per line
#   [class.1] ...       proportion, intercept, slope, hazard
#   [covariate.age]     kind = continuous, means = a,b,..., sds = ...
#   [covariate.male]    kind = binary, prevalences = ...

_SCALARS = {f.name: f for f in fields(GeneratorConfig) if f.name not in ("classes", "covariates")}


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _parse_scalar(name, text):
    default = getattr(GeneratorConfig(), name)
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return _floats(text)
    return text.strip()


def read_config(path) -> GeneratorConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    kw = {}
    if parser.has_section("cohort"):
        for key, text in parser.items("cohort"):
            if key not in _SCALARS:
                raise ConfigError(f"unknown cohort key {key!r}")
            kw[key] = _parse_scalar(key, text)
    class_sections = sorted(
        (s for s in parser.sections() if s.startswith("class.")), key=lambda s: int(s.split(".", 1)[1])
    )
    if class_sections:
        classes = []
        for s in class_sections:
            sec = parser[s]
            try:
                classes.append(ClassConfig(
                    float(sec["proportion"]), float(sec["intercept"]), float(sec["slope"]), float(sec.get("hazard", 0.0))
                ))
            except KeyError as exc:
                raise ConfigError(f"section [{s}] missing key {exc}") from None
        kw["classes"] = tuple(classes)
    cov_sections = [s for s in parser.sections() if s.startswith("covariate.")]
    if cov_sections:
        covs = []
        for s in cov_sections:
            sec = parser[s]
            name = s.split(".", 1)[1]
            kind = sec.get("kind", "continuous")
            covs.append(CovariateConfig(
                name, kind, _floats(sec.get("means", "")), _floats(sec.get("sds", "")), _floats(sec.get("prevalences", ""))
            ))
        kw["covariates"] = tuple(covs)
    unknown = [s for s in parser.sections() if s != "cohort" and not s.startswith(("class.", "covariate."))]
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    cfg = GeneratorConfig(**kw)
    cfg.validate()
    return cfg


def write_config(config: GeneratorConfig, path):
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(repr(float(x)) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = ["[cohort]"]
    for name in _SCALARS:
        lines.append(f"{name} = {fmt(getattr(config, name))}")
    for k, c in enumerate(config.classes, 1):
        lines += ["", f"[class.{k}]", f"proportion = {c.proportion!r}", f"intercept = {c.intercept!r}",
                  f"slope = {c.slope!r}", f"hazard = {c.hazard!r}"]
    for cov in config.covariates:
        lines += ["", f"[covariate.{cov.name}]", f"kind = {cov.kind}"]
        if cov.kind == "continuous":
            lines += [f"means = {fmt(cov.means)}", f"sds = {fmt(cov.sds)}"]
        else:
            lines.append(f"prevalences = {fmt(cov.prevalences)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
