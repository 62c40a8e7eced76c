"""Command-line pipeline: simulate, fit, select, validate, characterize, survival, report.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
Every command writes ``manifest.json`` into its output directory, including
on failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .characterization import characterize
from .cohort import DataValidationError, load_cohort
from .estimator import (
    FitError,
    MembershipTable,
    VersionMismatch,
    class_trajectory_summary,
    fit,
    load_fit,
    posterior_memberships,
    save_fit,
)
from .gee import GeeError
from .likelihood import NumericalError
from .links import LinkDomainError
from .model import ModelSpec, SpecError
from .robustness import subsample_stability, truncation_stability
from .selection import select_classes, entropy
from .survival import kaplan_meier, logrank_test, write_survival_csv
from .synthetic import ConfigError, GeneratorConfig, generate, read_config, write_cohort, write_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CLASS_NAMES = {4: ("Improvers", "Stables", "Slow progressors", "Fast progressors")}


class UsageError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Reproducibility record written next to a command's outputs."""

    def __init__(self, command, args, out_dir):
        self.out_dir = Path(out_dir)
        self.data = {
            "command": command,
            "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "started": _now(),
            "inputs": {},
            "outputs": {},
            "status": "running",
        }

    def add_input(self, path):
        path = Path(path)
        if path.is_file():
            self.data["inputs"][str(path)] = sha256(path)

    def finish(self, outputs, error=None):
        for p in outputs:
            p = Path(p)
            if p.is_file():
                self.data["outputs"][p.name] = sha256(p)
        self.data["finished"] = _now()
        self.data["status"] = "ok" if error is None else "error"
        if error is not None:
            self.data["error"] = error
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")


def _data_paths(args):
    if args.data:
        d = Path(args.data)
        traj = Path(args.trajectories) if args.trajectories else d / "trajectories.csv"
        cov = Path(args.covariates) if args.covariates else d / "covariates.csv"
        ev = Path(args.events) if args.events else d / "events.csv"
    else:
        if not args.trajectories:
            raise UsageError("give --data DIR or --trajectories FILE")
        traj = Path(args.trajectories)
        cov = Path(args.covariates) if args.covariates else None
        ev = Path(args.events) if args.events else None
    if not traj.is_file():
        raise UsageError(f"trajectory file not found: {traj}")
    cov = cov if cov is not None and cov.is_file() else None
    ev = ev if ev is not None and ev.is_file() else None
    return traj, cov, ev


def _load(args, manifest):
    traj, cov, ev = _data_paths(args)
    for p in (traj, cov, ev):
        if p is not None:
            manifest.add_input(p)
    cohort, events = load_cohort(traj, cov, ev)
    if cohort.exclusions:
        logging.getLogger(__name__).warning("%d eyes excluded during loading", len(cohort.exclusions))
    return cohort, events


def _load_fit(args, manifest):
    path = Path(args.fit)
    if not path.is_file():
        raise UsageError(f"fit file not found: {path}")
    manifest.add_input(path)
    return load_fit(path)


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _spec_from_args(args) -> ModelSpec:
    spec = ModelSpec(n_classes=args.classes, link=args.link)
    return spec.with_optimizer(n_starts=args.starts, seed=args.seed)


def write_memberships(mem: MembershipTable, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eye_id", "map_class", "max_posterior", *[f"tau_{g}" for g in range(1, mem.n_classes + 1)]])
        for e, k, m, row in zip(mem.eye_ids, mem.map_class, mem.max_posterior, mem.tau):
            w.writerow([e, int(k), repr(float(m)), *[repr(float(x)) for x in row]])


def read_memberships(path) -> MembershipTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = [r[0] for r in rows[1:]]
    tau = np.array([[float(x) for x in r[3:]] for r in rows[1:]])
    return MembershipTable(ids, tau, np.array([int(r[1]) for r in rows[1:]]), np.array([float(r[2]) for r in rows[1:]]))


# ---------------------------------------------------------------- commands


def cmd_simulate(args, manifest):
    out = Path(args.out)
    if args.config:
        manifest.add_input(args.config)
        config = read_config(args.config)
    else:
        config = GeneratorConfig()
    overrides = {"seed": args.seed}
    if args.n_eyes:
        overrides["n_eyes"] = args.n_eyes
    config = replace(config, **overrides)
    config.validate()
    sim = generate(config)
    paths = write_cohort(sim, out)
    write_config(config, out / "config.ini")
    return [*paths.values(), out / "config.ini"]


def cmd_fit(args, manifest):
    out = Path(args.out)
    cohort, _ = _load(args, manifest)
    result = fit(cohort, _spec_from_args(args), n_jobs=_threads(args))
    out.mkdir(parents=True, exist_ok=True)
    save_fit(result, out / "fit.json")
    write_memberships(posterior_memberships(cohort, result), out / "memberships.csv")
    return [out / "fit.json", out / "memberships.csv"]


def _parse_range(text):
    text = text.strip()
    if "-" in text or ".." in text:
        lo, hi = text.replace("..", "-").split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def cmd_select(args, manifest):
    out = Path(args.out)
    cohort, _ = _load(args, manifest)
    try:
        G_range = _parse_range(args.g_range)
    except ValueError:
        raise UsageError(f"bad --g-range {args.g_range!r}") from None
    base = ModelSpec(link=args.link).with_optimizer(n_starts=args.starts, seed=args.seed)
    report = select_classes(cohort, base, G_range, n_jobs=_threads(args))
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "selection.csv")
    with open(out / "selection_summary.txt", "w", encoding="utf-8") as fh:
        fh.write(f"selected_G = {report.selected_G}\nrule = {report.selection_rule}\n")
    return [out / "selection.csv", out / "selection_summary.txt"]


def _floats(text, what):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad {what} list {text!r}") from None


def cmd_validate(args, manifest):
    out = Path(args.out)
    cohort, _ = _load(args, manifest)
    ref = _load_fit(args, manifest)
    if args.mode == "subsample":
        report = subsample_stability(cohort, ref.spec, ref, _floats(args.fractions, "--fractions"),
                                     args.trials, args.seed, args.refit_starts, _threads(args))
    else:
        drops = [int(x) for x in _floats(args.drop, "--drop")]
        report = truncation_stability(cohort, ref.spec, ref, drops, args.seed, args.refit_starts, _threads(args))
    out.mkdir(parents=True, exist_ok=True)
    trials, agg = out / f"stability_{args.mode}_trials.csv", out / f"stability_{args.mode}.csv"
    report.write_trials(trials)
    report.write_aggregates(agg)
    return [trials, agg]


def cmd_characterize(args, manifest):
    out = Path(args.out)
    cohort, events = _load(args, manifest)
    ref = _load_fit(args, manifest)
    mem = posterior_memberships(cohort, ref)
    variables = [v for v in args.variables.split(",") if v] if args.variables else None
    report = characterize(mem, cohort, variables, events or None, n_jobs=_threads(args))
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "characterization.csv")
    report.write_chord_csv(out / "chord.csv")
    outputs = [out / "characterization.csv", out / "chord.csv"]
    with open(out / "excluded_variables.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{v}\n" for v in report.excluded)
    outputs.append(out / "excluded_variables.txt")
    if report.survival is not None:
        write_survival_csv(report.survival, out / "survival.csv")
        outputs.append(out / "survival.csv")
    return outputs


def cmd_survival(args, manifest):
    out = Path(args.out)
    cohort, events = _load(args, manifest)
    if not events:
        raise UsageError("survival needs an events file")
    ref = _load_fit(args, manifest)
    mem = posterior_memberships(cohort, ref)
    curves = kaplan_meier(mem, events)
    out.mkdir(parents=True, exist_ok=True)
    write_survival_csv(curves, out / "survival.csv")
    outputs = [out / "survival.csv"]
    try:
        stat, df, p = logrank_test(mem, events)
        with open(out / "logrank.txt", "w", encoding="utf-8") as fh:
            fh.write(f"chi2 = {stat!r}\ndf = {df}\np = {p!r}\n")
        outputs.append(out / "logrank.txt")
    except (ValueError, np.linalg.LinAlgError):
        pass
    return outputs


def _fmt_ci(x, ci, digits):
    s = f"{x:.{digits}f}"
    return s + (f" ({ci[0]:.{digits}f}, {ci[1]:.{digits}f})" if ci else " (n/a)")


def cmd_report(args, manifest):
    run = Path(args.run)
    out = Path(args.out)
    fit_path = Path(args.fit) if args.fit else run / "fit.json"
    if not fit_path.is_file():
        raise UsageError(f"fit file not found: {fit_path}")
    manifest.add_input(fit_path)
    result = load_fit(fit_path)
    G = result.spec.n_classes
    summaries = class_trajectory_summary(result, n_points=args.points)
    mem_path = Path(args.memberships) if args.memberships else run / "memberships.csv"
    mem = None
    if mem_path.is_file():
        manifest.add_input(mem_path)
        mem = read_memberships(mem_path)
    names = CLASS_NAMES.get(G, tuple(f"Class {g}" for g in range(1, G + 1)))
    lines = [
        f"classes: {G}",
        f"link: {result.spec.link}",
        f"log-likelihood: {result.loglik:.4f}",
        f"free parameters: {result.n_params}",
        f"eyes: {result.n_eyes}",
        f"converged: {'yes' if result.converged else 'no'} (iterations {result.iterations}, "
        f"gradient norm {result.grad_norm:.2e})",
        "",
        f"{'Cluster':<8}{'Label':<18}{'n (%)':<16}{'Intercept (CI)':<26}{'Slope (CI)':<28}{'Mean posterior':>14}",
    ]
    for s in summaries:
        if mem is not None:
            sel = mem.map_class == s.cls
            n = int(sel.sum())
            size = f"{n} ({100.0 * n / len(mem.eye_ids):.0f}%)"
            post = f"{mem.max_posterior[sel].mean():.3f}" if n else "n/a"
        else:
            size, post = f"({100.0 * s.proportion:.0f}%)", "n/a"
        lines.append(f"{s.cls:<8}{names[s.cls - 1]:<18}{size:<16}{_fmt_ci(s.intercept, s.intercept_ci, 2):<26}"
                     f"{_fmt_ci(s.slope, s.slope_ci, 3):<28}{post:>14}")
    if mem is not None and G > 1:
        lines += ["", f"membership entropy: {entropy(mem.tau):.4f}"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(out / "trajectory_plot.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "time", "value"])
        for s in summaries:
            for t, y in zip(s.times, s.mean_curve):
                w.writerow([s.cls, repr(float(t)), repr(float(y))])
    outputs = [out / "summary.txt", out / "trajectory_plot.csv"]
    surv = Path(args.survival) if args.survival else run / "survival.csv"
    if surv.is_file():
        manifest.add_input(surv)
        with open(surv, newline="", encoding="utf-8") as src, \
                open(out / "km_plot.csv", "w", newline="", encoding="utf-8") as dst:
            w = csv.writer(dst, lineterminator="\n")
            w.writerow(["cluster", "time", "survival"])
            for row in list(csv.DictReader(src)):
                w.writerow([row["cluster"], row["time"], row["survival"]])
        outputs.append(out / "km_plot.csv")
    return outputs


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcmm-subtypes", description="Latent-class trajectory subtyping pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None, help="worker cap (default: all CPUs)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def data(sp):
        sp.add_argument("--data", help="directory holding trajectories.csv, covariates.csv, events.csv")
        sp.add_argument("--trajectories")
        sp.add_argument("--covariates")
        sp.add_argument("--events")

    sp = sub.add_parser("simulate", help="generate a synthetic cohort")
    common(sp)
    sp.add_argument("--config", help="INI generator config")
    sp.add_argument("--n-eyes", type=int, default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a G-class model")
    common(sp)
    data(sp)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--link", choices=("identity", "beta"), default="identity")
    sp.add_argument("--starts", type=int, default=20)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("select", help="choose G by minimum ICL")
    common(sp)
    data(sp)
    sp.add_argument("--g-range", default="1-6")
    sp.add_argument("--link", choices=("identity", "beta"), default="identity")
    sp.add_argument("--starts", type=int, default=20)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("validate", help="membership stability")
    common(sp)
    data(sp)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--mode", choices=("subsample", "truncate"), default="subsample")
    sp.add_argument("--fractions", default="0.9,0.8,0.7,0.6,0.5,0.4")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--drop", default="1,2,3")
    sp.add_argument("--refit-starts", type=int, default=5)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("characterize", help="cluster comparisons and odds ratios")
    common(sp)
    data(sp)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--variables", help="comma-separated covariates (default: all)")
    sp.set_defaults(func=cmd_characterize)

    sp = sub.add_parser("survival", help="Kaplan-Meier curves per cluster")
    common(sp)
    data(sp)
    sp.add_argument("--fit", required=True)
    sp.set_defaults(func=cmd_survival)

    sp = sub.add_parser("report", help="summary table and plot data")
    common(sp)
    sp.add_argument("--run", required=True, help="directory with fit.json and optional memberships/survival CSVs")
    sp.add_argument("--fit", help="fit file (default: RUN/fit.json)")
    sp.add_argument("--memberships", help="memberships CSV (default: RUN/memberships.csv)")
    sp.add_argument("--survival", help="survival CSV (default: RUN/survival.csv)")
    sp.add_argument("--points", type=int, default=50)
    sp.set_defaults(func=cmd_report)
    return p


def _classify(exc):
    if isinstance(exc, (UsageError, VersionMismatch, SpecError, ConfigError, FileNotFoundError)):
        return EXIT_USAGE, "usage"
    if isinstance(exc, (DataValidationError, LinkDomainError)):
        return EXIT_DATA, "data"
    if isinstance(exc, (FitError, NumericalError, GeeError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERIC, "numerical"
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = Manifest(args.command, args, args.out)
    try:
        outputs = args.func(args, manifest)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        kind = _classify(exc)
        if kind is None:
            manifest.finish([], {"kind": "internal", "message": str(exc)})
            raise
        code, name = kind
        msg = " ".join(str(exc).split())
        manifest.finish([], {"kind": name, "message": msg, "exit_code": code})
        print(json.dumps({"error": name, "exit_code": code, "command": args.command, "message": msg}),
              file=sys.stderr)
        return code
    manifest.finish(outputs)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
