import numpy as np

from lcmm_subtypes.cohort import EyeSeries, make_cohort


def toy_cohort(n_eyes=30, seed=0, max_visits=8, value_range=None):
    """Small two-class cohort with random visit counts and two eyes per subject."""
    rng = np.random.default_rng(seed)
    eyes = []
    for i in range(n_eyes):
        n = int(rng.integers(5, max_visits + 1))
        t = np.sort(rng.uniform(0, 10, n))
        t -= t[0]
        slope = 0.1 if i % 2 else -0.4
        y = rng.normal(0, 1) + slope * t + rng.normal(0, 0.5, n)
        eyes.append(EyeSeries(f"e{i:03d}", f"s{i // 2:03d}", t, y, {"x": float(rng.normal())}))
    return make_cohort(eyes, {"x": "continuous"}, value_range)


def run_pipeline(root, seed=1, n_eyes=300, starts=2):
    """simulate -> fit -> validate -> characterize -> report in separate stage dirs.

    Returns {stage: output digests from its manifest}.
    """
    import json

    from lcmm_subtypes.cli import main

    d = {s: root / s for s in ("sim", "fit", "val", "char", "rep")}
    steps = [
        ["simulate", "--n-eyes", str(n_eyes), "--seed", str(seed), "--out", str(d["sim"])],
        ["fit", "--data", str(d["sim"]), "--classes", "4", "--starts", str(starts), "--seed", str(seed),
         "--out", str(d["fit"])],
        ["validate", "--data", str(d["sim"]), "--fit", str(d["fit"] / "fit.json"), "--mode", "truncate",
         "--drop", "1,2", "--refit-starts", "1", "--seed", str(seed), "--out", str(d["val"])],
        ["characterize", "--data", str(d["sim"]), "--fit", str(d["fit"] / "fit.json"), "--seed", str(seed),
         "--out", str(d["char"])],
        ["report", "--run", str(d["fit"]), "--survival", str(d["char"] / "survival.csv"), "--out", str(d["rep"])],
    ]
    digests = {}
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise AssertionError(f"{argv[0]} exited {code}")
        out = root / argv[argv.index("--out") + 1]
        digests[argv[0]] = json.loads((out / "manifest.json").read_text())["outputs"]
    return digests
