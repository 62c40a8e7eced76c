import math

import numpy as np
import pytest

from lcmm_subtypes import synthetic
from lcmm_subtypes.cohort import (
    MIN_VISITS,
    CohortParseError,
    CohortSchemaError,
    DataValidationError,
    EyeSeries,
    load_cohort,
    make_cohort,
    read_covariates,
    summarize_baseline,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_short_eye_is_excluded(tmp_path):
    traj = write(tmp_path / "t.csv", "eye_id,subject_id,time_years,value\nA,S,0,1.0\nA,S,1,0.5\n")
    cohort, events = load_cohort(traj)
    assert len(cohort) == 0
    assert len(cohort.exclusions) == 1 and "fewer than 5" in cohort.exclusions[0].reason
    assert events == []


def test_non_monotone_times_excluded(tmp_path):
    rows = ["eye_id,subject_id,time_years,value"]
    rows += [f"A,S,{t},{-0.1 * t}" for t in range(6)]
    rows += [f"B,S,{t},0.0" for t in (0, 1, 3, 2, 4, 5)]
    cohort, _ = load_cohort(write(tmp_path / "t.csv", "\n".join(rows) + "\n"))
    assert cohort.eye_ids == ["A"]
    assert cohort.exclusions[0].eye_id == "B"
    assert "increasing" in cohort.exclusions[0].reason


def test_parse_error_carries_line_number(tmp_path):
    traj = write(tmp_path / "t.csv", "eye_id,subject_id,time_years,value\nA,S,0,1.0\nA,S,one,0.5\n")
    with pytest.raises(CohortParseError) as err:
        load_cohort(traj)
    assert err.value.line == 3


def test_duplicate_visit_is_validation_error(tmp_path):
    traj = write(tmp_path / "t.csv", "eye_id,subject_id,time_years,value\nA,S,0,1.0\nA,S,0,0.5\n")
    with pytest.raises(DataValidationError, match="duplicate"):
        load_cohort(traj)


def test_unknown_covariate_is_schema_error(tmp_path):
    cov = write(tmp_path / "c.csv", "eye_id,age,mystery\nA,50,1\n")
    with pytest.raises(CohortSchemaError):
        read_covariates(cov, schema={"age": "continuous"})
    eye = EyeSeries("A", "S", np.arange(5.0), np.zeros(5), {"mystery": 1.0})
    with pytest.raises(CohortSchemaError):
        make_cohort([eye], {"age": "continuous"})


def test_events_after_last_visit_rejected(tmp_path):
    rows = ["eye_id,subject_id,time_years,value"] + [f"A,S,{t},0.0" for t in range(5)]
    traj = write(tmp_path / "t.csv", "\n".join(rows) + "\n")
    ev = write(tmp_path / "e.csv", "eye_id,event_time_years,event_flag\nA,9.0,1\n")
    with pytest.raises(DataValidationError):
        load_cohort(traj, events_file=ev)
    ev = write(tmp_path / "e.csv", "eye_id,event_time_years,event_flag\nA,-1.0,0\n")
    with pytest.raises(DataValidationError):
        load_cohort(traj, events_file=ev)


def test_missing_covariate_cell_is_nan(tmp_path):
    rows = ["eye_id,subject_id,time_years,value"] + [f"{e},S,{t},0.0" for e in "AB" for t in range(5)]
    traj = write(tmp_path / "t.csv", "\n".join(rows) + "\n")
    cov = write(tmp_path / "c.csv", "eye_id,iop,male\nA,24.9,1\nB,,0\n")
    cohort, _ = load_cohort(traj, cov)
    assert cohort.covariate_schema == {"iop": "continuous", "male": "binary"}
    iop = cohort.covariate("iop")
    assert iop[0] == 24.9 and math.isnan(iop[1])


def test_generated_cohort_round_trip(tmp_path):
    sim = synthetic.generate(synthetic.GeneratorConfig(n_eyes=3133, seed=3))
    paths = synthetic.write_cohort(sim, tmp_path)
    cohort, events = load_cohort(paths["trajectories"], paths["covariates"], paths["events"])
    assert len(cohort) == 3133
    assert np.mean([e.n_visits for e in cohort.eyes]) == pytest.approx(22.3, abs=0.7)
    for a, b in zip(sim.cohort.eyes, cohort.eyes):
        assert a.eye_id == b.eye_id
        assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
    assert all(e.n_visits >= MIN_VISITS and np.all(np.diff(e.times) > 0) for e in cohort.eyes)
    again, _ = load_cohort(paths["trajectories"], paths["covariates"], paths["events"])
    assert [e.eye_id for e in again.eyes] == cohort.eye_ids
    assert len(events) == len(sim.events)


def test_summarize_baseline_examples():
    one = EyeSeries("A", "S", np.arange(5.0), np.zeros(5), {"iop": 24.9, "flag": 0.0})
    rows = {r.name: r for r in summarize_baseline(make_cohort([one], {"iop": "continuous", "flag": "binary"}))}
    assert rows["iop"].mean == 24.9 and rows["iop"].sd == 0.0
    assert rows["flag"].count == 0 and rows["flag"].percent == 0.0
    assert rows["flag"].formatted() == "0 (0.0%)"
    with pytest.raises(DataValidationError):
        summarize_baseline(make_cohort([]))


def test_summarize_baseline_recovers_age_moments():
    age = synthetic.CovariateConfig("age", "continuous", (56.0,) * 4, (9.5,) * 4)
    sim = synthetic.generate(synthetic.GeneratorConfig(n_eyes=3133, seed=4, covariates=(age,)))
    row = summarize_baseline(sim.cohort)[0]
    assert abs(row.mean - 56.0) < 0.5
    assert abs(row.sd - 9.5) < 0.5
