import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcmm_subtypes.cohort import DataValidationError, EventRecord
from lcmm_subtypes.estimator import MembershipTable
from lcmm_subtypes.survival import kaplan_meier, logrank_test, product_limit, write_survival_csv


def test_hand_example():
    c = product_limit([1.0, 2.0, 3.0], [1, 0, 1])
    assert c.at(0.0) == 1.0
    assert c.at(0.999) == 1.0
    assert c.at(1.0) == 2 / 3
    assert c.at(2.5) == 2 / 3
    assert c.at(3.0) == 0.0
    assert c.n_risk.tolist() == [3, 3, 2, 1]
    assert c.n_event.tolist() == [0, 1, 0, 1]
    assert c.n_censored.tolist() == [0, 0, 1, 0]


def test_all_censored_is_flat():
    c = product_limit([1.0, 4.0, 2.0], [0, 0, 0])
    assert np.all(c.survival == 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=60))
def test_no_censoring_is_empirical(ts):
    t = np.array(ts, float) / 2
    c = product_limit(t, np.ones(len(t), int))
    for s in np.unique(np.concatenate([t, t + 0.25, [0.0]])):
        assert abs(c.at(s) - np.mean(t > s)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.booleans()), min_size=1, max_size=50))
def test_step_function_invariants(rows):
    t = np.array([r[0] for r in rows], float)
    d = np.array([int(r[1]) for r in rows])
    c = product_limit(t, d)
    assert c.survival[0] == 1.0 and c.times[0] == 0.0
    assert np.all(np.diff(c.survival) <= 0)
    assert np.all((c.survival >= 0) & (c.survival <= 1))
    assert c.n_risk[0] == len(t)


def test_negative_time_rejected():
    with pytest.raises(DataValidationError):
        product_limit([-1.0, 2.0], [1, 0])


def _setup(seed=0, n=90):
    rng = np.random.default_rng(seed)
    ids = [f"e{i}" for i in range(n)]
    labels = np.arange(n) % 3 + 1
    haz = np.array([0.05, 0.15, 0.5])[labels - 1]
    t = rng.exponential(1 / haz)
    cens = rng.uniform(2, 12, n)
    events = [EventRecord(i, float(min(a, b)), int(a <= b)) for i, a, b in zip(ids, t, cens)]
    return MembershipTable.from_labels(ids, labels, 3), events


def test_at_risk_sums_to_eyes():
    mem, events = _setup()
    curves = kaplan_meier(mem, events)
    assert [c.cluster for c in curves] == [1, 2, 3]
    assert sum(int(c.n_risk[0]) for c in curves) == len(events)
    assert curves[2].at(2.0) < curves[1].at(2.0) < curves[0].at(2.0)


def test_unknown_eye_rejected():
    mem, events = _setup()
    with pytest.raises(DataValidationError):
        kaplan_meier(mem, events + [EventRecord("zz", 1.0, 1)])


def test_against_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    mem, events = _setup(3, 120)
    t = np.array([e.event_time_years for e in events])
    d = np.array([e.event_flag for e in events])
    for c in kaplan_meier(mem, events):
        sel = mem.map_class == c.cluster
        ref = sm.SurvfuncRight(t[sel], d[sel])
        for s, v in zip(ref.surv_times, ref.surv_prob):
            assert c.at(s) == pytest.approx(v, abs=1e-12)
    stat, df, p = logrank_test(mem, events)
    rstat, rp = sm.duration.survdiff(t, d, mem.map_class)
    assert df == 2
    assert stat == pytest.approx(rstat, rel=1e-10)
    assert p == pytest.approx(rp, rel=1e-8)


def test_survival_csv(tmp_path):
    mem, events = _setup()
    write_survival_csv(kaplan_meier(mem, events), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "cluster,time,survival,n_risk,n_event,censored"
    assert lines[1].startswith("1,0.0,1.0,")
