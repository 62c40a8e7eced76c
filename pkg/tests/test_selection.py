import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcmm_subtypes import synthetic
from lcmm_subtypes.estimator import FitError
from lcmm_subtypes.model import ModelSpec
from lcmm_subtypes.selection import (SelectionRow, entropy, flag_nonmonotone, information_criteria,
                                     select_classes)


def test_one_hot_entropy_is_zero():
    tau = np.eye(3)[[0, 1, 2, 2]]
    aic, bic, icl, e = information_criteria(-100.0, 5, 4, tau)
    assert e == 0.0
    assert icl == bic


def test_two_half_half_eyes():
    tau = np.full((2, 2), 0.5)
    _, bic, icl, e = information_criteria(-10.0, 3, 2, tau)
    assert e == pytest.approx(2 * math.log(2), abs=1e-15)
    assert icl - bic == pytest.approx(2.7725887222397811, abs=1e-12)


def test_single_model_formulas():
    aic, bic, icl, e = information_criteria(-50.0, 4, 10, np.ones((10, 1)))
    assert aic == 108.0
    assert bic == pytest.approx(100.0 + 4 * math.log(10))
    assert icl == bic and e == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_icl_minus_bic_is_twice_entropy(n, G, seed):
    tau = np.random.default_rng(seed).dirichlet(np.ones(G), size=n)
    _, bic, icl, e = information_criteria(-3.0, 2, n, tau)
    assert e >= 0
    assert icl >= bic
    assert icl - bic == pytest.approx(2 * e, rel=1e-12, abs=1e-12)


def _row(G, ll, ok=True):
    return SelectionRow(G, ll, G, 0.0, 0.0, 0.0, 0.0, ok)


def test_nonmonotone_loglik_flagged():
    rows = flag_nonmonotone([_row(1, -1000.0), _row(2, -900.0), _row(3, -950.0), _row(4, -899.5)])
    assert [r.converged for r in rows] == [True, True, False, True]


def test_nonmonotone_within_tolerance_kept():
    rows = flag_nonmonotone([_row(1, -1000.0), _row(2, -1000.5)])
    assert rows[1].converged


def test_single_class_cohort_selects_one(tmp_path):
    cfg = synthetic.GeneratorConfig(n_eyes=200, seed=3, classes=(synthetic.ClassConfig(1.0, 0.1, -0.1),),
                                    covariates=())
    cohort = synthetic.generate(cfg).cohort
    rep = select_classes(cohort, ModelSpec().with_optimizer(n_starts=2, seed=1), range(1, 4))
    assert rep.selected_G == 1
    assert all(r.ICL >= r.BIC for r in rep.rows if r.converged)
    rep.to_csv(tmp_path / "sel.csv")
    lines = (tmp_path / "sel.csv").read_text().splitlines()
    assert lines[0] == "G,loglik,n_params,AIC,BIC,entropy,ICL,converged"
    assert len(lines) == 4


def test_selection_is_deterministic():
    cohort = synthetic.generate(synthetic.GeneratorConfig(n_eyes=120, seed=5)).cohort
    spec = ModelSpec().with_optimizer(n_starts=2, seed=4)
    a = select_classes(cohort, spec, [1, 2])
    b = select_classes(cohort, spec, [1, 2])
    assert a.rows == b.rows and a.selected_G == b.selected_G


def test_bad_range():
    with pytest.raises(ValueError):
        select_classes(None, ModelSpec(), [])
    with pytest.raises(ValueError):
        select_classes(None, ModelSpec(), [0, 1])


def test_no_candidate_converged():
    cohort = synthetic.generate(synthetic.GeneratorConfig(n_eyes=60, seed=1)).cohort
    spec = ModelSpec().with_optimizer(n_starts=1, max_iter=1)
    with pytest.raises(FitError):
        select_classes(cohort, spec, [2])
