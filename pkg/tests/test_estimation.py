import numpy as np
import pytest

from cmrbound.dgp import dgp_a, dgp_c
from cmrbound.errors import ContractViolation
from cmrbound.estimation import (efficient_gmm_solve, estimate, exact_information, monte_carlo,
                                 plug_in_score_field, preliminary_estimator, replication_seeds, score_rows)
from cmrbound.missing_data import build_observational_model
from cmrbound.probability import SampleSet, sample_from
from cmrbound.scorefield import ScoreField


def test_exact_law_recovers_theta0(exp_a, exp_b):
    for ex in (exp_a, exp_b):
        res = estimate(ex.model, ex.law)
        assert np.abs(res.theta_hat - ex.theta0).max() <= 1e-8
        assert np.abs(res.preliminary - ex.theta0).max() <= 1e-8


def test_linear_score_closed_form(exp_a):
    # for blocks linear in theta the score equation has a weighted-mean solution
    s = sample_from(exp_a.law, 500, 3)
    fld = plug_in_score_field(exp_a.model, s, np.array([0.1]))
    res = efficient_gmm_solve(exp_a.model, s, fld, np.array([0.1]))
    c1, _ = fld.lookup(0, s.rows[:, [0]])
    c2, _ = fld.lookup(1, s.rows[:, [1]])
    c1, c2 = c1[:, 0, 0], c2[:, 0, 0]
    closed = (c1 @ s.rows[:, 2] + c2 @ s.rows[:, 3]) / (c1.sum() + c2.sum())
    assert res.theta_hat[0] == pytest.approx(closed, abs=1e-8)


def test_one_sweep_on_dgp_a(exp_a):
    fld = plug_in_score_field(exp_a.model, exp_a.law, exp_a.theta0, m_star=1)
    assert fld.flags["iterations"] == 1
    for c in fld.coefs:
        assert np.allclose(c, 1.0, atol=1e-12)


def test_fallback_counts_unseen_cells(exp_a):
    rows = exp_a.law.support[exp_a.law.support[:, 0] == 0]
    fld = plug_in_score_field(exp_a.model, SampleSet(np.repeat(rows, 3, axis=0), 0), exp_a.theta0)
    _, missed = score_rows(exp_a.model, exp_a.law.support, fld)
    assert missed == int((exp_a.law.support[:, 0] == 1).sum())


def test_zero_field_rejected(exp_a):
    fld = plug_in_score_field(exp_a.model, exp_a.law, exp_a.theta0)
    zero = ScoreField(fld.cond_vars, fld.keys, [np.zeros_like(c) for c in fld.coefs], {})
    with pytest.raises(ContractViolation, match="degenerate"):
        efficient_gmm_solve(exp_a.model, exp_a.law, zero, exp_a.theta0)


def test_small_sample_rejected(exp_a):
    with pytest.raises(ContractViolation):
        preliminary_estimator(exp_a.model, sample_from(exp_a.law, 5, 0))


def test_large_sample_accuracy():
    ex = dgp_a()
    n = 2000
    res = estimate(ex.model, sample_from(ex.law, n, 7))
    assert abs(res.theta_hat[0] - 0.0) <= 4 * np.sqrt(1 / (2 * n))
    assert res.variance_estimate[0, 0] == pytest.approx(1 / (2 * n), rel=0.15)


def test_exact_information_dgp_a(exp_a):
    assert exact_information(exp_a.model, exp_a.law)[0, 0] == pytest.approx(2.0, abs=1e-10)


def test_mc_low_r_warning_and_determinism(exp_a):
    a = monte_carlo(exp_a.model, exp_a.law, 200, 4, 5)
    b = monte_carlo(exp_a.model, exp_a.law, 200, 4, 5, workers=3)
    assert any("low replication" in w for w in a.warnings)
    assert np.array_equal(a.estimates["efficient"], b.estimates["efficient"])
    assert replication_seeds(5, 4) == replication_seeds(5, 4)
    assert not a.invalid


def test_mc_rejects_r_below_two(exp_a):
    with pytest.raises(ContractViolation):
        monte_carlo(exp_a.model, exp_a.law, 100, 1, 0)


def test_missing_data_estimation_dominance():
    ex = dgp_c()
    known = build_observational_model(ex.spec)
    rep = monte_carlo(known, ex.law, 1000, 40, 11, spec=ex.spec)
    assert not rep.invalid
    assert rep.trace_dominance
    eff = rep.estimators["efficient"]
    assert abs(eff.mean[0] - 1.0) <= 4 * np.sqrt(eff.covariance[0, 0] / 40) + 1e-3
