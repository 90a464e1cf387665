import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmrbound.dgp import dgp_a, dgp_b, duplicated_design, random_design, three_block_design
from cmrbound.efficient_score import (backfit_solve, backfit_step, chamberlain_score, efficient_information,
                                      oracle_projection, rho_projection, normal_equation_residual,
                                      score_distance, sequential_closed_form)
from cmrbound.errors import ContractViolation
from cmrbound.model import MomentBlock, MomentModel, linear_block, moment_tables
from cmrbound.scorefield import ScoreField, l2_norm


def coefs(fld):
    return [c.ravel() for c in fld.coefs]


def test_rho_projection_examples(exp_a):
    f = rho_projection(exp_a.model, exp_a.law, exp_a.theta0, 0)
    assert np.allclose(f.coefs[0], 1.0) and np.all(f.coefs[1] == 0)
    het = dgp_a(hetero=True)
    f = rho_projection(het.model, het.law, het.theta0, 0)
    # cells are ordered X1 = 0, 1
    assert f.coefs[0].ravel() == pytest.approx([1.0, 0.25])


def test_rho_projection_zero_block(exp_a):
    zero = MomentBlock(1, (1,), lambda Z, t: np.zeros(len(Z)), lambda Z, t: np.zeros((len(Z), 1, 1)))
    m = MomentModel((exp_a.model.blocks[0], zero), 1, 4, np.array([0.0]), "analytic", exp_a.law)
    f = rho_projection(m, exp_a.law, [0.0], 1)
    assert np.all(f.coefs[1] == 0) and f.flags["degenerate"]
    assert f.flags["singular_variance_cells"] == [[0.0], [1.0]]


def test_backfit_step_dgp_a(exp_a):
    tables = moment_tables(exp_a.model, exp_a.law)
    f = backfit_step(exp_a.model, exp_a.law, exp_a.theta0, ScoreField.zeros(tables))
    assert np.allclose(f.coefs[0], 1.0) and np.allclose(f.coefs[1], 1.0)


def test_backfit_step_fixed_point(exp_b):
    o = oracle_projection(exp_b.model, exp_b.law, exp_b.theta0)
    f = backfit_step(exp_b.model, exp_b.law, exp_b.theta0, o)
    for a, b in zip(f.coefs, o.coefs):
        assert np.abs(a - b).max() <= 1e-10


def test_backfit_step_collinear_blocks():
    ex = duplicated_design()
    tables = moment_tables(ex.model, ex.law)
    f = backfit_step(ex.model, ex.law, ex.theta0, ScoreField.zeros(tables))
    assert all(np.all(np.isfinite(c)) for c in f.coefs)


def test_backfit_dgp_a(exp_a):
    f, tr = backfit_solve(exp_a.model, exp_a.law, exp_a.theta0)
    assert tr.converged and tr.iterations_used == 2 and tr.norms[1] == 0.0
    assert efficient_information(exp_a.law, exp_a.model, exp_a.theta0, f) == pytest.approx(np.array([[2.0]]))
    tables = moment_tables(exp_a.model, exp_a.law)
    g = exp_a.law.support[:, 2:] - exp_a.theta0
    assert np.allclose(f.score(tables)[:, 0], g.sum(axis=1))


def test_backfit_infinite_tol_one_step(exp_b):
    _, tr = backfit_solve(exp_b.model, exp_b.law, exp_b.theta0, tol=np.inf)
    assert len(tr.iterates) == 1
    with pytest.raises(ContractViolation):
        backfit_solve(exp_b.model, exp_b.law, exp_b.theta0, tol=0.0)


def test_backfit_reports_nonconvergence(exp_b):
    _, tr = backfit_solve(exp_b.model, exp_b.law, exp_b.theta0, max_iter=3)
    assert not tr.converged and tr.iterations_used == 3
    assert len(tr.block_increments) == 3 and len(tr.csv_rows()) == 3


def test_oracle_dgp_a(exp_a):
    o = oracle_projection(exp_a.model, exp_a.law, exp_a.theta0)
    assert np.allclose(o.coefs[0], 1.0, atol=1e-12) and np.allclose(o.coefs[1], 1.0, atol=1e-12)


def test_dgp_b_routes_agree(exp_b):
    m, law, t = exp_b.model, exp_b.law, exp_b.theta0
    tables = moment_tables(m, law, t)
    f, _ = backfit_solve(m, law, t, tables=tables)
    o = oracle_projection(m, law, t, tables)
    s = sequential_closed_form(m, law, t, tables)
    assert score_distance(law, m, t, f, s.field, tables) <= 1e-8
    assert score_distance(law, m, t, o, s.field, tables) <= 1e-8


def test_duplicated_blocks_min_norm(exp_a):
    ex = duplicated_design()
    tables = moment_tables(ex.model, ex.law)
    f, tr = backfit_solve(ex.model, ex.law, ex.theta0, tables=tables)
    o = oracle_projection(ex.model, ex.law, ex.theta0, tables)
    assert score_distance(ex.law, ex.model, ex.theta0, f, o, tables) <= 1e-6
    # minimum norm splits the instrument evenly over the two copies
    assert np.allclose(o.coefs[0], 0.5) and np.allclose(o.coefs[1], 0.5)


def test_three_blocks_cyclic():
    ex = three_block_design()
    tables = moment_tables(ex.model, ex.law)
    f, tr = backfit_solve(ex.model, ex.law, ex.theta0, tables=tables)
    o = oracle_projection(ex.model, ex.law, ex.theta0, tables)
    assert tr.converged and f.flags["experimental_cyclic"]
    assert score_distance(ex.law, ex.model, ex.theta0, f, o, tables) <= 1e-6


def test_sequential_requires_nesting(exp_a):
    with pytest.raises(ContractViolation, match="not nested"):
        sequential_closed_form(exp_a.model, exp_a.law, exp_a.theta0)


def test_sequential_orthogonal_case_reduces_to_rho(exp_a):
    # DGP-A with block 2 given (X1, X2): E(g1 g2 | X) = 0, so g1~ = g1
    m = MomentModel((linear_block(2, ["1"], (0,)), linear_block(3, ["1"], (0, 1))), 1, 4,
                    np.array([0.0]), "analytic", exp_a.law)
    s = sequential_closed_form(m, exp_a.law, [0.0])
    assert np.all(s.projection == 0)
    tables = moment_tables(m, exp_a.law)
    assert np.array_equal(s.g1_tilde, tables.blocks[0].g)
    r1 = rho_projection(m, exp_a.law, [0.0], 0)
    r2 = rho_projection(m, exp_a.law, [0.0], 1)
    assert np.allclose(s.field.coefs[0], r1.coefs[0]) and np.allclose(s.field.coefs[1], r2.coefs[1])


def test_chamberlain_reduction():
    ex = dgp_b(shared_conditioning=True)
    tables = moment_tables(ex.model, ex.law)
    s = sequential_closed_form(ex.model, ex.law, ex.theta0, tables)
    direct = chamberlain_score(ex.model, ex.law, ex.theta0, tables)
    assert l2_norm(ex.law, s.field.score(tables) - direct) <= 1e-10
    f, _ = backfit_solve(ex.model, ex.law, ex.theta0, tables=tables)
    assert l2_norm(ex.law, f.score(tables) - direct) <= 1e-8
    with pytest.raises(ContractViolation):
        chamberlain_score(dgp_b().model, dgp_b().law, [0.0])


def test_zero_field_information(exp_a):
    tables = moment_tables(exp_a.model, exp_a.law)
    assert np.all(efficient_information(exp_a.law, exp_a.model, exp_a.theta0, ScoreField.zeros(tables)) == 0)


def test_field_json_round_trip(exp_b):
    f, _ = backfit_solve(exp_b.model, exp_b.law, exp_b.theta0)
    back = ScoreField.from_dict(f.to_dict())
    for a, b in zip(f.coefs, back.coefs):
        assert np.array_equal(a, b)


def test_field_lookup_fallback(exp_b):
    f, _ = backfit_solve(exp_b.model, exp_b.law, exp_b.theta0)
    c, missed = f.lookup(1, np.array([[0.0, 1.0], [0.0, 1.4], [5.0, 5.0]]))
    assert missed == 2
    assert np.array_equal(c[1], c[0])          # (0, 1.4) is nearest to (0, 1)
    assert np.array_equal(c[2], f.coefs[1][-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_backfit_oracle_and_residual_random(seed, d):
    ex = random_design(seed, d=d)
    tables = moment_tables(ex.model, ex.law)
    # the rate is the squared cosine of the angle between the block spaces,
    # which a random law can push close to one
    f, tr = backfit_solve(ex.model, ex.law, ex.theta0, max_iter=20_000, tables=tables)
    o = oracle_projection(ex.model, ex.law, ex.theta0, tables)
    assert tr.converged
    assert score_distance(ex.law, ex.model, ex.theta0, f, o, tables) <= 1e-6
    assert max(normal_equation_residual(ex.model, ex.law, ex.theta0, f, tables)) <= 10 * tr.tol
    norms = tr.norms
    assert all(b <= a * (1 + 1e-9) + 1e-15 for a, b in zip(norms[1:], norms[2:]))
