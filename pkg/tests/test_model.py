import itertools

import numpy as np
import pytest

from cmrbound.dgp import dgp_c, random_design
from cmrbound.errors import ContractViolation
from cmrbound.missing_data import build_observational_model
from cmrbound.model import (MomentModel, block_conditional_jacobian, build_block, check_assumptions,
                            linear_block, marginal_jacobian, moment_tables, quantile_block, separable_block,
                            stack_moments)
from cmrbound.probability import DiscreteLaw


def test_stack_moments_examples(exp_a, exp_c):
    z = np.array([0.0, 1.0, 1.0, -1.0])
    assert np.array_equal(stack_moments(exp_a.model, z, [0.0]), [1.0, -1.0])
    assert np.array_equal(stack_moments(exp_a.model, z, [1.0]), [0.0, -2.0])
    # delta = 0: the residual block vanishes and the selection block is 0/pi - 1
    z = exp_c.law.support[exp_c.law.support[:, 4] == 0][0]
    assert np.array_equal(stack_moments(exp_c.model, z, [1.0]), [0.0, -1.0])


def test_stacked_mean_zero_at_truth(exp_a, exp_b, exp_c, exp_q):
    for ex in (exp_a, exp_b, exp_c, exp_q):
        g = stack_moments(ex.model, ex.law.support, ex.theta0)
        assert np.abs(ex.law.probs @ g).max() <= 1e-12


def test_restriction_checked_at_construction(exp_a):
    with pytest.raises(ContractViolation):
        MomentModel(exp_a.model.blocks, 1, 4, np.array([0.3]), "analytic", exp_a.law)


def test_quantile_block_forbids_analytic_mode():
    with pytest.raises(ContractViolation):
        MomentModel((quantile_block(2, ["1"], (0,)),), 1, 4, np.array([0.0]), "analytic")


def test_evaluator_failure_names_block(exp_a):
    def bad(Z, theta):
        raise KeyError("boom")

    from cmrbound.model import MomentBlock, block_values
    m = MomentModel((MomentBlock(1, (0,), bad),), 1, 4, None, "fd")
    with pytest.raises(RuntimeError, match="block 0"):
        block_values(m, 0, exp_a.law.support, [0.0])


def test_linear_jacobian(exp_a):
    tab = block_conditional_jacobian(exp_a.model, exp_a.law, 0)
    assert tab.values.shape == (2, 1, 1)
    assert np.all(tab.values == -1.0)


def brute_force_cond_mean(law, block, cond_vars, theta):
    """Loop-based E[g | cell], independent of Partition."""
    out = {}
    for z, p in zip(law.support, law.probs):
        key = tuple(z[list(cond_vars)])
        s, w = out.get(key, (0.0, 0.0))
        out[key] = (s + p * block(z[None, :], theta)[0, 0], w + p)
    return {k: s / w for k, (s, w) in out.items()}


def test_quantile_jacobian_matches_brute_force(exp_q):
    law, m = exp_q.law, exp_q.model
    h = 1e-4
    for j, cv in ((0, (0,)), (1, (1,))):
        tab = block_conditional_jacobian(m, law, j)
        hi = brute_force_cond_mean(law, m.blocks[j], cv, np.array([h]))
        lo = brute_force_cond_mean(law, m.blocks[j], cv, np.array([-h]))
        for key, v in tab.items():
            assert v[0, 0] == pytest.approx((hi[key] - lo[key]) / (2 * h), abs=1e-6)
            # density of the middle atom under unit-width bins
            assert v[0, 0] == pytest.approx(-0.5, abs=1e-6)


def test_empty_conditioning_gives_marginal(exp_a):
    b = linear_block(2, ["1"], ())
    m = MomentModel((b,), 1, 4, np.array([0.0]), "analytic", exp_a.law)
    tab = block_conditional_jacobian(m, exp_a.law, 0)
    assert tab.values.shape == (1, 1, 1)
    assert np.allclose(tab.values[0], marginal_jacobian(exp_a.model, exp_a.law, 0))


def test_marginal_equals_weighted_cells(exp_b):
    for j in range(2):
        block_conditional_jacobian(exp_b.model, exp_b.law, j)  # must not raise
        direct = np.tensordot(exp_b.law.probs, exp_b.model.blocks[j].jacobian(exp_b.law.support, exp_b.theta0), 1)
        assert np.allclose(marginal_jacobian(exp_b.model, exp_b.law, j), direct, atol=1e-15)


def _assert_modes_agree(model, law, theta):
    a = moment_tables(model.with_mode("analytic"), law, theta)
    f = moment_tables(model.with_mode("fd"), law, theta)
    for ba, bf in zip(a.blocks, f.blocks):
        assert np.abs(ba.jac - bf.jac).max() <= 1e-6


@pytest.mark.parametrize("link", ["identity", "exp", "logistic", "square"])
def test_analytic_and_fd_agree_separable(link):
    law = random_design(5, d=2).law
    blocks = (separable_block(2, ["1", 0], (0,), link), separable_block(3, ["1", 1], (1,), link))
    model = MomentModel(blocks, 2, 4, None, "analytic")
    _assert_modes_agree(model, law, np.array([0.3, -0.2]))


def test_analytic_and_fd_agree_linear():
    ex = random_design(9, d=2)
    _assert_modes_agree(ex.model, ex.law, ex.theta0 + 0.1)


def test_analytic_and_fd_agree_missing_blocks():
    ex = dgp_c(selection="logistic")
    for parametric in (False, True):
        m = build_observational_model(ex.spec, parametric=parametric)
        _assert_modes_agree(m, ex.law, m.theta0 + 0.05)


def test_build_block_registry():
    with pytest.raises(ContractViolation):
        build_block("nosuch")
    with pytest.raises(ContractViolation):
        linear_block(0, ["x"])
    assert build_block("linear", y=0, regressors=["1"]).family == "linear"


def test_diagnostics_dgp_a(exp_a):
    rep = check_assumptions(exp_a.model, exp_a.law)
    assert rep.passed
    for b in rep.blocks:
        assert b.var_sup_norm == pytest.approx(1.0)
        assert b.singular_cells == []
    assert rep.beta is None


def test_diagnostics_flags_singular_cell():
    pts, probs = [], []
    for x2, e1, e2 in itertools.product((0, 1), (-1, 1), (-1, 1)):
        pts.append((x2, e1, e2 if x2 == 1 else 0.0))
        probs.append(1 / 8)
    # remove duplicate points created by zeroing e2
    law_pts, idx = np.unique(np.array(pts), axis=0, return_index=True)
    law = DiscreteLaw(law_pts, np.bincount(np.unique(np.array(pts), axis=0, return_inverse=True)[1].ravel(),
                                           weights=probs))
    m = MomentModel((linear_block(1, ["1"], (0,)), linear_block(2, ["1"], (0,))), 1, 3, np.array([0.0]),
                    "analytic", law)
    rep = check_assumptions(m, law)
    assert rep.blocks[1].singular_cells == [[0.0]]
    assert not rep.passed


def test_diagnostics_missing_data(exp_c):
    rep = check_assumptions(exp_c.model, exp_c.law)
    assert rep.beta == pytest.approx(0.5)
    assert rep.weights_bounded
