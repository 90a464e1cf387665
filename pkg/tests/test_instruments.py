import numpy as np
import pytest

from cmrbound.errors import ContractViolation
from cmrbound.instruments import (InstrumentFamily, build_family, build_stacked, default_family,
                                  projected_instrument)
from cmrbound.model import stack_moments
from cmrbound.probability import DiscreteLaw


def test_projection_examples(exp_a):
    law, fam = exp_a.law, default_family(exp_a.law)
    assert np.all(projected_instrument(law, fam, 1, (0,)).values == 1.0)
    # indicator of the first support point, given a cell that contains it
    tab = projected_instrument(law, fam, 2, (0, 1, 2))
    first = law.support[np.lexsort(law.support.T[::-1])][0]
    cell = tab.partition.locate(first[None, [0, 1, 2]])[0]
    prob_point = law.probs[np.all(law.support == first, axis=1)][0]
    assert tab.values[cell] == pytest.approx(prob_point / tab.partition.cell_probs[cell])
    y1 = InstrumentFamily((lambda Z: Z[:, 2],))
    assert np.all(projected_instrument(law, y1, 1, (1,)).values == 0.0)
    with pytest.raises(ContractViolation):
        projected_instrument(law, fam, 0, (0,))


def test_default_family_sizes(exp_a):
    law4 = DiscreteLaw([[0.0], [1.0], [2.0], [3.0]], [0.25] * 4)
    assert len(default_family(law4)) == 5
    assert len(default_family(exp_a.law)) == 17


def test_default_family_spans(exp_b):
    law = exp_b.law
    W = default_family(law).values(law.support)
    f = np.sin(law.support @ np.arange(1, 5))
    coef, *_ = np.linalg.lstsq(W, f, rcond=None)
    assert np.abs(W @ coef - f).max() <= 1e-12


def test_stacked_unit_instrument(exp_a):
    st = build_stacked(exp_a.law, exp_a.model, default_family(exp_a.law), 1)
    g = stack_moments(exp_a.model, exp_a.law.support, exp_a.theta0)
    assert np.array_equal(st.apply(g), g)
    assert np.array_equal(st.apply(np.zeros_like(g)), np.zeros_like(g))


def test_stacked_with_x1_indicator(exp_a):
    fam = InstrumentFamily((lambda Z: np.ones(len(Z)), lambda Z: (Z[:, 0] == 1).astype(float)))
    st = build_stacked(exp_a.law, exp_a.model, fam, 2)
    x1 = exp_a.law.support[:, 0]
    assert np.array_equal(st.diag[:, 1, 0], (x1 == 1).astype(float))
    assert np.allclose(st.diag[:, 1, 1], 0.5)
    M = st.matrices()
    assert M.shape == (16, 4, 2)
    assert np.array_equal(M[:, 2, 0], st.diag[:, 1, 0]) and np.all(M[:, 2, 1] == 0)


def test_diagonal_depends_only_on_block_conditioning(exp_b):
    law, model = exp_b.law, exp_b.model
    st = build_stacked(law, model, default_family(law), 10)
    for j, b in enumerate(model.blocks):
        part = law.partition(b.cond_vars)
        vals = st.diag[:, :, j]
        assert np.array_equal(vals, part.expand(part.average(vals)))


def test_full_depth_spans_block_cell_indicators(exp_b):
    law, model = exp_b.law, exp_b.model
    fam = default_family(law)
    st = build_stacked(law, model, fam, len(fam))
    for j, b in enumerate(model.blocks):
        part = law.partition(b.cond_vars)
        A = st.diag[:, :, j]
        for c in range(part.n_cells):
            target = (part.labels == c).astype(float)
            coef, *_ = np.linalg.lstsq(A, target, rcond=None)
            assert np.abs(A @ coef - target).max() <= 1e-10


def test_polynomial_family():
    fam = build_family("polynomial", DiscreteLaw([[0.0, 1.0], [1.0, 2.0]], [0.5, 0.5]), degree=2)
    assert fam.labels == ("1", "z0", "z1", "z0*z0", "z0*z1", "z1*z1")
    v = fam.values(np.array([[2.0, 3.0]]))
    assert np.array_equal(v[0], [1, 2, 3, 4, 6, 9])
    with pytest.raises(ContractViolation):
        build_family("nosuch", DiscreteLaw([[0.0]], [1.0]))
