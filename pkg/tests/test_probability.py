
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmrbound.errors import ContractViolation
from cmrbound.probability import (DiscreteLaw, SampleSet, cond_expectation, cond_variance, empirical_law,
                                  sample_from, total_variation, weighted_law)


def random_law(seed, S=12, q=3):
    rng = np.random.default_rng(seed)
    pts = np.unique(rng.integers(0, 3, size=(S * 3, q)), axis=0)[:S]
    return DiscreteLaw(pts, rng.dirichlet(np.ones(len(pts))))


def test_law_validation():
    with pytest.raises(ContractViolation):
        DiscreteLaw([[0.0], [0.0]], [0.5, 0.5])
    with pytest.raises(ContractViolation):
        DiscreteLaw([[0.0], [1.0]], [1.0, 0.0])
    with pytest.raises(ContractViolation):
        DiscreteLaw([[0.0], [1.0]], [0.5, 0.6])


def test_text_round_trip(tmp_path, exp_a):
    p = tmp_path / "a.txt"
    exp_a.law.save(p)
    back = DiscreteLaw.load(p)
    assert back.names == exp_a.law.names
    assert np.array_equal(back.support, exp_a.law.support)
    assert np.array_equal(back.probs, exp_a.law.probs)


def test_cond_expectation_examples(exp_a):
    law = exp_a.law
    assert np.all(cond_expectation(law, lambda Z: np.full(len(Z), 3.0), (0,)).values == 3.0)
    g1g2 = lambda Z: Z[:, 2] * Z[:, 3]
    assert np.all(cond_expectation(law, g1g2, (0, 1)).values == 0.0)
    pt = law.support[5]
    ind = lambda Z: np.all(Z == pt, axis=1).astype(float)
    tab = cond_expectation(law, ind, (0, 1))
    cell = tab.partition.labels[5]
    assert tab.values[cell] == pytest.approx(law.probs[5] / tab.partition.cell_probs[cell], abs=1e-15)


def test_empty_conditioning_is_marginal(exp_a):
    tab = cond_expectation(exp_a.law, lambda Z: Z[:, 2] ** 2, ())
    assert tab.values.shape == (1,)
    assert tab.values[0] == pytest.approx(1.0)


def test_cond_variance_examples(exp_a, exp_c):
    tab = cond_variance(exp_a.law, lambda Z: Z[:, 2], (0,))
    assert np.allclose(tab.values, 1.0, atol=1e-15)
    assert np.all(cond_variance(exp_a.law, lambda Z: np.zeros(len(Z)), (0,)).values == 0)
    # block 2 of the missing-data design: V(delta/pi - 1 | W) = (1 - pi)/pi
    law, spec = exp_c.law, exp_c.spec
    pi = spec.selection.prob(law.support)
    g2 = law.support[:, 4] / pi - 1
    tab = cond_variance(law, g2, spec.selection.w_coords)
    pi_cell = tab.partition.average(pi)
    assert np.allclose(tab.values[:, 0, 0], (1 - pi_cell) / pi_cell, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(), (0,), (1,), (0, 2), (0, 1, 2)]))
def test_iterated_expectations(seed, cv):
    law = random_law(seed)
    f = lambda Z: np.sin(Z[:, 0] + 2 * Z[:, 1]) + Z[:, 2] ** 2
    tab = cond_expectation(law, f, cv)
    lhs = tab.partition.cell_probs @ tab.values
    assert abs(lhs - law.expect(f)) <= 1e-14


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_full_conditioning_returns_f(seed):
    law = random_law(seed)
    f = lambda Z: Z[:, 0] * 3 - Z[:, 1]
    tab = cond_expectation(law, f, (0, 1, 2))
    assert np.allclose(tab.at_points(), f(law.support), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cond_variance_psd(seed):
    law = random_law(seed)
    f = lambda Z: np.column_stack([Z[:, 0], Z[:, 1] * Z[:, 2], Z[:, 2] - Z[:, 0]])
    tab = cond_variance(law, f, (0,))
    for V in tab.values:
        assert np.allclose(V, V.T)
        assert np.linalg.eigvalsh(V)[0] >= -1e-12


def test_sampling_contract(exp_a):
    with pytest.raises(ContractViolation):
        sample_from(exp_a.law, 0, 1)
    a = sample_from(exp_a.law, 50, 42)
    b = sample_from(exp_a.law, 50, 42)
    assert np.array_equal(a.rows, b.rows)


def test_sampling_frequencies(exp_a):
    law = exp_a.law
    n = 100_000
    s = sample_from(law, n, 7)
    freq = np.bincount(s.indices, minlength=law.size) / n
    se = np.sqrt(law.probs * (1 - law.probs) / n)
    assert np.all(np.abs(freq - law.probs) <= 4 * se)


def test_empirical_law_examples():
    one = empirical_law(SampleSet(np.array([[1.0, 2.0]] * 4), 0))
    assert one.size == 1 and one.probs[0] == 1.0
    two = empirical_law(SampleSet(np.array([[0.0], [1.0]]), 0))
    assert np.array_equal(two.probs, [0.5, 0.5])


def test_empirical_law_recovers_law(exp_b):
    s = sample_from(exp_b.law, 1_000_000, 3)
    assert total_variation(empirical_law(s), exp_b.law) <= 0.005


def test_weighted_law_merges_duplicates():
    law = weighted_law(np.array([[0.0], [1.0], [0.0]]), np.array([1.0, 2.0, 1.0]))
    assert np.array_equal(law.probs, [0.5, 0.5])
