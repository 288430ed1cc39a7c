import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsim.sampling import (Scheme, SelectionResult, aggregate, aggregation_coefficients,
                             aggregation_variance_check, sample_with_replacement, sample_without_replacement,
                             select)

weights = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8).map(lambda v: np.array(v) / np.sum(v))


@given(weights, st.integers(1, 6), st.integers(0, 10**6))
def test_scheme_one_coefficients_sum_to_one(p, K, seed):
    sel = sample_with_replacement(p, K, np.random.default_rng(seed))
    coef, prev = aggregation_coefficients(Scheme.SCHEME_I, sel, p)
    assert sum(coef.values()) == pytest.approx(1.0) and prev == 0.0
    assert sum(sel.multiplicity.values()) == K


@given(st.integers(2, 10), st.data())
def test_scheme_two_uniform_weights_is_plain_average(N, data):
    K = data.draw(st.integers(1, N))
    p = np.full(N, 1.0 / N)
    sel = sample_without_replacement(N, K, np.random.default_rng(data.draw(st.integers(0, 999))))
    assert len(set(sel.indices)) == K and list(sel.indices) == sorted(sel.indices)
    coef, _ = aggregation_coefficients(Scheme.SCHEME_II, sel, p)
    assert all(c == pytest.approx(1.0 / K) for c in coef.values())


def test_original_scheme_keeps_unsampled_mass_on_previous_model():
    p = np.array([0.5, 0.3, 0.2])
    sel = SelectionResult(Scheme.ORIGINAL, (0, 2))
    prev = np.array([1.0, 1.0])
    locals_ = {0: np.array([3.0, 1.0]), 2: np.array([1.0, 5.0])}
    out = aggregate(Scheme.ORIGINAL, sel, locals_, prev, p)
    np.testing.assert_allclose(out, prev + 0.5 * (locals_[0] - prev) + 0.2 * (locals_[2] - prev))


def test_full_participation_is_weighted_average():
    p = np.array([0.25, 0.75])
    sel = select(Scheme.FULL, p, 2, None)
    out = aggregate(Scheme.FULL, sel, {0: np.ones(2), 1: np.zeros(2)}, np.zeros(2), p)
    np.testing.assert_allclose(out, [0.25, 0.25])


@given(st.permutations(range(6)), st.integers(0, 10**6))
def test_aggregation_ignores_completion_order(order, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(6))
    models = rng.normal(size=(6, 4)) * 1e3
    sel = select(Scheme.FULL, p, 6, None)
    forward = aggregate(Scheme.FULL, sel, {k: models[k] for k in range(6)}, np.zeros(4), p)
    shuffled = aggregate(Scheme.FULL, sel, {k: models[k] for k in order}, np.zeros(4), p)
    assert forward.tobytes() == shuffled.tobytes()


def test_mismatched_selection_rejected():
    p = np.full(3, 1 / 3)
    sel = select(Scheme.SCHEME_I, p, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        aggregation_coefficients(Scheme.SCHEME_II, sel, p)


def test_bad_arguments():
    with pytest.raises(ValueError):
        sample_without_replacement(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        select(Scheme.SCHEME_I, [0.5, 0.6], 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        aggregation_variance_check(Scheme.SCHEME_I, np.zeros((2, 1)), [0.5, 0.5], 1, 100, np.random.default_rng(0))


def _mc_mean(scheme, V, p, K, trials, rng):
    acc = np.zeros((trials, V.shape[1]))
    for t in range(trials):
        sel = select(scheme, p, K, rng)
        acc[t] = aggregate(scheme, sel, {k: V[k] for k in sel.distinct}, np.zeros(V.shape[1]), p)
    return acc


@pytest.mark.parametrize("scheme", [Scheme.SCHEME_I, Scheme.SCHEME_II])
def test_unbiased_in_expectation(scheme):
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.ones(6))
    V = rng.normal(size=(6, 3))
    draws = _mc_mean(scheme, V, p, 3, 20000, rng)
    err = draws.mean(axis=0) - p @ V
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(err) <= 4 * se)


@pytest.mark.parametrize("scheme", [Scheme.SCHEME_I, Scheme.SCHEME_II])
def test_variance_identity(scheme):
    rng = np.random.default_rng(11)
    p = rng.dirichlet(np.ones(7))
    V = rng.normal(size=(7, 4))
    chk = aggregation_variance_check(scheme, V, p, 3, 40000, rng)
    assert abs(chk.empirical - chk.closed_form) <= 4 * chk.stderr


def test_variance_vanishes_when_everyone_is_sampled():
    rng = np.random.default_rng(0)
    p = np.full(5, 0.2)
    chk = aggregation_variance_check(Scheme.SCHEME_II, rng.normal(size=(5, 2)), p, 5, 10000, rng)
    assert chk.closed_form == 0.0 and chk.empirical == pytest.approx(0.0, abs=1e-20)
