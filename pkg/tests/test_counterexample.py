import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsim import counterexample as ce


def test_blocks_sum_to_full_matrix():
    prob = ce.build(5, 4, 0.0)
    np.testing.assert_array_equal(sum(prob.A_parts), prob.A)
    np.testing.assert_array_equal(sum(prob.b_parts), prob.b)


def test_small_instance_by_hand():
    prob = ce.build(2, 1, 0.0)
    expected_first = np.array([[2, -1, 0], [-1, 1, 0], [0, 0, 0]], dtype=float)
    expected_second = np.array([[0, 0, 0], [0, 1, -1], [0, -1, 2]], dtype=float)
    np.testing.assert_array_equal(prob.A_parts[0], expected_first)
    np.testing.assert_array_equal(prob.A_parts[1], expected_second)


@given(st.integers(2, 6), st.integers(1, 5))
def test_parts_are_psd_with_norm_at_most_four(N, p):
    prob = ce.build(N, p, 0.0)
    for Ak in prob.A_parts:
        ev = np.linalg.eigvalsh(Ak)
        assert ev[0] >= -1e-12 and ev[-1] <= 4 + 1e-12


@given(st.integers(2, 6), st.integers(1, 5))
def test_closed_form_optimum_without_ridge(N, p):
    prob = ce.build(N, p, 0.0)
    w = ce.optimum(prob)
    np.testing.assert_allclose(w, np.linalg.solve(prob.A, prob.b), atol=1e-12)


def test_optimum_with_ridge_minimises_global_objective(ridge):
    prob, w_star = ridge
    F = prob.objective()
    assert np.linalg.norm(F.grad(w_star)) < 1e-13
    np.testing.assert_allclose(w_star, F.minimum().w, atol=1e-10)


@pytest.mark.parametrize("E", [1, 2, 5])
def test_round_map_is_the_affine_map(ridge, E):
    prob, _ = ridge
    M, c = ce.round_affine(prob, 0.01, E)
    w = np.random.default_rng(E).normal(size=prob.dim)
    np.testing.assert_allclose(ce.round_map(prob, w, 0.01, E), M @ w + c, atol=1e-14)


def test_fixed_point_is_invariant(ridge):
    prob, _ = ridge
    w = ce.fedavg_fixed_point(prob, 0.05, 4)
    np.testing.assert_allclose(ce.round_map(prob, w, 0.05, 4), w, atol=1e-12)


def test_single_local_step_fixed_point_is_optimum(ridge):
    prob, w_star = ridge
    for eta in (0.05, 1e-3):
        np.testing.assert_allclose(ce.fedavg_fixed_point(prob, eta, 1), w_star, atol=1e-9)


def test_gap_bound_scales_linearly(ridge):
    prob, w_star = ridge
    b1 = ce.gap_lower_bound(prob, 1e-3, 2, w_star)
    assert ce.gap_lower_bound(prob, 1e-3, 5, w_star) == pytest.approx(4 * b1)
    assert ce.gap_lower_bound(prob, 2e-3, 2, w_star) == pytest.approx(2 * b1)
    assert ce.gap_lower_bound(prob, 1e-3, 1, w_star) == 0.0


def test_step_size_range_enforced(ridge):
    prob, _ = ridge
    with pytest.raises(ValueError):
        ce.round_map(prob, np.zeros(prob.dim), ce.max_step_size(prob), 2)
    with pytest.raises(ValueError):
        ce.round_affine(prob, 0.0, 2)
    with pytest.raises(ValueError):
        ce.build(1, 4)


def test_accelerated_and_plain_iteration_agree():
    prob = ce.build(3, 2, 0.05)
    plain = ce.iterate_fixed_point(prob, 0.1, 3, tol=1e-13, accelerate=False)
    fast = ce.iterate_fixed_point(prob, 0.1, 3, tol=1e-13)
    np.testing.assert_allclose(fast.w, plain.w, atol=1e-11)
    np.testing.assert_allclose(fast.w, ce.fedavg_fixed_point(prob, 0.1, 3), atol=1e-11)
    assert fast.last_step <= 1e-13 and plain.last_step <= 1e-13


@pytest.mark.parametrize("eta,E", [(1e-3, 2), (1e-2, 8)])
def test_fixed_point_gap_exceeds_bound(ridge, eta, E):
    prob, w_star = ridge
    w = ce.fedavg_fixed_point(prob, eta, E)
    assert np.linalg.norm(w - w_star) >= ce.gap_lower_bound(prob, eta, E, w_star) > 0
