import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wassbound import ApproximationFailedError, InvalidInputError, StepSizeTooLargeError
from wassbound.targets import (
    ar1_covariance,
    ar1_gaussian,
    dm_ula_bias_bound,
    gaussian,
    gaussian_mixture,
    gaussian_w2,
    isotropic_gaussian,
    laplace_approximation,
    load_logistic_csv,
    logistic_posterior,
    matrix_sqrt_sym,
    synthetic_logistic,
    ula_gaussian_limit,
)


def fd_rel_error(target, rng, points=20, scale=1.0):
    """Largest relative error of the analytic gradient against central differences."""
    worst = 0.0
    for _ in range(points):
        x = scale * rng.standard_normal(target.dimension)
        h = 1e-5 * (1 + np.linalg.norm(x))
        g = target.grad_log_density(x)
        fd = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            fd[i] = (target.log_density(x + e) - target.log_density(x - e)) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12))
    return worst


def all_targets():
    rng = np.random.default_rng(3)
    X, y, _ = synthetic_logistic(50, 5, rng)
    return {
        "ar1": ar1_gaussian(6, 0.5),
        "isotropic": isotropic_gaussian(4, mean=1.0, variance=2.0),
        "mixture": gaussian_mixture([0.5, 0.5], [np.ones(4), -np.ones(4)]),
        "mixture3": gaussian_mixture([0.2, 0.3, 0.5], rng.standard_normal((3, 3)), 0.7),
        "logistic": logistic_posterior(X, y, 10.0),
    }


@pytest.mark.parametrize("name", sorted(all_targets()))
def test_gradient_matches_finite_differences(name):
    target = all_targets()[name]
    assert fd_rel_error(target, np.random.default_rng(0)) < 1e-5


def test_ar1_one_dimensional_is_standard_normal():
    t = ar1_gaussian(1, 0.5)
    assert t.grad_log_density(np.array([2.0]))[0] == pytest.approx(-2.0)


def test_ar1_covariance_two_by_two():
    np.testing.assert_array_equal(ar1_covariance(2, 0.5), [[1.0, 0.5], [0.5, 1.0]])


def test_ar1_gradient_against_hand_elimination():
    # Sigma = [[1, .5, .25], [.5, 1, .5], [.25, .5, 1]]; solving Sigma z = e1 by
    # elimination gives z = (4/3, -2/3, 0).
    g = ar1_gaussian(3, 0.5).grad_log_density(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(g, [-4 / 3, 2 / 3, 0.0], atol=1e-12)


@pytest.mark.parametrize("r", [0.0, 1.0, -0.2])
def test_ar1_rejects_bad_correlation(r):
    with pytest.raises(InvalidInputError):
        ar1_gaussian(3, r)


def test_gradient_accepts_stacks():
    t = ar1_gaussian(4)
    xs = np.random.default_rng(0).standard_normal((2, 3, 4))
    g = t.grad_log_density(xs)
    assert g.shape == xs.shape
    np.testing.assert_array_equal(g[1, 2], t.grad_log_density(xs[1, 2]))
    assert t.log_density(xs).shape == (2, 3)


def test_isotropic_values():
    t = isotropic_gaussian(2)
    np.testing.assert_array_equal(t.grad_log_density(np.array([1.0, 1.0])), [-1.0, -1.0])
    assert t.log_density(np.zeros(2)) - t.log_density(np.array([2.0, 0.0])) == pytest.approx(2.0)
    q = isotropic_gaussian(4, mean=np.ones(4))
    np.testing.assert_array_equal(q.analytic.mean, np.ones(4))
    np.testing.assert_array_equal(q.analytic.cov, np.eye(4))


def test_isotropic_rejects_nonpositive_variance():
    with pytest.raises(InvalidInputError):
        isotropic_gaussian(2, variance=0.0)


def test_single_component_mixture_equals_gaussian():
    mean = np.array([0.5, -1.0, 2.0])
    mix = gaussian_mixture([1.0], [mean], 1.5)
    iso = isotropic_gaussian(3, mean, 1.5)
    xs = np.random.default_rng(1).standard_normal((100, 3)) * 3
    np.testing.assert_allclose(mix.grad_log_density(xs), iso.grad_log_density(xs), rtol=1e-12, atol=1e-14)
    # the mixture keeps the normalizing weight log(1) = 0, so log densities agree exactly
    np.testing.assert_allclose(mix.log_density(xs), iso.log_density(xs), rtol=1e-12)


def test_symmetric_mixture_gradient_vanishes_at_centre():
    mix = gaussian_mixture([0.5, 0.5], [[2.0], [-2.0]])
    assert mix.grad_log_density(np.zeros(1))[0] == pytest.approx(0.0, abs=1e-15)


def test_mixture_is_stable_far_from_modes():
    mix = gaussian_mixture([0.5, 0.5], [[2.0], [-2.0]])
    x = np.array([1e3])
    assert np.isfinite(mix.log_density(x))
    assert mix.grad_log_density(x)[0] == pytest.approx(-(1e3 - 2.0))


@pytest.mark.parametrize("w,m", [([], np.zeros((0, 2))), ([0.3, 0.3], [[0.0], [1.0]]), ([1.0], [[0.0], [1.0]])])
def test_mixture_validation(w, m):
    with pytest.raises(InvalidInputError):
        gaussian_mixture(w, m)


def test_logistic_with_zero_design_is_prior():
    t = logistic_posterior(np.zeros((4, 3)), [1, -1, 1, 1], prior_variance=2.0)
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(t.grad_log_density(b), -b / 2.0)


def test_logistic_single_observation_gradient():
    t = logistic_posterior([[1.0]], [1], prior_variance=1e300)
    assert t.grad_log_density(np.zeros(1))[0] == pytest.approx(0.5)


def test_logistic_overflow_safe():
    t = logistic_posterior([[1.0]], [-1], prior_variance=10.0)
    b = np.array([800.0])
    assert np.isfinite(t.log_density(b))
    assert t.grad_log_density(b)[0] == pytest.approx(-1.0 - 80.0)


def test_logistic_rejects_bad_labels():
    with pytest.raises(InvalidInputError):
        logistic_posterior([[1.0], [2.0]], [0, 1])


def test_logistic_minibatch_with_all_indices_equals_full():
    rng = np.random.default_rng(2)
    X, y, _ = synthetic_logistic(30, 3, rng)
    t = logistic_posterior(X, y)
    b = rng.standard_normal((2, 3))
    idx = np.tile(np.arange(30), (2, 1))
    np.testing.assert_allclose(t.observations.loglik_grad(b, idx), t.observations.loglik_grad(b), rtol=1e-12)


def test_load_logistic_csv_maps_labels_and_standardizes(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,a,b\n1,1.0,5\n0,2.0,5\n1,3.0,5\n")
    X, y = load_logistic_csv(path)
    np.testing.assert_array_equal(y, [1, -1, 1])
    np.testing.assert_allclose(X[:, 0], [-math.sqrt(1.5), 0, math.sqrt(1.5)])
    np.testing.assert_array_equal(X[:, 1], 0.0)
    raw, _ = load_logistic_csv(path, standardize=False)
    np.testing.assert_array_equal(raw[:, 0], [1, 2, 3])


def test_load_logistic_csv_rejects_bad_labels(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("2,1.0\n1,2.0\n")
    with pytest.raises(InvalidInputError):
        load_logistic_csv(path)


# -- matrix square root and closed-form W2 ----------------------------------


def test_matrix_sqrt_simple_cases():
    np.testing.assert_array_equal(matrix_sqrt_sym(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(matrix_sqrt_sym(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_matrix_sqrt_residual_ar1():
    S = ar1_covariance(5, 0.5)
    R = matrix_sqrt_sym(S)
    np.testing.assert_array_equal(R, R.T)
    assert np.linalg.norm(R @ R - S) / np.linalg.norm(S) < 1e-8


def test_matrix_sqrt_clamps_tiny_negative_and_rejects_negative():
    R = matrix_sqrt_sym(np.diag([1.0, -5e-11]))
    assert R[1, 1] == 0.0
    with pytest.raises(InvalidInputError):
        matrix_sqrt_sym(np.diag([1.0, -1e-6]))


def test_gaussian_w2_values():
    S = ar1_covariance(6, 0.5)
    assert gaussian_w2(np.zeros(6), S, np.zeros(6), S) == pytest.approx(0.0, abs=1e-7)
    expected = np.linalg.norm(matrix_sqrt_sym(S) - np.eye(6), "fro")
    assert gaussian_w2(np.zeros(6), S, np.zeros(6), np.eye(6)) == pytest.approx(expected, rel=1e-10)
    assert gaussian_w2([3.0, 4.0], np.eye(2), [0.0, 0.0], np.eye(2)) == pytest.approx(5.0)


def test_gaussian_w2_scalar_oracle():
    assert gaussian_w2([1.0], [[4.0]], [-1.0], [[0.25]]) == pytest.approx(math.sqrt(4 + 1.5**2))


def test_gaussian_w2_rejects_non_spd():
    with pytest.raises(InvalidInputError):
        gaussian_w2(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))


def _spd(seed, d):
    A = np.random.default_rng(seed).standard_normal((d, d))
    return A @ A.T + 0.1 * np.eye(d)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_gaussian_w2_symmetric_and_zero_on_diagonal(seed, d):
    rng = np.random.default_rng(seed)
    A, B = _spd(seed, d), _spd(seed + 1, d)
    m1, m2 = rng.standard_normal(d), rng.standard_normal(d)
    w12, w21 = gaussian_w2(m1, A, m2, B), gaussian_w2(m2, B, m1, A)
    assert w12 >= 0
    assert abs(w12 - w21) <= 1e-8 * max(1.0, w12)
    assert gaussian_w2(m1, A, m1, A) <= 1e-6 * math.sqrt(np.trace(A))


# -- ULA limit and bias bound -------------------------------------------------


def test_ula_limit_scalar():
    g = ula_gaussian_limit([[1.0]], 0.1)
    assert g.cov[0, 0] == pytest.approx(0.01 / (1 - 0.995**2), rel=1e-12)


def test_ula_limit_small_step_recovers_target():
    S = ar1_covariance(3, 0.5)
    assert np.linalg.norm(ula_gaussian_limit(S, 1e-3).cov - S) < 1e-3


def test_ula_limit_two_by_two_hand_inverse():
    sigma, r = 0.4, 0.5
    S = ar1_covariance(2, r)
    det = 1 - r * r
    Sinv = np.array([[1, -r], [-r, 1]]) / det
    B = np.eye(2) - sigma**2 / 2 * Sinv
    M = np.eye(2) - B @ B
    Minv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / (M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0])
    np.testing.assert_allclose(ula_gaussian_limit(S, sigma).cov, sigma**2 * Minv, rtol=1e-12)


def test_ula_limit_rejects_large_step():
    with pytest.raises(StepSizeTooLargeError):
        ula_gaussian_limit(np.eye(2), 2.0)


@given(st.integers(0, 10_000), st.integers(1, 5), st.floats(0.01, 0.5))
def test_ula_limit_is_spd(seed, d, sigma):
    S = _spd(seed, d) + np.eye(d)
    try:
        g = ula_gaussian_limit(S, sigma)
    except StepSizeTooLargeError:
        return
    np.testing.assert_allclose(g.cov, g.cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(g.cov)[0] > 0


def test_dm_bound_scalar_oracle():
    # m = L = 1, Ltilde = 0, sigma = 0.1, d = 1: gamma = 0.005, kappa = 1
    gamma = 0.005
    inner = 2 + gamma * (gamma / 6 + 1) + (gamma + 4 / 3)
    assert dm_ula_bias_bound(1, 1, 0, 0.1, 1) == pytest.approx(math.sqrt(2 * gamma**2 * inner), rel=1e-14)


def test_dm_bound_monotone_and_hessian_term():
    assert dm_ula_bias_bound(1, 1, 0, 0.05, 3) < dm_ula_bias_bound(1, 1, 0, 0.1, 3)
    assert dm_ula_bias_bound(1, 1, 0, 0.1, 3) < dm_ula_bias_bound(1, 1, 1, 0.1, 3)


@pytest.mark.parametrize("args", [(2, 1, 0, 0.1, 1), (1, 1, 0, 1.0, 1), (0, 1, 0, 0.1, 1)])
def test_dm_bound_preconditions(args):
    with pytest.raises(InvalidInputError):
        dm_ula_bias_bound(*args)


# -- Laplace ----------------------------------------------------------------


def test_laplace_exact_for_gaussian():
    S = ar1_covariance(4, 0.5)
    mean = np.array([1.0, -1.0, 0.5, 2.0])
    approx = laplace_approximation(gaussian(mean, S), np.zeros(4))
    assert approx.converged
    np.testing.assert_allclose(approx.mean, mean, atol=1e-10)
    np.testing.assert_allclose(approx.cov, S, atol=1e-10)


def test_laplace_logistic_residual_and_warm_start():
    X, y, _ = synthetic_logistic(50, 2, np.random.default_rng(4))
    t = logistic_posterior(X, y, 10.0)
    approx = laplace_approximation(t, np.zeros(2), tol=1e-8)
    assert approx.converged
    assert np.linalg.norm(t.grad_log_density(approx.mean)) < 1e-8
    again = laplace_approximation(t, approx.mean, tol=1e-8)
    assert again.iterations <= 2


def test_laplace_uses_finite_differences_without_hessian():
    X, y, _ = synthetic_logistic(40, 3, np.random.default_rng(5))
    t = logistic_posterior(X, y, 10.0)
    no_h = type(t)(t.dimension, t.log_density, t.grad_log_density, observations=t.observations)
    a = laplace_approximation(t, np.zeros(3))
    b = laplace_approximation(no_h, np.zeros(3))
    np.testing.assert_allclose(b.mean, a.mean, atol=1e-8)
    np.testing.assert_allclose(b.cov, a.cov, rtol=1e-4)


def test_laplace_reports_non_convergence():
    t = ar1_gaussian(3)
    approx = laplace_approximation(t, 50 * np.ones(3), max_iter=0)
    assert not approx.converged and approx.iterations == 0


def test_laplace_fails_on_saddle():
    # log p = -x^2/2 + y^2/2 has a critical point at 0 that is not a maximum
    from wassbound.targets import TargetModel

    t = TargetModel(
        2,
        lambda z: -0.5 * z[0] ** 2 + 0.5 * z[1] ** 2,
        lambda z: np.array([-z[0], z[1]]),
        hessian=lambda z: np.diag([-1.0, 1.0]),
    )
    with pytest.raises(ApproximationFailedError):
        laplace_approximation(t, np.zeros(2))
