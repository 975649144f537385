import math

import numpy as np
import pytest
from scipy import stats

from oracles import scalar_mala_step
from wassbound import InvalidInputError, NumericalFailureError
from wassbound.kernels import (
    KernelConfig,
    gradient,
    langevin_proposal,
    mala,
    mala_log_accept,
    mala_step,
    default_step_size,
    sgld,
    sgld_batch_size,
    sgld_step,
    ula,
    ula_step,
)
from wassbound.targets import (
    TargetModel,
    ar1_covariance,
    ar1_gaussian,
    gaussian_mixture,
    isotropic_gaussian,
    logistic_posterior,
    synthetic_logistic,
    ula_gaussian_limit,
)


def batch_means_se(x, batches=50):
    m = np.asarray(x).reshape(batches, -1).mean(axis=1)
    return m.std(ddof=1) / math.sqrt(batches)


def test_proposal_fixed_point_at_zero_gradient():
    mix = gaussian_mixture([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]])
    np.testing.assert_allclose(langevin_proposal(mix, 0.7, np.zeros(2), np.zeros(2)), 0.0, atol=1e-15)


def test_proposal_standard_normal():
    t = isotropic_gaussian(3)
    np.testing.assert_array_equal(langevin_proposal(t, 1.0, np.zeros(3), np.eye(3)[0]), np.eye(3)[0])


def test_proposal_ar1_drift():
    t = ar1_gaussian(3, 0.5)
    x = np.array([1.0, 2.0, -1.0])
    noise = np.array([0.3, -0.2, 0.1])
    drift = -np.linalg.solve(ar1_covariance(3, 0.5), x)
    expected = x + 0.5 * 0.25 * drift + 0.5 * noise
    np.testing.assert_allclose(langevin_proposal(t, 0.5, x, noise), expected, rtol=1e-12)


def test_proposal_rejects_bad_noise_and_nonfinite_gradient():
    t = isotropic_gaussian(2)
    with pytest.raises(InvalidInputError):
        langevin_proposal(t, 1.0, np.zeros(2), np.zeros(3))
    bad = TargetModel(1, lambda x: 0.0, lambda x: np.array([np.nan]))
    with pytest.raises(NumericalFailureError):
        langevin_proposal(bad, 1.0, np.zeros(1), np.zeros(1))


def test_log_accept_zero_for_identical_points():
    t = ar1_gaussian(3)
    x = np.array([0.3, -1.0, 2.0])
    assert mala_log_accept(t, 0.5, x, x) == 0.0


def test_log_accept_antisymmetric():
    t = ar1_gaussian(4)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, y = rng.standard_normal(4), rng.standard_normal(4)
        assert mala_log_accept(t, 0.6, x, y) == pytest.approx(-mala_log_accept(t, 0.6, y, x), abs=1e-12)


def test_log_accept_scalar_oracle():
    # x = 0, x* = 1, sigma = 1, target N(0, 1): log p ratio = -1/2,
    # forward residual 1 - 0 = 1, backward residual 0 - (1 - 1/2) = -1/2
    expected = -0.5 + (-0.125) - (-0.5)
    assert mala_log_accept(isotropic_gaussian(1), 1.0, np.zeros(1), np.ones(1)) == pytest.approx(expected)


def test_mala_step_matches_scalar_oracle():
    mix = gaussian_mixture([0.3, 0.7], [[-1.5], [2.0]], 0.8)
    logp = lambda z: float(mix.log_density(np.array([z])))
    grad = lambda z: float(mix.grad_log_density(np.array([z]))[0])
    cfg = mala(mix, 0.9)
    x = 0.4
    for seed in range(50):
        rng = np.random.default_rng(seed)
        out = mala_step(cfg, np.array([x]), np.random.default_rng(seed))
        eps, u = rng.standard_normal(1)[0], rng.random()
        ref, ratio = scalar_mala_step(logp, grad, 0.9, x, eps, u)
        assert out.next_state[0] == pytest.approx(ref, abs=1e-12)
        assert out.log_accept_ratio == pytest.approx(ratio, abs=1e-10)
        if not out.accepted:
            assert out.next_state[0] == x
        x = out.next_state[0]


def test_mala_small_step_always_accepts():
    cfg = mala(isotropic_gaussian(1), 1e-4)
    rng = np.random.default_rng(1)
    x, acc = np.array([0.5]), 0
    for _ in range(1000):
        out = mala_step(cfg, x, rng)
        acc += out.accepted
        x = out.next_state
    assert acc / 1000 > 0.99


def test_mala_stationarity_and_ks():
    cfg = mala(isotropic_gaussian(1), 1.5)
    rng = np.random.default_rng(7)
    x = rng.standard_normal(1)
    n = 20_000
    trace = np.empty(n)
    for i in range(n):
        x = mala_step(cfg, x, rng).next_state
        trace[i] = x[0]
    assert abs(trace.mean()) < 3 * batch_means_se(trace)
    assert abs(trace.var() - 1) < 3 * batch_means_se(trace**2)
    # thinning by 2 keeps 10^4 samples
    ks = stats.kstest(trace[::2], "norm").statistic
    assert ks < 1.949 / math.sqrt(10_000)


def test_ula_limit_covariance():
    S = ar1_covariance(3, 0.5)
    cfg = ula(ar1_gaussian(3, 0.5), 0.2)
    rng = np.random.default_rng(11)
    x = np.zeros(3)
    n, burn = 100_000, 2_000
    out = np.empty((n, 3))
    for i in range(n + burn):
        x = ula_step(cfg, x, rng).next_state
        if i >= burn:
            out[i - burn] = x
    ref = ula_gaussian_limit(S, 0.2).cov
    emp = np.cov(out.T)
    assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05


def test_ula_always_accepts_and_fixed_point():
    mix = gaussian_mixture([0.5, 0.5], [[1.0], [-1.0]])
    cfg = ula(mix, 0.5)
    rng = np.random.default_rng(0)
    x = np.zeros(1)
    for _ in range(1000):
        out = ula_step(cfg, x, rng)
        assert out.accepted is True
        x = out.next_state
    np.testing.assert_array_equal(langevin_proposal(mix, 0.5, np.zeros(1), np.zeros(1)), 0.0)


def test_step_kind_mismatch():
    cfg = ula(isotropic_gaussian(1), 0.5)
    with pytest.raises(InvalidInputError):
        mala_step(cfg, np.zeros(1), np.random.default_rng(0))


@pytest.mark.parametrize("kw", [dict(kind="hmc"), dict(step_size=0.0), dict(minibatch_fraction=0.0),
                                dict(minibatch_fraction=1.5)])
def test_kernel_config_validation(kw):
    base = dict(kind="ula", step_size=0.1, target=isotropic_gaussian(1))
    with pytest.raises(InvalidInputError):
        KernelConfig(**{**base, **kw})


def test_sgld_requires_observations():
    with pytest.raises(InvalidInputError):
        sgld(isotropic_gaussian(2), 0.1, 0.5)


def _logistic(n=60, d=3, seed=0):
    X, y, _ = synthetic_logistic(n, d, np.random.default_rng(seed))
    return logistic_posterior(X, y, 10.0)


def test_sgld_full_batch_is_ula():
    t = _logistic()
    a, b = sgld(t, 0.05, 1.0), ula(t, 0.05)
    ra, rb = np.random.default_rng(3), np.random.default_rng(3)
    xa = xb = np.zeros(3)
    for _ in range(200):
        xa = sgld_step(a, xa, ra).next_state
        xb = ula_step(b, xb, rb).next_state
    np.testing.assert_array_equal(xa, xb)


def test_sgld_gradient_is_unbiased():
    from wassbound.streams import rank_batch

    t = _logistic(n=80, d=4, seed=2)
    cfg = sgld(t, 0.05, 0.1)
    beta = np.array([[0.3, -0.2, 0.5, 0.1]])
    rng = np.random.default_rng(9)
    draws = np.array([gradient(cfg, beta, rank_batch(rng.random(80), cfg.batch_size)[None, :])[0]
                      for _ in range(10_000)])
    full = t.grad_log_density(beta[0])
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - full) < 3 * se)


def test_sgld_batch_without_replacement():
    from wassbound.streams import rank_batch

    idx = rank_batch(np.random.default_rng(0).random(50), 20)
    assert len(set(idx.tolist())) == 20


def test_sgld_batch_sizes():
    assert sgld_batch_size(0.1, 768) == 77
    assert sgld_batch_size(0.5, 768) == 384
    assert sgld_batch_size(0.3, 10) == 3
    assert sgld_batch_size(1e-6, 10) == 1


def test_step_size_rule():
    assert default_step_size(1) == 0.5
    assert default_step_size(64) == pytest.approx(0.25)


@pytest.mark.parametrize("make", [lambda t: mala(t, 0.3), lambda t: ula(t, 0.3), lambda t: sgld(t, 0.3, 0.2)])
def test_steps_are_deterministic(make):
    cfg = make(_logistic())
    a = mala_step if cfg.kind == "mala" else ula_step if cfg.kind == "ula" else sgld_step
    o1 = a(cfg, np.ones(3), np.random.default_rng(5))
    o2 = a(cfg, np.ones(3), np.random.default_rng(5))
    np.testing.assert_array_equal(o1.next_state, o2.next_state)
    np.testing.assert_array_equal(o1.proposal, o2.proposal)
    assert o1.log_accept_ratio == o2.log_accept_ratio
