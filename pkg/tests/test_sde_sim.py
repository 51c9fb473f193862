import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepkolmogorov.problems import correlation_matrix, make_problem
from deepkolmogorov.rng import substream
from deepkolmogorov.sde_sim import (
    CholeskyError,
    Domain,
    cholesky_factor,
    euler_maruyama_step,
    lorenz_drift,
    make_grid,
    sample_initial,
    simulate_terminal,
    step_bs_correlated,
    step_gbm,
    step_heat,
    step_heston,
    step_lorenz_tamed,
)

HESTON = dict(alpha=1 / 20, kappa=6 / 10, theta=1 / 25, beta=1 / 5, rho=-4 / 5)


# --- grids and domains ---


def test_grid_single_step():
    assert make_grid(1.0, 1).nodes.tolist() == [0.0, 1.0]


def test_grid_hundred_steps():
    g = make_grid(1.0, 100)
    assert len(g.nodes) == 101
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    np.testing.assert_allclose(g.nodes, np.arange(101) / 100, rtol=0, atol=1e-15)


def test_grid_quarter_steps():
    assert make_grid(2.0, 4).nodes.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]


@pytest.mark.parametrize("T,N", [(1.0, 0), (0.0, 3), (-1.0, 2)])
def test_grid_rejects_bad_input(T, N):
    with pytest.raises(ValueError):
        make_grid(T, N)


@given(st.floats(1e-3, 1e3), st.integers(1, 500))
def test_grid_is_strictly_increasing_and_ends_at_T(T, N):
    g = make_grid(T, N)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == T
    assert np.all(np.diff(g.nodes) > 0)


def test_domain_rejects_empty_interval():
    with pytest.raises(ValueError):
        Domain(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


def test_samples_stay_in_tiny_interval():
    c, eps = 3.0, 1e-12
    dom = Domain(np.array([c]), np.array([c + eps]))
    x = sample_initial(dom, 10_000, substream(1, 0))
    assert np.all((x >= c) & (x <= c + eps))


def test_uniform_moments():
    x = sample_initial(Domain.cube(0.0, 1.0, 2), 1_000_000, substream(2, 0))
    assert np.all(np.abs(x.mean(axis=0) - 0.5) < 0.005)
    assert np.all(np.abs(x.var(axis=0) - 1 / 12) < 0.002)


def test_sampling_is_reproducible():
    dom = Domain.cube(90.0, 110.0, 4)
    a = sample_initial(dom, 100, substream(7, 1, 3))
    b = sample_initial(dom, 100, substream(7, 1, 3))
    assert np.array_equal(a, b)


# --- Euler-Maruyama ---


def test_euler_zero_coefficients_is_identity():
    x = np.array([[1.0, -2.0, 3.0]])
    out = euler_maruyama_step(np.zeros_like, np.zeros_like, x, 0.1, np.ones_like(x))
    assert np.array_equal(out, x)


def test_euler_heat_coefficients():
    d = 5
    x = np.zeros((1, d))
    out = euler_maruyama_step(np.zeros_like, lambda x: math.sqrt(2) * np.eye(d), x, 1.0, np.ones((1, d)))
    np.testing.assert_allclose(out, math.sqrt(2) * np.ones((1, d)), rtol=0, atol=1e-15)


def test_euler_linear_drift():
    out = euler_maruyama_step(lambda x: 2 * x, np.zeros_like, np.array([[1.0]]), 0.5, np.zeros((1, 1)))
    assert out[0, 0] == 2.0


def test_euler_rejects_mismatched_diffusion():
    x = np.zeros((2, 3))
    with pytest.raises(ValueError):
        euler_maruyama_step(np.zeros_like, lambda x: np.ones((4, 4)), x, 0.1, np.zeros((2, 3)))


# --- one-step maps ---


def test_heat_step():
    x = np.array([[0.5, 0.25]])
    np.testing.assert_allclose(step_heat(0, 1, x, np.ones((1, 2))), x + math.sqrt(2))


def test_gbm_zero_noise_with_cancelling_drift():
    sigma = np.array([0.2, 0.3])
    x = np.array([[100.0, 95.0]])
    np.testing.assert_allclose(step_gbm(sigma**2 / 2, sigma, 0, 1, x, np.zeros((1, 2))), x, rtol=1e-15)


def test_gbm_scalar_value():
    mp_value = mpmath.mpf(100) * mpmath.exp(mpmath.mpf("-0.05") - mpmath.mpf("0.105") ** 2 / 2)
    got = step_gbm(-0.05, 0.105, 0.0, 1.0, np.array([[100.0]]), np.zeros((1, 1)))[0, 0]
    assert got == pytest.approx(float(mp_value), rel=1e-14)


def test_gbm_problem_volatilities():
    p = make_problem("gbm", d=3)
    np.testing.assert_allclose(p.params["sigma"], [0.105, 0.11, 0.115])
    np.testing.assert_allclose(p.params["mu"], -0.05)


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=5), st.floats(-8, 8))
def test_gbm_preserves_positivity(xs, w):
    x = np.array([xs])
    out = step_gbm(-0.05, 0.3, 0.0, 1.0, x, np.full_like(x, w))
    assert np.all(out > 0)


def test_bs_identity_correlation_matches_gbm():
    rng = substream(3, 0)
    x = 90 + 20 * rng.random((50, 4))
    w = rng.standard_normal((50, 4))
    beta = np.array([0.1, 0.2, 0.3, 0.4])
    got = step_bs_correlated(-0.05, beta, np.eye(4), 0, 1, x, w)
    np.testing.assert_allclose(got, step_gbm(-0.05, beta, 0, 1, x, w), rtol=1e-14)


def test_bs_zero_noise_decay():
    chol = cholesky_factor(correlation_matrix(2))
    np.testing.assert_allclose(np.sum(chol**2, axis=1), 1.0, rtol=1e-15)
    beta = np.array([0.105, 0.11])
    x = np.array([[100.0, 100.0]])
    out = step_bs_correlated(-0.05, beta, chol, 0.0, 0.5, x, np.zeros((1, 2)))
    np.testing.assert_allclose(out, x * np.exp((-0.05 - 0.5 * beta**2) * 0.5), rtol=1e-14)


def test_bs_log_return_correlation():
    chol = cholesky_factor(correlation_matrix(2))
    w = substream(4, 0).standard_normal((1_000_000, 2))
    x = np.ones((1_000_000, 2))
    logret = np.log(step_bs_correlated(0.0, np.array([0.2, 0.3]), chol, 0, 1, x, w))
    assert abs(np.corrcoef(logret.T)[0, 1] - 0.5) < 0.01


def test_lorenz_drops_large_drift():
    x = np.array([[50.0, -50.0, 10.0]])
    assert np.linalg.norm(lorenz_drift(x)) > 100
    w = np.array([[0.3, -0.1, 0.2]])
    np.testing.assert_allclose(step_lorenz_tamed((10, 14, 8 / 3), 0.15, 100.0, 0, 0.01, x, w), x + 0.15 * w)


def test_lorenz_origin_is_fixed():
    z = np.zeros((1, 3))
    assert np.array_equal(step_lorenz_tamed((10, 14, 8 / 3), 0.15, 100.0, 0, 0.01, z, z), z)


def test_lorenz_hand_step():
    x = np.ones((1, 3))
    out = step_lorenz_tamed((10, 14, 8 / 3), 0.15, 100.0, 0, 0.01, x, np.zeros((1, 3)))
    np.testing.assert_allclose(out, x + 0.01 * np.array([[0.0, 12.0, 1 - 8 / 3]]), rtol=0, atol=1e-15)


@settings(max_examples=200)
@given(st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3))
def test_lorenz_drift_contribution_is_bounded(xs):
    N, T = 100, 1.0
    dt = T / N
    x = np.array([xs])
    moved = step_lorenz_tamed((10, 14, 8 / 3), 0.15, N / T, 0, dt, x, np.zeros((1, 3))) - x
    assert np.linalg.norm(moved) <= (N / T) * dt * (1 + 1e-12) + 1e-9 * np.abs(x).max()


def test_heston_zero_variance_level():
    dt = 0.01
    beta, kappa, theta = HESTON["beta"], HESTON["kappa"], HESTON["theta"]
    x = np.array([[100.0, 0.0]])
    out = step_heston(**HESTON, s=0, t=dt, x=x, w=np.zeros((1, 2)))
    expected = max(beta**2 * dt / 4 + (kappa * theta - beta**2 / 4) * dt, 0.0)
    assert out[0, 1] == pytest.approx(expected, rel=1e-14)
    assert out[0, 0] == pytest.approx(100 * math.exp(HESTON["alpha"] * dt), rel=1e-14)


def test_heston_rejects_negative_variance():
    with pytest.raises(ValueError):
        step_heston(**HESTON, s=0, t=0.01, x=np.array([[100.0, -1e-3]]), w=np.zeros((1, 2)))


@settings(max_examples=300)
@given(st.floats(0, 4), st.floats(-10, 10), st.floats(-10, 10), st.floats(1e-4, 1))
def test_heston_variance_non_negative(v, w1, w2, dt):
    out = step_heston(**HESTON, s=0, t=dt, x=np.array([[100.0, v]]), w=np.array([[w1, w2]]))
    assert out[0, 1] >= 0


# --- Cholesky ---


def test_cholesky_identity():
    assert np.array_equal(cholesky_factor(np.eye(5)), np.eye(5))


def test_cholesky_two_by_two():
    L = cholesky_factor([[1.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(L, [[1.0, 0.0], [0.5, math.sqrt(3) / 2]], rtol=0, atol=1e-16)
    np.testing.assert_allclose(L @ L.T, [[1.0, 0.5], [0.5, 1.0]], rtol=0, atol=1e-15)


def test_cholesky_hundred():
    Q = correlation_matrix(100)
    L = cholesky_factor(Q)
    assert np.all(np.triu(L, 1) == 0) and np.all(np.diag(L) > 0)
    assert np.linalg.norm(L @ L.T - Q) <= 1e-12 * np.linalg.norm(Q)
    np.testing.assert_allclose(L, np.linalg.cholesky(Q), atol=1e-13)


@pytest.mark.parametrize("Q", [[[1.0, 2.0], [2.0, 1.0]], [[1.0, 1.0], [1.0, 1.0]], [[-1.0, 0.0], [0.0, 1.0]]])
def test_cholesky_rejects_indefinite(Q):
    with pytest.raises(CholeskyError):
        cholesky_factor(Q)


def test_cholesky_rejects_asymmetric():
    with pytest.raises(CholeskyError):
        cholesky_factor([[1.0, 0.1], [0.2, 1.0]])


# --- simulation ---


def test_heat_increment_variance():
    p = make_problem("heat", d=2)
    xi = sample_initial(p.domain, 1_000_000, substream(5, 0))
    paths = simulate_terminal(p, xi, substream(5, 1))
    var = (paths.terminal - paths.initial).var(axis=0)
    assert np.all(np.abs(var - 2 * p.T) < 0.01 * 2 * p.T)


@pytest.mark.parametrize("name,d", [("heat", 3), ("gbm", 3), ("blackscholes-corr", 3), ("lorenz", 3), ("heston", 4)])
def test_zero_increments_give_deterministic_steps(name, d):
    p = make_problem(name, d=d)
    xi = sample_initial(p.domain, 8, substream(6, 0))
    zeros = np.zeros((p.N, 8, d))
    out = simulate_terminal(p, xi, None, increments=zeros).terminal
    x = xi
    for n in range(p.N):
        x = p.step_map(p.grid.nodes[n], p.grid.nodes[n + 1], x, np.zeros_like(x))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("name,d", [("heat", 3), ("lorenz", 3), ("heston", 4)])
def test_simulation_is_deterministic(name, d):
    p = make_problem(name, d=d)
    xi = sample_initial(p.domain, 64, substream(8, 0))
    a = simulate_terminal(p, xi, substream(8, 1))
    b = simulate_terminal(p, xi, substream(8, 1))
    assert np.array_equal(a.terminal, b.terminal)
    assert a.initial.shape == a.terminal.shape


def test_gbm_martingale_ratio():
    sigma = np.array([0.1, 0.2, 0.4])
    mu = np.zeros(3)
    p = make_problem("gbm", d=3, mu=mu, sigma=sigma)
    n = 1_000_000
    xi = np.full((n, 3), 100.0)
    ratio = simulate_terminal(p, xi, substream(9, 0)).terminal / xi
    se = ratio.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(ratio.mean(axis=0) - np.exp(mu * p.T)) < 3 * se)


def test_out_of_domain_start_is_allowed():
    p = make_problem("gbm", d=2)
    out = simulate_terminal(p, np.array([[1.0, 500.0]]), substream(10, 0))
    assert np.all(np.isfinite(out.terminal))


def test_problem_registry():
    assert make_problem("heat").d == 100 and make_problem("heat").N == 1
    assert make_problem("lorenz").N == 100
    with pytest.raises(ValueError):
        make_problem("heston", d=3)
    with pytest.raises(ValueError):
        make_problem("lorenz", d=4)
    lor = make_problem("lorenz")
    np.testing.assert_array_equal(lor.domain.lower, [0.5, 8, 10])
    np.testing.assert_array_equal(lor.domain.upper, [1.5, 10, 12])
