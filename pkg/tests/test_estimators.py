import math

import numpy as np
import pytest
from scipy.stats import norm

from onebit_rof import estimators as est
from onebit_rof import model_core as mc
from onebit_rof.config import SystemConfig


def _problem(cfg, op, seed, Ed=0.2, scale=1.0):
    rng = np.random.default_rng(seed)
    h = scale * mc.sample_channel(rng, cfg.S, cfg.U)
    d = mc.sample_dither(rng, op.n_obs, Ed)
    z = mc.simulate_model1(op, h, d).z
    return est.MlProblem.from_obs(op.M, z, Ed), h


def test_thresholds_from_obs():
    lo, up = est.thresholds_from_obs(np.array([1, -1]))
    assert lo.tolist() == [0.0, -np.inf]
    assert up.tolist() == [np.inf, 0.0]


def test_thresholds_roundtrip(rng):
    z = np.where(rng.random(100) < 0.5, 1, -1)
    np.testing.assert_array_equal(est.obs_from_thresholds(*est.thresholds_from_obs(z)), z)


def test_ml_problem_rejects_zero_dither(op):
    with pytest.raises(ValueError):
        est.MlProblem.from_obs(op.M, np.ones(op.n_obs), 0.0)


def test_rho_definition(op):
    prob = est.MlProblem.from_obs(op.M, np.ones(op.n_obs), 0.5)
    assert prob.rho == pytest.approx(2.0)
    assert prob.beta_ml == pytest.approx(1.702 * math.sqrt(2.0))


# --- objectives -------------------------------------------------------------

def test_objectives_at_zero(op, cfg):
    prob, _ = _problem(cfg, op, 1)
    h0 = np.zeros(9, complex)
    assert est.objective_exact(h0, prob) == pytest.approx(op.n_obs * math.log(2), rel=1e-12)
    assert est.objective_smoothed(h0, prob) == pytest.approx(op.n_obs * math.log(2), rel=1e-12)


def test_objective_single_term_saturates():
    M = np.array([[1.0 + 0j]])
    prob = est.MlProblem(M=M, z=np.array([1]), rho=1.0)
    assert est.objective_exact(np.array([40.0 + 0j]), prob) == pytest.approx(0.0, abs=1e-300)
    assert est.objective_smoothed(np.array([1000.0 + 0j]), prob) == pytest.approx(0.0, abs=1e-300)


def test_objective_never_nan_for_extreme_mismatch():
    M = np.array([[1.0 + 0j]])
    prob = est.MlProblem(M=M, z=np.array([1]), rho=1.0)
    val = est.objective_exact(np.array([-1e200 + 0j]), prob)
    assert not np.isnan(val) and val > 1e300


def test_logistic_approximation_error_bound():
    x = np.linspace(-10, 10, 200_001)
    gap = np.abs(norm.cdf(x) - 1 / (1 + np.exp(-1.702 * x)))
    assert gap.max() <= 0.01


def test_exact_and_smoothed_close_for_small_h(cfg, op):
    rng = np.random.default_rng(2)
    prob, _ = _problem(cfg, op, 2)
    for _ in range(100):
        h = 0.05 * mc.sample_channel(rng, 9, 1)
        e = est.objective_exact(h, prob)
        s = est.objective_smoothed(h, prob)
        assert abs(s - e) <= 0.01 * e


def test_exact_objective_convex(cfg, op):
    rng = np.random.default_rng(3)
    prob, _ = _problem(cfg, op, 3)
    for _ in range(100):
        h1 = mc.sample_channel(rng, 9, 1)
        h2 = mc.sample_channel(rng, 9, 1)
        mid = est.objective_exact((h1 + h2) / 2, prob)
        assert mid <= 0.5 * (est.objective_exact(h1, prob) + est.objective_exact(h2, prob)) + 1e-9


# --- gradients --------------------------------------------------------------

def _fd_wirtinger(f, h, step=1e-5):
    """d f / d conj(h) = (df/da + j df/db) / 2 by central differences."""
    g = np.zeros_like(h)
    for k in range(h.size):
        e = np.zeros_like(h)
        e[k] = step
        da = (f(h + e) - f(h - e)) / (2 * step)
        db = (f(h + 1j * e) - f(h - 1j * e)) / (2 * step)
        g[k] = 0.5 * (da + 1j * db)
    return g


def test_gradient_at_zero_is_matched_filter(cfg, op):
    prob, _ = _problem(cfg, op, 4)
    g = est.gradient_wirtinger(np.zeros(9, complex), prob)
    scale = prob.beta_ml / 2
    np.testing.assert_allclose(g, -scale * (op.M.conj().T @ prob.z) / 2, atol=1e-12)


def test_gradient_matches_finite_differences(cfg, op):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        prob, _ = _problem(cfg, op, 100 + i)
        h = mc.sample_channel(rng, 9, 1)
        g = est.gradient_wirtinger(h, prob)
        fd = _fd_wirtinger(lambda x: est.objective_smoothed(x, prob), h)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    assert worst <= 1e-5


def test_gradient_rejects_nonpositive_beta(cfg, op):
    prob, _ = _problem(cfg, op, 6)
    with pytest.raises(ValueError):
        est.gradient_wirtinger(np.zeros(9, complex), prob, beta=0.0)


def test_exact_gradient_matches_finite_differences(small_cfg, small_op):
    rng = np.random.default_rng(7)
    prob, _ = _problem(small_cfg, small_op, 7)
    h = mc.sample_channel(rng, 3, 1)
    fd = _fd_wirtinger(lambda x: est.objective_exact(x, prob), h)
    np.testing.assert_allclose(est.gradient_exact(h, prob), fd, rtol=1e-6)


def _golden(f, lo, hi, tol=1e-13):
    """Golden-section minimization of a unimodal f on [lo, hi]."""
    inv = (math.sqrt(5) - 1) / 2
    c, d = hi - inv * (hi - lo), lo + inv * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv * (hi - lo)
            fd = f(d)
    return (lo + hi) / 2


def _golden_2d(f, lo=-20.0, hi=20.0):
    """Nested 1-D golden-section searches: outer over Re h, inner over Im h."""
    def inner(a):
        return _golden(lambda b: f(a, b), lo, hi)
    a = _golden(lambda a: f(a, inner(a)), lo, hi)
    return a, inner(a)


def test_exact_gradient_vanishes_at_brute_force_minimizer():
    cfg = SystemConfig(N=8, S=1, Np=2)
    op = mc.build_measurement_matrix(cfg)
    Ed = 2.0
    rng = np.random.default_rng(11)
    h = mc.sample_channel(rng, 1, 1)
    z = mc.simulate_model1(op, h, mc.sample_dither(rng, op.n_obs, Ed)).z
    prob = est.MlProblem.from_obs(op.M, z, Ed)
    a, b = _golden_2d(lambda a, b: float(est.objective_exact(np.array([a + 1j * b]), prob)))
    assert abs(a) < 19 and abs(b) < 19  # interior minimum
    assert np.linalg.norm(est.gradient_exact(np.array([a + 1j * b]), prob)) <= 1e-6


# --- unfolded layers --------------------------------------------------------

def test_layer_zero_step_is_identity(cfg, op, rng):
    prob, _ = _problem(cfg, op, 8)
    h = mc.sample_channel(rng, 9, 1)
    np.testing.assert_array_equal(est.unfolded_layer(h, 0.0, 3.0, prob), h)


def test_layer_from_zero(cfg, op):
    prob, _ = _problem(cfg, op, 9)
    out = est.unfolded_layer(np.zeros(9, complex), 0.37, 4.0, prob)
    np.testing.assert_allclose(out, 0.37 / 2 * (op.M.conj().T @ prob.z), atol=1e-12)


def test_small_layer_step_descends(cfg, op):
    rng = np.random.default_rng(10)
    for i in range(100):
        prob, _ = _problem(cfg, op, 200 + i)
        h = mc.sample_channel(rng, 9, 1)
        beta = prob.beta_ml
        # alpha = eta * beta / 2 turns the layer into a gradient step of size eta
        h_next = est.unfolded_layer(h, 1e-3 * beta / 2, beta, prob)
        assert est.objective_smoothed(h_next, prob) < est.objective_smoothed(h, prob)


def test_forward_identities(cfg, op):
    prob, _ = _problem(cfg, op, 11)
    one = est.unfolded_forward(est.UnfoldedParams([1.0], [5.0]), prob)
    np.testing.assert_allclose(one, op.M.conj().T @ prob.z / 2, atol=1e-12)
    zero = est.unfolded_forward(est.UnfoldedParams.constant(4, 0.0, 5.0), prob)
    np.testing.assert_array_equal(zero, np.zeros(9))


def test_forward_batched_matches_columns(cfg, op):
    rng = np.random.default_rng(12)
    H = mc.sample_channel(rng, 9, 1, 4)
    Z = mc.simulate_model1(op, H, mc.sample_dither(rng, op.n_obs, 0.2, 4)).z
    params = est.UnfoldedParams(np.array([0.1, 0.05]), np.array([5.0, 3.0]))
    batch = est.unfolded_forward(params, est.MlProblem.from_obs(op.M, Z, 0.2))
    for j in range(4):
        single = est.unfolded_forward(params, est.MlProblem.from_obs(op.M, Z[:, j], 0.2))
        np.testing.assert_allclose(batch[:, j], single, atol=1e-12)


def test_forward_approaches_gradient_descent(small_cfg, small_op):
    prob, _ = _problem(small_cfg, small_op, 13, Ed=0.5)
    beta = prob.beta_ml
    eta = 0.05
    h = np.zeros(3, complex)
    for _ in range(500):
        h = h - eta * est.gradient_wirtinger(h, prob)
    reference = est.objective_smoothed(h, prob)
    params = est.UnfoldedParams.constant(300, eta * beta / 2, beta)
    unfolded = est.objective_smoothed(est.unfolded_forward(params, prob), prob)
    assert abs(unfolded - reference) <= 0.01 * reference


def test_forward_equivariant_under_permutation(cfg, op):
    prob, _ = _problem(cfg, op, 14)
    perm = np.random.default_rng(1).permutation(9)
    params = est.UnfoldedParams(np.array([0.1, 0.08, 0.05]), np.array([5.0, 4.0, 6.0]))
    base = est.unfolded_forward(params, prob)
    permuted = est.unfolded_forward(params, est.MlProblem(op.M[:, perm], prob.z, prob.rho))
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_forward_is_pure(cfg, op):
    prob, _ = _problem(cfg, op, 15)
    params = est.UnfoldedParams.constant(3, 0.1, 5.0)
    np.testing.assert_array_equal(est.unfolded_forward(params, prob), est.unfolded_forward(params, prob))


def test_params_validation():
    with pytest.raises(ValueError):
        est.UnfoldedParams(np.array([1.0, np.nan]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        est.UnfoldedParams(np.array([]), np.array([]))
    with pytest.raises(ValueError):
        est.UnfoldedParams(np.array([1.0]), np.array([1.0, 2.0]))


def test_checkpoint_roundtrip(tmp_path):
    params = est.UnfoldedParams(np.array([0.1, 1 / 3, -2e-7]), np.array([5.0, np.pi, 1e10]))
    path = tmp_path / "ck.txt"
    est.save_checkpoint(path, params, "abc123")
    back, digest = est.load_checkpoint(path)
    assert digest == "abc123"
    np.testing.assert_array_equal(back.alpha, params.alpha)
    np.testing.assert_array_equal(back.beta, params.beta)
    assert path.read_text().splitlines()[0] == "L=3 config_hash=abc123"


# --- Bussgang LMMSE ---------------------------------------------------------

def test_blmmse_cz_unit_diagonal(cfg, op):
    b = est.blmmse_build(cfg, op, N0=0.01, Ed=0.2)
    np.testing.assert_allclose(np.diag(b.C_z), 1.0, atol=1e-14)


def test_blmmse_normal_equations(cfg, op):
    b = est.blmmse_build(cfg, op, N0=0.0, Ed=0.12)
    resid = np.linalg.norm(b.W @ b.C_z - b.C_hz) / np.linalg.norm(b.C_hz)
    assert resid <= 1e-8


def test_blmmse_cross_covariance_by_monte_carlo(small_cfg, small_op):
    b = est.blmmse_build(small_cfg, small_op, N0=0.05, Ed=0.3)
    rng = np.random.default_rng(3)
    n = 200_000
    H = mc.sample_channel(rng, 3, 1, n)
    W = mc.sample_noise(rng, 12, 0.05, n)
    D = mc.sample_dither(rng, small_op.n_obs, 0.3, n)
    Z = mc.simulate_model2(small_cfg, small_op, H, W, D).z.astype(float)
    np.testing.assert_allclose(H @ Z.T / n, b.C_hz, atol=0.01)
    np.testing.assert_allclose(Z @ Z.T / n, b.C_z, atol=0.01)


def test_blmmse_beats_random_perturbations():
    cfg = SystemConfig(N=4, S=1, Np=1)
    op = mc.build_measurement_matrix(cfg)
    Ed = 0.3
    b = est.blmmse_build(cfg, op, N0=0.0, Ed=Ed)
    rng = np.random.default_rng(4)
    n = 100_000
    H = mc.sample_channel(rng, 1, 1, n)
    Z = mc.simulate_model1(op, H, mc.sample_dither(rng, op.n_obs, Ed, n)).z.astype(float)

    def mse(W):
        return np.mean(np.abs(H - W @ Z) ** 2)

    base = mse(b.W)
    size = 0.1 * np.linalg.norm(b.W) / np.sqrt(b.W.size)
    for _ in range(20):
        delta = size * (rng.standard_normal(b.W.shape) + 1j * rng.standard_normal(b.W.shape))
        assert base < mse(b.W + delta)


def test_blmmse_vanishes_for_huge_dither(cfg, op):
    b = est.blmmse_build(cfg, op, N0=0.0, Ed=1e12)
    assert np.abs(b.W).max() < 1e-5


def test_blmmse_rejects_degenerate(cfg, op):
    with pytest.raises(est.NotPositiveDefiniteError):
        est.blmmse_build(cfg, op, N0=0.0, Ed=0.0)
