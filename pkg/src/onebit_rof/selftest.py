"""Oracle and invariant checks runnable from an installed package.

Each check returns a :class:`Check` with the measured quantity, so callers
can print it next to the verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import estimators as est
from . import model_core as mc
from . import training as tr
from ._kernels import StructuredOperator
from .config import SystemConfig


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _fd_wirtinger(f, h, step):
    g = np.zeros_like(h)
    for k in range(h.size):
        e = np.zeros_like(h)
        e[k] = step
        da = (f(h + e) - f(h - e)) / (2 * step)
        db = (f(h + 1j * e) - f(h - 1j * e)) / (2 * step)
        g[k] = 0.5 * (da + 1j * db)
    return g


def _dense_loss(theta, M, H, Z):
    h = est.unfolded_forward(est.UnfoldedParams.from_vector(theta), est.MlProblem(M, Z, rho=1.0))
    return tr.loss(H, h)


def check_wirtinger_gradient(cfg: SystemConfig, n_points: int = 100, step: float = 1e-5,
                             tol: float = 1e-5, seed: int = 0) -> Check:
    """Wirtinger gradient against central differences of the smoothed objective."""
    op = mc.build_measurement_matrix(cfg)
    rng = mc.stream_rng(seed, mc.STREAM_SELFTEST, 0)
    worst = 0.0
    for _ in range(n_points):
        Ed = float(rng.uniform(0.05, 1.0))
        h0 = mc.sample_channel(rng, cfg.S, cfg.U)
        z = mc.simulate_model1(op, h0, mc.sample_dither(rng, op.n_obs, Ed)).z
        prob = est.MlProblem.from_obs(op.M, z, Ed)
        h = mc.sample_channel(rng, cfg.S, cfg.U)
        g = est.gradient_wirtinger(h, prob)
        fd = _fd_wirtinger(lambda x: est.objective_smoothed(x, prob), h, step)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return Check("wirtinger gradient vs finite differences", worst <= tol,
                 f"worst relative error {worst:.2e} over {n_points} points (tol {tol:g})")


def check_backward(cfg: SystemConfig, n_batches: int = 100, batch: int = 4, step: float = 1e-5,
                   tol: float = 1e-5, seed: int = 0) -> Check:
    """Reverse-mode gradient against central differences of a dense forward pass."""
    op = mc.build_measurement_matrix(cfg)
    sop = StructuredOperator(op)
    rng = mc.stream_rng(seed, mc.STREAM_SELFTEST, 1)
    worst = 0.0
    L = cfg.L
    for _ in range(n_batches):
        link = mc.Link(model=1, Ed=float(rng.uniform(0.05, 1.0)))
        H, Z = mc.generate_batch(cfg, op, link, rng, batch)
        theta = np.concatenate([rng.uniform(0.02, 0.3, L), rng.uniform(1.0, 8.0, L)])
        g = tr.backward(est.UnfoldedParams.from_vector(theta), tr.Batch.build(sop, Z, H))
        fd = np.empty_like(theta)
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = step
            fd[k] = (_dense_loss(theta + e, op.M, H, Z) - _dense_loss(theta - e, op.M, H, Z)) / (2 * step)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return Check("backward vs finite differences", worst <= tol,
                 f"worst relative error {worst:.2e} over {n_batches} batches of {batch} (tol {tol:g})")


def check_analytic_identities(cfg: SystemConfig, seed: int = 0) -> list[Check]:
    op = mc.build_measurement_matrix(cfg)
    rng = mc.stream_rng(seed, mc.STREAM_SELFTEST, 2)
    out = []

    Ed = 0.2
    z = mc.simulate_model1(op, mc.sample_channel(rng, cfg.S, cfg.U), mc.sample_dither(rng, op.n_obs, Ed)).z
    prob = est.MlProblem.from_obs(op.M, z, Ed)
    alpha = 0.37
    h1 = est.unfolded_layer(np.zeros(op.n_unknowns, complex), alpha, 5.0, prob)
    err = np.max(np.abs(h1 - alpha / 2 * (op.M.conj().T @ z)))
    out.append(Check("first layer from zero equals (alpha/2) M^H z", err <= 1e-12, f"max abs error {err:.1e}"))

    h0 = np.zeros(op.n_unknowns, complex)
    target = op.n_obs * math.log(2)
    e_exact = abs(est.objective_exact(h0, prob) - target)
    e_smooth = abs(est.objective_smoothed(h0, prob) - target)
    out.append(Check("objective at zero equals N*Np*log 2", max(e_exact, e_smooth) <= 1e-9 * target,
                     f"exact {e_exact:.1e}, smoothed {e_smooth:.1e} (target {target:.4f})"))

    bl = est.blmmse_build(cfg, op, N0=0.01, Ed=Ed)
    e_diag = np.max(np.abs(np.diag(bl.C_z) - 1))
    out.append(Check("arcsine-law covariance has unit diagonal", e_diag <= 1e-14, f"max deviation {e_diag:.1e}"))

    out.append(_check_reductions(cfg, op, seed))
    return out


def _check_reductions(cfg: SystemConfig, op: mc.ForwardOperator, seed: int) -> Check:
    n = 200
    ok = True
    for trial in range(3):
        rng = mc.stream_rng(seed, mc.STREAM_SELFTEST, 3, trial)
        H = mc.sample_channel(rng, cfg.S, cfg.U, n)
        W = mc.sample_noise(rng, cfg.S * cfg.Np, 0.05, n)
        D = mc.sample_dither(rng, op.n_obs, 0.2, n)
        z2 = mc.simulate_model2(cfg, op, H, W, D).z
        z3 = mc.simulate_model3(cfg, op, H, W, D, mc.stream_rng(seed, 99), gain_dB=0.0, t=0.0).z
        z1 = mc.simulate_model1(op, H, D).z
        z2_clean = mc.simulate_model2(cfg, op, H, np.zeros_like(W), D).z
        ok &= np.array_equal(z2, z3) and np.array_equal(z1, z2_clean)
    return Check("model reduction chain M3(a=1,t=0)=M2, M2(N0=0)=M1", bool(ok), f"{3 * n} realizations, bit-exact")


def check_blmmse_optimality(n_draws: int = 100_000, n_perturb: int = 20, seed: int = 0) -> list[Check]:
    """Small instance: Monte-Carlo MSE at W_bl against random perturbations, and normal equations."""
    cfg = SystemConfig(N=4, S=1, Np=2)
    op = mc.build_measurement_matrix(cfg)
    Ed, N0 = 0.5, 0.1
    bl = est.blmmse_build(cfg, op, N0=N0, Ed=Ed)
    rng = mc.stream_rng(seed, mc.STREAM_SELFTEST, 4)
    H = mc.sample_channel(rng, cfg.S, cfg.U, n_draws)
    Wn = mc.sample_noise(rng, cfg.S * cfg.Np, N0, n_draws)
    D = mc.sample_dither(rng, op.n_obs, Ed, n_draws)
    Z = mc.simulate_model2(cfg, op, H, Wn, D).z.astype(float)

    def mse(W):
        return float(np.mean(np.sum(np.abs(H - W @ Z) ** 2, axis=0)))

    base = mse(bl.W)
    size = 0.1 * np.linalg.norm(bl.W) / math.sqrt(bl.W.size)
    worst_gap = math.inf
    for _ in range(n_perturb):
        delta = size * (rng.standard_normal(bl.W.shape) + 1j * rng.standard_normal(bl.W.shape))
        worst_gap = min(worst_gap, mse(bl.W + delta) - base)
    resid = np.linalg.norm(bl.W @ bl.C_z - bl.C_hz) / np.linalg.norm(bl.C_hz)
    return [
        Check("BLMMSE beats random perturbations", worst_gap > 0,
              f"MSE {base:.5f}, smallest increase {worst_gap:.2e} over {n_perturb} perturbations, {n_draws} draws"),
        Check("BLMMSE normal equations", resid <= 1e-8, f"relative residual {resid:.1e}"),
    ]


def run_all(cfg: SystemConfig | None = None, quick: bool = False) -> list[Check]:
    cfg = cfg or SystemConfig()
    n = 10 if quick else 100
    checks = [check_wirtinger_gradient(cfg, n_points=n), check_backward(cfg, n_batches=n)]
    checks += check_analytic_identities(cfg)
    checks += check_blmmse_optimality()
    return checks
