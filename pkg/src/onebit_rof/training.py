"""Training of the unfolded estimator's step sizes and slopes.

Treating ``h`` as the real vector ``[Re h; Im h]``, ``Re{M h}`` is a real
linear map whose transpose is ``v -> M^H v``. The gradient with respect to
the 2L scalars comes from a hand-written adjoint pass through the layers
(see :mod:`onebit_rof._kernels`).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SystemConfig
from . import _kernels
from ._kernels import StructuredOperator
from .estimators import UnfoldedParams
from .model_core import ForwardOperator, Link, generate_batch, stream_rng


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


def loss(h_true: np.ndarray, h_est: np.ndarray) -> float:
    """Batch mean of the l2 error norm; columns are samples."""
    err = np.abs(np.asarray(h_true) - np.asarray(h_est))
    return float(np.mean(np.sqrt(np.sum(err**2, axis=0))))


@dataclass
class Batch:
    """Observations (N*Np, B) with the true channels (S*U, B), sharing one operator."""

    sop: StructuredOperator
    Z3: np.ndarray
    H: np.ndarray
    work: _kernels.Workspace | None = None

    @classmethod
    def build(cls, sop: StructuredOperator, Z: np.ndarray, H: np.ndarray) -> "Batch":
        Z = np.asarray(Z)
        H = np.asarray(H, dtype=complex)
        if Z.ndim == 1:
            Z, H = Z[:, None], H[:, None]
        return cls(sop=sop, Z3=sop.obs_view(Z), H=H)

    @property
    def size(self) -> int:
        return self.Z3.shape[2]


def estimate(params: UnfoldedParams, sop: StructuredOperator, Z: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Unfolded estimates for observations Z (N*Np, B), processed in chunks."""
    Z = np.asarray(Z)
    if Z.ndim == 1:
        return estimate(params, sop, Z[:, None], chunk)[:, 0]
    out = np.empty((sop.U * sop.S, Z.shape[1]), dtype=complex)
    for i in range(0, Z.shape[1], chunk):
        h, _ = _kernels.forward(sop, params.alpha, params.beta, sop.obs_view(Z[:, i:i + chunk]))
        out[:, i:i + chunk] = h
    return out


def loss_and_grad(params: UnfoldedParams, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean l2 loss and its exact gradient over (alpha_1..alpha_L, beta_1..beta_L)."""
    B = batch.size
    if B == 0:
        raise ValueError("empty batch")
    sop = batch.sop
    if batch.work is None or not batch.work.fits(params.L, batch.Z3.shape):
        batch.work = _kernels.Workspace(params.L, sop.Np, sop.N, B)
    h, spreads = _kernels.forward(sop, params.alpha, params.beta, batch.Z3, batch.work)
    err = h - batch.H
    norms = np.sqrt(np.sum(err.real**2 + err.imag**2, axis=0))
    value = float(np.mean(norms))
    safe = np.where(norms > 0, norms, 1.0)
    lam = np.where(norms > 0, err / safe, 0.0) / B
    g_alpha, g_beta, bad = _kernels.backward(sop, params.alpha, params.beta, batch.Z3, spreads,
                                                batch.work, lam)
    if bad is not None:
        raise NonFiniteError(f"non-finite gradient in layer {bad + 1}", layer=bad + 1)
    return value, np.concatenate([g_alpha, g_beta])


def backward(params: UnfoldedParams, batch: Batch) -> np.ndarray:
    """Gradient of the mean loss over the 2L parameters (alphas first)."""
    return loss_and_grad(params, batch)[1]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Bias-corrected Adam update. Mutates ``state``; returns new parameters."""
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def learning_rate(cfg: SystemConfig, epoch: int) -> float:
    tr = cfg.training
    return tr.lr0 * tr.lr_decay ** (epoch // tr.decay_every)


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    loss: float
    seconds: float


@dataclass
class TrainResult:
    params: UnfoldedParams
    records: list[TrainRecord] = field(default_factory=list)


def initial_params(cfg: SystemConfig) -> UnfoldedParams:
    return UnfoldedParams.constant(cfg.L, cfg.training.alpha_init, cfg.training.beta_init)


def train(cfg: SystemConfig, op: ForwardOperator, link: Link, stream: tuple[int, ...]) -> TrainResult:
    """Adam on fresh batches; epoch ``e`` draws its data from stream ``(*stream, e)``."""
    params = initial_params(cfg)
    theta = params.as_vector()
    state = AdamState.zeros(theta.size)
    sop = StructuredOperator(op)
    work = None
    records = []
    start = time.perf_counter()
    for epoch in range(cfg.training.epochs):
        rng = stream_rng(cfg.master_seed, *stream, epoch)
        H, Z = generate_batch(cfg, op, link, rng, cfg.training.batch)
        batch = Batch.build(sop, Z, H)
        batch.work = work
        try:
            value, grad = loss_and_grad(params, batch)
        except NonFiniteError as exc:
            exc.epoch = epoch
            raise
        work = batch.work
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        lr = learning_rate(cfg, epoch)
        theta = adam_step(state, theta, grad, lr)
        params = UnfoldedParams.from_vector(theta)
        records.append(TrainRecord(epoch, lr, value, time.perf_counter() - start))
    return TrainResult(params, records)


def write_run_log(path: str | Path, records: list[TrainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "seconds"])
        for r in records:
            w.writerow([r.epoch, repr(r.lr), repr(r.loss), f"{r.seconds:.3f}"])
