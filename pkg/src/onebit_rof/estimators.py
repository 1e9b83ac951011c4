"""Maximum-likelihood objective, unfolded gradient estimator and Bussgang LMMSE.

Because every quantization bin is either (0, inf) or (-inf, 0), the bin
probabilities reduce to a single CDF evaluation at ``z * x``. The ±1
observation itself serves as the tag for the infinite thresholds, so no
infinities ever enter the arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.special import expit, log_ndtr

from .config import SystemConfig
from .model_core import ForwardOperator

SIGMOID_SLOPE = 1.702


def thresholds_from_obs(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (q_low, q_up) for ±1 observations."""
    z = np.asarray(z)
    return np.where(z > 0, 0.0, -np.inf), np.where(z > 0, np.inf, 0.0)


def obs_from_thresholds(q_low: np.ndarray, q_up: np.ndarray) -> np.ndarray:
    q_low = np.asarray(q_low)
    q_up = np.asarray(q_up)
    pos = (q_low == 0) & (q_up == np.inf)
    neg = (q_low == -np.inf) & (q_up == 0)
    if not np.all(pos | neg):
        raise ValueError("thresholds do not describe a 1-bit observation")
    return np.where(pos, 1, -1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class MlProblem:
    """One (or a batch of) 1-bit estimation problems sharing ``M``.

    ``rho = sqrt(2 / Ed)``; the sigmoid surrogate uses slope ``c * sqrt(rho)``.
    """

    M: np.ndarray
    z: np.ndarray
    rho: float
    c: float = SIGMOID_SLOPE

    @classmethod
    def from_obs(cls, M: np.ndarray, z: np.ndarray, Ed: float) -> "MlProblem":
        if not Ed > 0 or not math.isfinite(Ed):
            raise ValueError(f"dither power must be positive and finite, got Ed={Ed}")
        return cls(M=M, z=np.asarray(z), rho=math.sqrt(2.0 / Ed))

    @property
    def q_low(self) -> np.ndarray:
        return thresholds_from_obs(self.z)[0]

    @property
    def q_up(self) -> np.ndarray:
        return thresholds_from_obs(self.z)[1]

    @property
    def beta_ml(self) -> float:
        return self.c * math.sqrt(self.rho)

    def projection(self, h: np.ndarray) -> np.ndarray:
        """Re{M h}."""
        return (self.M @ h).real


def objective_exact(h: np.ndarray, prob: MlProblem) -> float | np.ndarray:
    """Negative log-likelihood with the Gaussian CDF; +inf if a bin has zero mass."""
    x = prob.z * prob.projection(h)
    return -np.sum(log_ndtr(math.sqrt(prob.rho) * x), axis=0)


def objective_smoothed(h: np.ndarray, prob: MlProblem, beta: float | None = None) -> float | np.ndarray:
    """Objective with Phi(x) replaced by the logistic sigma(c x)."""
    beta = prob.beta_ml if beta is None else beta
    x = prob.z * prob.projection(h)
    return np.sum(np.logaddexp(0.0, -beta * x), axis=0)


def bracket(r: np.ndarray, z: np.ndarray, beta: float) -> np.ndarray:
    """``1 - sigma(beta (q_up - r)) - sigma(beta (q_low - r))`` for 1-bit bins.

    Equals ``-z * sigma(-z beta r)``.
    """
    return -z * expit(-z * beta * r)


def gradient_wirtinger(h: np.ndarray, prob: MlProblem, beta: float | None = None,
                       scale: float | None = None) -> np.ndarray:
    """Derivative of the smoothed objective with respect to conj(h).

    With the defaults (``beta = c sqrt(rho)``, ``scale = beta / 2``) this is the
    exact gradient of :func:`objective_smoothed`.
    """
    beta = prob.beta_ml if beta is None else beta
    if not beta > 0:
        raise ValueError("beta must be positive")
    scale = beta / 2 if scale is None else scale
    g = bracket(prob.projection(h), prob.z, beta)
    return scale * (prob.M.conj().T @ g)


def gradient_exact(h: np.ndarray, prob: MlProblem) -> np.ndarray:
    """Wirtinger derivative of :func:`objective_exact`."""
    sr = math.sqrt(prob.rho)
    arg = sr * prob.z * prob.projection(h)
    # d/dx[-log Phi(s z x)] = -s z phi(s z x) / Phi(s z x)
    mills = np.exp(-0.5 * arg**2 - 0.5 * math.log(2 * math.pi) - log_ndtr(arg))
    return 0.5 * (prob.M.conj().T @ (-sr * prob.z * mills))


@dataclass(frozen=True)
class UnfoldedParams:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float).copy()
        b = np.asarray(self.beta, dtype=float).copy()
        if a.ndim != 1 or a.shape != b.shape or a.size < 1:
            raise ValueError("alpha and beta must be 1-D with equal length >= 1")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("unfolded parameters must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @classmethod
    def constant(cls, L: int, alpha: float, beta: float) -> "UnfoldedParams":
        return cls(np.full(L, float(alpha)), np.full(L, float(beta)))

    @property
    def L(self) -> int:
        return self.alpha.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "UnfoldedParams":
        L = len(theta) // 2
        return cls(theta[:L], theta[L:])


def unfolded_layer(h_prev: np.ndarray, alpha: float, beta: float, prob: MlProblem) -> np.ndarray:
    """One descent step ``h - alpha M^H bracket(beta, Re{M h})``."""
    g = bracket(prob.projection(h_prev), prob.z, beta)
    return h_prev - alpha * (prob.M.conj().T @ g)


def unfolded_forward(params: UnfoldedParams, prob: MlProblem) -> np.ndarray:
    z = np.asarray(prob.z)
    shape = (prob.M.shape[1],) + z.shape[1:]
    h = np.zeros(shape, dtype=complex)
    for a, b in zip(params.alpha, params.beta):
        h = unfolded_layer(h, a, b, prob)
    return h


# ---------------------------------------------------------------------------
# Bussgang LMMSE

class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


_JITTER = (0.0, 1e-12, 1e-10, 1e-8)


def _spd_solve(C: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve C X = B for symmetric positive-definite C, adding diagonal jitter if needed."""
    level = np.mean(np.diag(C))
    for eps in _JITTER:
        try:
            factor = scipy.linalg.cho_factor(C + eps * level * np.eye(C.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            continue
        return scipy.linalg.cho_solve(factor, B)
    raise NotPositiveDefiniteError("matrix is not positive definite even with 1e-8 relative jitter")


@dataclass(frozen=True, eq=False)
class BussgangLmmse:
    W: np.ndarray
    C_z: np.ndarray
    C_hz: np.ndarray
    Sigma_r: np.ndarray

    def estimate(self, z: np.ndarray) -> np.ndarray:
        return self.W @ z


def pre_sign_covariance(op: ForwardOperator, N0: float, Ed: float) -> np.ndarray:
    """Covariance of the real comparator input sqrt(2) Re{M h + A_w w} + d."""
    Sigma = (op.M @ op.M.conj().T).real
    if N0 > 0:
        Sigma = Sigma + N0 * (op.A_w @ op.A_w.conj().T).real
    Sigma[np.diag_indices_from(Sigma)] += Ed / 2
    return Sigma


def blmmse_build(cfg: SystemConfig, op: ForwardOperator, N0: float | None = None,
                 Ed: float | None = None) -> BussgangLmmse:
    """Linear MMSE estimator of h from the ±1 samples via the Bussgang decomposition.

    ``N0`` and ``Ed`` default to the config values.
    """
    N0 = cfg.N0 if N0 is None else N0
    Ed = cfg.Ed if Ed is None else Ed
    if not (Ed > 0 or N0 > 0):
        raise NotPositiveDefiniteError(
            f"pre-sign covariance is singular for Ed={Ed}, N0={N0} (N={cfg.N}, S={cfg.S}, Np={cfg.Np})")
    Sigma = pre_sign_covariance(op, N0, Ed)
    d = np.diag(Sigma)
    if np.any(d <= 0):
        raise NotPositiveDefiniteError(f"non-positive variance in pre-sign covariance (Ed={Ed}, N0={N0})")
    inv_std = 1.0 / np.sqrt(d)
    corr = np.clip(Sigma * np.outer(inv_std, inv_std), -1.0, 1.0)
    # arcsin is steep at 1: rounding in the diagonal would show up at 1e-8
    np.fill_diagonal(corr, 1.0)
    C_z = (2 / np.pi) * np.arcsin(corr)
    gain = np.sqrt(2 / np.pi) * inv_std
    C_hz = (op.M.conj().T * gain) / np.sqrt(2)
    try:
        # C_z symmetric: W = C_hz C_z^-1  <=>  C_z W^T = C_hz^T
        W = _spd_solve(C_z, C_hz.T).T
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(
            f"arcsine-law covariance not positive definite for Ed={Ed}, N0={N0}") from exc
    return BussgangLmmse(W=W, C_z=C_z, C_hz=C_hz, Sigma_r=Sigma)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, params: UnfoldedParams, config_hash: str) -> None:
    lines = [f"L={params.L} config_hash={config_hash}"]
    lines += [f"{a!r} {b!r}" for a, b in zip(params.alpha.tolist(), params.beta.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[UnfoldedParams, str]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"empty checkpoint {path}")
    fields = dict(item.split("=", 1) for item in text[0].split())
    L = int(fields["L"])
    rows = [line.split() for line in text[1:] if line.strip()]
    if len(rows) != L:
        raise ValueError(f"checkpoint declares L={L} but has {len(rows)} rows")
    alpha = [float(r[0]) for r in rows]
    beta = [float(r[1]) for r in rows]
    return UnfoldedParams(np.array(alpha), np.array(beta)), fields.get("config_hash", "")

