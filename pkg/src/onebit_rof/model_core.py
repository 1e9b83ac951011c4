"""Uplink observation model for 1-bit radio-over-fiber fronthaul.

The three data models:

1. ``z = sgn(sqrt(2) Re{M h} + d)``, noise-free.
2. ``z = sgn(sqrt(2) Re{U F (P h + w)} + d)``, with additive noise.
3. Model 2 passed through an AGC and a comparator that outputs random bits
   when its input magnitude is below a threshold.

Arrays of channels or observations may carry a trailing batch axis: ``h`` is
``(S*U,)`` or ``(S*U, B)``, ``z`` is ``(N*Np,)`` or ``(N*Np, B)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AgcParams, SystemConfig, db_to_lin, lin_to_db

# RNG stream identifiers, used as the first element of a spawn key.
STREAM_PILOT = 0
STREAM_TRAIN = 1
STREAM_TEST = 2
STREAM_SELFTEST = 3


def stream_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for stream ``key`` under ``master_seed``."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def sgn(x: np.ndarray) -> np.ndarray:
    """Sign with sgn(0) = +1, returned as int8."""
    return np.where(x >= 0, 1, -1).astype(np.int8)


# ---------------------------------------------------------------------------
# deterministic operators

def occupied_bins(N: int, S: int) -> np.ndarray:
    """Indices {0..(S-1)/2, N-(S-1)/2..N-1} of the occupied IDFT columns."""
    if S % 2 != 1 or S < 1 or S > N:
        raise ValueError(f"invalid dimensions: need odd S <= N, got N={N}, S={S}")
    half = (S - 1) // 2
    return np.concatenate([np.arange(half + 1), np.arange(N - half, N)])


def build_fourier_operator(N: int, S: int) -> np.ndarray:
    """Unitary N x N IDFT matrix restricted to the occupied bins (N x S)."""
    k = occupied_bins(N, S)
    n = np.arange(N)
    return np.exp(2j * np.pi * np.outer(n, k) / N) / np.sqrt(N)


def build_upconversion(N: int, fc: float, fs: float) -> np.ndarray:
    if fs <= 0:
        raise ValueError("fs must be positive")
    return np.exp(2j * np.pi * (fc / fs) * np.arange(N))


def build_pilots(cfg: SystemConfig) -> np.ndarray:
    """QPSK pilot matrix (U x Np), drawn once from ``cfg.pilot_seed``."""
    rng = stream_rng(cfg.pilot_seed, STREAM_PILOT)
    k = rng.integers(0, 4, size=(cfg.U, cfg.Np))
    return np.sqrt(cfg.Es) * np.exp(1j * np.pi * (2 * k + 1) / 4)


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    """Measurement matrix ``M = (I ⊗ diag(u)) (I ⊗ F_inv) (P^T ⊗ I_S)`` and its factors.

    ``A_w = (I ⊗ diag(u)) (I ⊗ F_inv)`` maps the noise vector to the
    complex envelope at RF.
    """

    F_inv: np.ndarray
    u: np.ndarray
    P: np.ndarray
    M: np.ndarray
    A_w: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.M.shape[0]

    @property
    def n_unknowns(self) -> int:
        return self.M.shape[1]

    @property
    def N(self) -> int:
        return self.F_inv.shape[0]

    @property
    def S(self) -> int:
        return self.F_inv.shape[1]

    @property
    def Np(self) -> int:
        return self.P.shape[1]


def build_measurement_matrix(cfg: SystemConfig, P: np.ndarray | None = None) -> ForwardOperator:
    if P is None:
        P = build_pilots(cfg)
    P = np.asarray(P, dtype=complex)
    if P.shape != (cfg.U, cfg.Np):
        raise ValueError(f"pilot matrix must be {cfg.U}x{cfg.Np}, got {P.shape}")
    F_inv = build_fourier_operator(cfg.N, cfg.S)
    u = build_upconversion(cfg.N, cfg.fc, cfg.fs)
    eye_np = np.eye(cfg.Np)
    A_w = np.kron(eye_np, u[:, None] * F_inv)
    P_tilde = np.kron(P.T, np.eye(cfg.S))
    M = A_w @ P_tilde
    for a in (F_inv, u, P, M, A_w):
        a.setflags(write=False)
    return ForwardOperator(F_inv=F_inv, u=u, P=P, M=M, A_w=A_w)


# ---------------------------------------------------------------------------
# random inputs

def sample_channel(rng: np.random.Generator, S: int, U: int, size: int | None = None) -> np.ndarray:
    """i.i.d. CN(0, 1) channel coefficients, shape (S*U,) or (S*U, size)."""
    shape = (S * U,) if size is None else (S * U, size)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)


def sample_noise(rng: np.random.Generator, length: int, N0: float, size: int | None = None) -> np.ndarray:
    shape = (length,) if size is None else (length, size)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(N0 / 2)


def sample_dither(rng: np.random.Generator, length: int, Ed: float, size: int | None = None) -> np.ndarray:
    """Real Gaussian dither with variance Ed/2. Ed = 0 gives zeros."""
    shape = (length,) if size is None else (length, size)
    if Ed == 0:
        return np.zeros(shape)
    return rng.standard_normal(shape) * np.sqrt(Ed / 2)


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class Observation:
    """±1 samples and the quantization-bin thresholds they imply."""

    z: np.ndarray

    @property
    def q_low(self) -> np.ndarray:
        return np.where(self.z > 0, 0.0, -np.inf)

    @property
    def q_up(self) -> np.ndarray:
        return np.where(self.z > 0, np.inf, 0.0)


def rf_waveform(op: ForwardOperator, h: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Real RF samples ``sqrt(2) Re{U F (P h + w)}`` before the comparator.

    Evaluated per pilot signal as ``diag(u) F_inv (H p + w_p)`` rather than
    through the dense ``M``.
    """
    h = np.asarray(h)
    G = op.u[:, None] * op.F_inv
    U, Np, N, S = op.P.shape[0], op.Np, op.N, op.S
    C = np.matmul(G, h.reshape(U, S, -1))
    y = np.zeros((Np, N, C.shape[2]))
    for k in range(U):
        y += op.P[k].real[:, None, None] * C[k].real - op.P[k].imag[:, None, None] * C[k].imag
    if w is not None:
        y += np.matmul(G, np.asarray(w).reshape(Np, S, -1)).real
    y *= np.sqrt(2)
    return y.reshape(N * Np, *h.shape[1:])


def simulate_model1(op: ForwardOperator, h: np.ndarray, d: np.ndarray) -> Observation:
    return Observation(sgn(rf_waveform(op, h) + d))


def simulate_model2(cfg: SystemConfig, op: ForwardOperator, h: np.ndarray, w: np.ndarray,
                    d: np.ndarray) -> Observation:
    return Observation(sgn(rf_waveform(op, h, w) + d))


def measure_rf_power(y_rf: np.ndarray) -> np.ndarray | float:
    """Sample-average power over the observation axis (axis 0)."""
    y_rf = np.asarray(y_rf, dtype=float)
    return np.mean(y_rf**2, axis=0)


def agc_gain(p_rf_dBW, agc: AgcParams = AgcParams()):
    """AGC gain in dB: saturates at the maximum/minimum outside its range."""
    p = np.asarray(p_rf_dBW, dtype=float)
    g = np.where(p < agc.p_low_dBW, agc.gain_max_dB,
                 np.where(p > agc.p_high_dBW, agc.gain_min_dB, -p + agc.target_dBW))
    return float(g) if g.ndim == 0 else g


def apply_comparator_flips(rng: np.random.Generator, v: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    """Replace entries with |v| < t by independent uniform ±1 draws."""
    coin = np.where(rng.random(np.shape(v)) < 0.5, 1, -1).astype(np.int8)
    return np.where(np.abs(v) < t, coin, z).astype(np.int8)


def simulate_model3(cfg: SystemConfig, op: ForwardOperator, h: np.ndarray, w: np.ndarray, d: np.ndarray,
                    rng: np.random.Generator, power_scale: float = 1.0,
                    gain_dB: float | None = None, t: float | None = None) -> Observation:
    """Model 2 with AGC and comparator bit flips.

    Without ``gain_dB`` the AGC reacts to the measured power of each
    realization; :func:`generate_batch` passes the ensemble gain instead
    when ``cfg.agc.detector == "ensemble"``.

    ``power_scale`` converts the model-unit waveform to volts so that its
    power reads in absolute dBW (see :func:`rf_power_scale`); ``gain_dB``
    bypasses the AGC.
    """
    y = rf_waveform(op, h, w)
    if power_scale != 1.0:
        y = power_scale * y
    if gain_dB is None:
        p_rf = measure_rf_power(y)
        with np.errstate(divide="ignore"):
            p_dbw = 10.0 * np.log10(p_rf)
        a = 10.0 ** (np.asarray(agc_gain(p_dbw, cfg.agc)) / 20.0)
    else:
        a = 10.0 ** (gain_dB / 20.0)
    v = a * y + d
    t = cfg.comparator_threshold_t if t is None else t
    return Observation(apply_comparator_flips(rng, v, sgn(v), t))


def signal_power(cfg: SystemConfig) -> float:
    """Expected per-sample RF power of the noise-free signal, U*Es*S/N."""
    return cfg.U * cfg.Es * cfg.S / cfg.N


def expected_rf_power(cfg: SystemConfig, N0: float) -> float:
    """Ensemble per-sample power of the model-unit RF waveform, (U*Es + N0)*S/N."""
    return (cfg.U * cfg.Es + N0) * cfg.S / cfg.N


def rf_power_scale(cfg: SystemConfig, snr_db: float) -> float:
    """Amplitude factor taking model units to volts at Es/N0 = ``snr_db``.

    The noise level is the fixed reference: the received power is the anchor
    at 0 dB and grows with the signal, P_rf = anchor * (U*snr + 1) / (U + 1).
    """
    snr = db_to_lin(snr_db)
    target = db_to_lin(cfg.rx_power_anchor_dBW) * (cfg.U * snr + 1) / (cfg.U + 1)
    return float(np.sqrt(target / expected_rf_power(cfg, cfg.Es / snr)))


def model3_dither_power(cfg: SystemConfig, es_ed_db: float) -> float:
    """Dither power at the comparator matching Es/Ed at the AGC target power.

    The AGC target is converted to an equivalent symbol energy with the same
    U*S/N factor that relates Es to per-sample RF power.
    """
    es_equiv = db_to_lin(cfg.agc.target_dBW) * cfg.N / (cfg.S * cfg.U)
    return es_equiv / db_to_lin(es_ed_db)


# ---------------------------------------------------------------------------
# batched link simulation

@dataclass(frozen=True)
class Link:
    """Parameters of one data model for batch generation.

    ``model`` is 1, 2 or 3. ``N0`` and ``Ed`` are in the same units as
    ``cfg.Es``; for Model 3, ``Ed`` is the absolute dither power at the
    comparator and ``power_scale`` the model-to-volts factor.
    """

    model: int
    Ed: float
    N0: float = 0.0
    power_scale: float = 1.0
    gain_dB: float | None = None
    t: float | None = None

    def __post_init__(self):
        if self.model not in (1, 2, 3):
            raise ValueError(f"unknown data model {self.model}")


def dither_link(cfg: SystemConfig, es_ed_db: float) -> Link:
    """Model 1 at a given Es/Ed."""
    return Link(model=1, Ed=cfg.Es / db_to_lin(es_ed_db))


def noisy_link(cfg: SystemConfig, model: int, snr_db: float, es_ed_db: float,
               fixed_ed: float | None = None) -> Link:
    """Model 2 or 3 at Es/N0 = ``snr_db`` with the dither set from Es/Ed."""
    N0 = cfg.Es / db_to_lin(snr_db)
    if model == 2:
        Ed = cfg.Es / db_to_lin(es_ed_db) if fixed_ed is None else fixed_ed
        return Link(model=2, Ed=Ed, N0=N0)
    if model == 3:
        return Link(model=3, Ed=model3_dither_power(cfg, es_ed_db), N0=N0,
                    power_scale=rf_power_scale(cfg, snr_db))
    raise ValueError(f"model {model} has no noise")


def generate_batch(cfg: SystemConfig, op: ForwardOperator, link: Link, rng: np.random.Generator,
                   size: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``size`` channels and their observations. Returns (H, Z)."""
    H = sample_channel(rng, cfg.S, cfg.U, size)
    if link.model == 1:
        D = sample_dither(rng, op.n_obs, link.Ed, size)
        return H, simulate_model1(op, H, D).z
    W = sample_noise(rng, cfg.S * cfg.Np, link.N0, size)
    D = sample_dither(rng, op.n_obs, link.Ed, size)
    if link.model == 2:
        return H, simulate_model2(cfg, op, H, W, D).z
    gain = link.gain_dB
    if gain is None and cfg.agc.detector == "ensemble":
        gain = agc_gain(link_rf_power_dBW(cfg, link), cfg.agc)
    obs = simulate_model3(cfg, op, H, W, D, rng, power_scale=link.power_scale, gain_dB=gain, t=link.t)
    return H, obs.z


def link_rf_power_dBW(cfg: SystemConfig, link: Link) -> float:
    """Expected P_rf in dBW for a Model 3 link (signal plus noise)."""
    return lin_to_db(expected_rf_power(cfg, link.N0) * link.power_scale**2)


# ---------------------------------------------------------------------------
# observation dumps: "OBFZ1", u32 version, u32 N, u32 Np, u32 count, packed bits

_MAGIC = b"OBFZ1"
_VERSION = 1
_HEADER = struct.Struct("<5sIIII")


def write_observations(path: str | Path, z: np.ndarray, N: int, Np: int) -> None:
    """Write ±1 observations (N*Np, count) bit-packed LSB-first; +1 -> 1."""
    z = np.asarray(z)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != N * Np:
        raise ValueError(f"observation length {z.shape[0]} != N*Np = {N * Np}")
    bits = (z.T > 0).astype(np.uint8).ravel()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, N, Np, z.shape[1]))
        fh.write(np.packbits(bits, bitorder="little").tobytes())


def read_observations(path: str | Path) -> tuple[np.ndarray, int, int]:
    """Inverse of :func:`write_observations`. Returns (z, N, Np), z as (N*Np, count) int8."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated observation file")
    magic, version, N, Np, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}")
    n_bits = N * Np * count
    payload = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    if payload.size * 8 < n_bits:
        raise ValueError("truncated observation payload")
    bits = np.unpackbits(payload, bitorder="little")[:n_bits]
    z = np.where(bits.reshape(count, N * Np).T > 0, 1, -1).astype(np.int8)
    return z, N, Np
