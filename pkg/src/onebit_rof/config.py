"""System configuration and its TOML representation.

Powers live in the config as linear watts. In the TOML file every power or
gain is written as a string with an explicit unit, e.g. ``Es = "0 dBW"`` or
``gain_max = "15 dB"``; :func:`load_config` converts them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration. ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


def db_to_lin(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def lin_to_db(x: float) -> float:
    return 10.0 * math.log10(x)


@dataclass(frozen=True)
class AgcParams:
    gain_max_dB: float = 15.0
    gain_min_dB: float = -30.0
    p_low_dBW: float = -68.0
    p_high_dBW: float = -23.0
    target_dBW: float = -53.0
    # "ensemble": gain from the expected input power of the link;
    # "sample": gain from each realization's measured power
    detector: str = "ensemble"


@dataclass(frozen=True)
class TrainingParams:
    lr0: float = 0.002
    lr_decay: float = 0.95
    decay_every: int = 100
    batch: int = 1000
    epochs: int = 1000
    alpha_init: float = 0.1
    beta_init: float = 5.0


@dataclass(frozen=True)
class ExperimentParams:
    """Sweep grids and evaluation policy for the CLI experiments."""

    test_size: int = 5000
    dither_grid: tuple[float, float, int] = (-5.0, 25.0, 20)
    snr_grid: tuple[float, float, int] = (0.0, 50.0, 30)
    # fixed_ratio: Ed follows Es at the optimal Es/Ed; fixed_abs: Ed stays at cfg.Ed
    snr_dither_policy: str = "fixed_ratio"
    # statistics the Bussgang baseline is built from when testing on Model 3
    blmmse_model: int = 2
    # which estimator's optimum Es/Ed feeds the SNR sweeps
    optimum_from: str = "dnn"
    dither_sweep_csv: str = ""


@dataclass(frozen=True)
class SystemConfig:
    fc: float = 2.4e9
    fs: float = 10e9
    W: float = 240e6
    N: int = 189
    S: int = 9
    Np: int = 10
    U: int = 1
    Es: float = 1.0
    N0: float = 0.0
    Ed: float = db_to_lin(-9.2)
    agc: AgcParams = field(default_factory=AgcParams)
    comparator_threshold_t: float = 2.6e-4
    rx_power_anchor_dBW: float = -70.0
    L: int = 7
    training: TrainingParams = field(default_factory=TrainingParams)
    experiment: ExperimentParams = field(default_factory=ExperimentParams)
    pilot_seed: int = 20240501
    master_seed: int = 1

    def __post_init__(self):
        validate(self)

    def replace(self, **changes: Any) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def with_training(self, **changes: Any) -> "SystemConfig":
        return dataclasses.replace(self, training=dataclasses.replace(self.training, **changes))

    @property
    def n_obs(self) -> int:
        """Length of the vectorized observation, N * Np."""
        return self.N * self.Np

    @property
    def n_unknowns(self) -> int:
        return self.S * self.U

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Short stable digest of every field (seed included)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def validate(cfg: SystemConfig) -> None:
    if cfg.S % 2 != 1:
        raise ConfigError("S", f"must be odd, got {cfg.S}")
    if not 1 <= cfg.S <= cfg.N:
        raise ConfigError("S", f"must satisfy 1 <= S <= N={cfg.N}, got {cfg.S}")
    if cfg.Np < 1:
        raise ConfigError("Np", "must be >= 1")
    if cfg.U < 1:
        raise ConfigError("U", "must be >= 1")
    if cfg.fs <= 0:
        raise ConfigError("fs", "must be positive")
    if cfg.fs < 2 * cfg.fc:
        raise ConfigError("fs", f"must be >= 2*fc = {2 * cfg.fc:g}")
    if cfg.Es <= 0:
        raise ConfigError("Es", "must be positive")
    if cfg.N0 < 0:
        raise ConfigError("N0", "must be non-negative")
    if cfg.Ed < 0:
        raise ConfigError("Ed", "must be non-negative")
    if cfg.L < 1:
        raise ConfigError("L", "must be >= 1")
    if not cfg.agc.p_low_dBW < cfg.agc.p_high_dBW:
        raise ConfigError("agc.p_low", "must be below agc.p_high")
    if cfg.agc.detector not in ("ensemble", "sample"):
        raise ConfigError("agc.detector", "must be 'ensemble' or 'sample'")
    if cfg.comparator_threshold_t < 0:
        raise ConfigError("comparator_threshold_t", "must be non-negative")
    tr = cfg.training
    if tr.batch < 1:
        raise ConfigError("training.batch", "must be >= 1")
    if tr.epochs < 0:
        raise ConfigError("training.epochs", "must be >= 0")
    if tr.decay_every < 1:
        raise ConfigError("training.decay_every", "must be >= 1")
    ex = cfg.experiment
    if ex.test_size < 1:
        raise ConfigError("experiment.test_size", "must be >= 1")
    for name in ("dither_grid", "snr_grid"):
        lo, hi, count = getattr(ex, name)
        if count < 2 or not lo < hi:
            raise ConfigError(f"experiment.{name}", "needs count >= 2 and lo < hi")
    if ex.snr_dither_policy not in ("fixed_ratio", "fixed_abs"):
        raise ConfigError("experiment.snr_dither_policy", "must be 'fixed_ratio' or 'fixed_abs'")
    if ex.blmmse_model not in (2, 3):
        raise ConfigError("experiment.blmmse_model", "must be 2 or 3")
    if ex.optimum_from not in ("dnn", "blmmse"):
        raise ConfigError("experiment.optimum_from", "must be 'dnn' or 'blmmse'")


# ---------------------------------------------------------------------------
# TOML loading

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|-?inf)\s*([A-Za-z]+)\s*$")

# key -> (unit, section attribute or None for top level)
_POWER_KEYS = {"Es": "dBW", "N0": "dBW", "Ed": "dBW", "rx_power_anchor": "dBW"}
_AGC_KEYS = {
    "gain_max": "dB",
    "gain_min": "dB",
    "p_low": "dBW",
    "p_high": "dBW",
    "target": "dBW",
}
_PLAIN_SYSTEM = {"fc": float, "fs": float, "W": float, "N": int, "S": int, "Np": int, "U": int, "L": int,
                 "comparator_threshold_t": float, "pilot_seed": int, "master_seed": int}
_TRAINING = {f.name: f.type for f in dataclasses.fields(TrainingParams)}


def parse_quantity(key: str, value: Any, unit: str) -> float:
    """Parse ``"<number> <unit>"``; the unit must match exactly."""
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string with unit suffix '{unit}', got {value!r}")
    m = _QUANTITY.match(value)
    if m is None or m.group(2) != unit:
        raise ConfigError(key, f"expected '<number> {unit}', got {value!r}")
    return float(m.group(1))


def _cast(key: str, value: Any, kind) -> Any:
    if kind in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    return float(value)


def config_from_mapping(doc: dict) -> SystemConfig:
    known = {"system", "agc", "training", "experiment"}
    for section in doc:
        if section not in known:
            raise ConfigError(section, "unknown section")
    kwargs: dict[str, Any] = {}
    for key, value in doc.get("system", {}).items():
        if key in _POWER_KEYS:
            level = parse_quantity(f"system.{key}", value, _POWER_KEYS[key])
            if key == "rx_power_anchor":
                kwargs["rx_power_anchor_dBW"] = level
            else:
                kwargs[key] = 0.0 if level == -math.inf else db_to_lin(level)
        elif key in _PLAIN_SYSTEM:
            kwargs[key] = _cast(f"system.{key}", value, _PLAIN_SYSTEM[key])
        else:
            raise ConfigError(f"system.{key}", "unknown key")

    agc = {}
    for key, value in doc.get("agc", {}).items():
        if key == "detector":
            if not isinstance(value, str):
                raise ConfigError("agc.detector", "expected a string")
            agc["detector"] = value
            continue
        if key not in _AGC_KEYS:
            raise ConfigError(f"agc.{key}", "unknown key")
        agc[f"{key}_{_AGC_KEYS[key]}"] = parse_quantity(f"agc.{key}", value, _AGC_KEYS[key])
    kwargs["agc"] = AgcParams(**agc)

    training = {}
    for key, value in doc.get("training", {}).items():
        if key not in _TRAINING:
            raise ConfigError(f"training.{key}", "unknown key")
        training[key] = _cast(f"training.{key}", value, _TRAINING[key])
    kwargs["training"] = TrainingParams(**training)

    experiment = {}
    for key, value in doc.get("experiment", {}).items():
        full = f"experiment.{key}"
        if key in ("dither_grid", "snr_grid"):
            if not isinstance(value, list) or len(value) != 3:
                raise ConfigError(full, "expected [lo, hi, count]")
            experiment[key] = (_cast(full, value[0], float), _cast(full, value[1], float),
                               _cast(full, value[2], int))
        elif key in ("test_size", "blmmse_model"):
            experiment[key] = _cast(full, value, int)
        elif key in ("snr_dither_policy", "optimum_from", "dither_sweep_csv"):
            if not isinstance(value, str):
                raise ConfigError(full, "expected a string")
            experiment[key] = value
        else:
            raise ConfigError(full, "unknown key")
    kwargs["experiment"] = ExperimentParams(**experiment)
    return SystemConfig(**kwargs)


def load_config(path: str | Path) -> SystemConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    return config_from_mapping(doc)
