"""NMSE sweeps over the dither level and over Es/N0.

Every grid point is an independent job. Jobs draw their training data from a
stream shared by all points of a sweep and their test data from another
shared stream, so neighbouring points see common random numbers and the
argmin over the grid is not dominated by Monte-Carlo noise. Rows are written
in grid order whatever order the jobs finish in.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model_core as mc
from . import training as tr
from .config import ConfigError, SystemConfig, lin_to_db
from .estimators import UnfoldedParams, blmmse_build, save_checkpoint
from ._kernels import StructuredOperator

CSV_HEADER = ["sweep_db", "nmse_dnn_db", "nmse_blmmse_db", "n_test", "seed", "config_hash"]
NMSE_FLOOR_DB = -100.0

SCENARIOS = {
    # name: (train model, test model, retrain per point, file stem)
    "train-M1-test-M2": (1, 2, False, "snr_m1_m2"),
    "train-M1-test-M3": (1, 3, False, "snr_m1_m3"),
    "train-M3-test-M3": (3, 3, True, "snr_m3_m3"),
}

# second element of the spawn key, one per sweep family
SWEEP_DITHER = 0
SWEEP_SNR = 1


def nmse_db(h_true: np.ndarray, h_est: np.ndarray) -> float:
    """Pooled NMSE in dB: sum of squared errors over sum of squared norms."""
    err = np.sum(np.abs(np.asarray(h_est) - np.asarray(h_true)) ** 2)
    ref = np.sum(np.abs(np.asarray(h_true)) ** 2)
    if err == 0:
        return -math.inf
    return 10.0 * math.log10(err / ref)


def format_db(x: float) -> str:
    if x < NMSE_FLOOR_DB:
        return f"<{NMSE_FLOOR_DB:g}"
    return f"{x:.6f}"


def grid(spec: tuple[float, float, int]) -> np.ndarray:
    lo, hi, count = spec
    return lo + (hi - lo) * np.arange(count) / (count - 1)


@dataclass(frozen=True)
class SweepResult:
    sweep_db: float
    nmse_dnn_db: float
    nmse_blmmse_db: float
    n_test: int
    seed: int
    config_hash: str

    def row(self) -> list[str]:
        return [f"{self.sweep_db:.6f}", format_db(self.nmse_dnn_db), format_db(self.nmse_blmmse_db),
                str(self.n_test), str(self.seed), self.config_hash]


def write_csv(path: str | Path, rows: list[SweepResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.row())


def _parse_db(text: str) -> float:
    return -math.inf if text.startswith("<") else float(text)


def read_csv(path: str | Path) -> list[SweepResult]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [SweepResult(float(r[0]), _parse_db(r[1]), _parse_db(r[2]), int(r[3]), int(r[4]), r[5])
                for r in reader]


def argmin_db(rows: list[SweepResult], estimator: str) -> SweepResult:
    key = {"dnn": lambda r: r.nmse_dnn_db, "blmmse": lambda r: r.nmse_blmmse_db}[estimator]
    return min(rows, key=key)


def read_optimum(path: str | Path, estimator: str) -> float:
    """Es/Ed (dB) at which ``estimator`` reaches its lowest NMSE in a dither sweep."""
    return argmin_db(read_csv(path), estimator).sweep_db


# ---------------------------------------------------------------------------
# jobs

@functools.lru_cache(maxsize=4)
def _operator(cfg: SystemConfig) -> mc.ForwardOperator:
    return mc.build_measurement_matrix(cfg)


def blmmse_for_link(cfg: SystemConfig, link: mc.Link, es_ed_db: float | None, fixed_ed: float | None):
    """Bussgang LMMSE estimator matched to the statistics of ``link``."""
    op = _operator(cfg)
    if link.model == 1:
        return blmmse_build(cfg, op, N0=0.0, Ed=link.Ed)
    if link.model == 2 or cfg.experiment.blmmse_model == 2:
        # Model-2 statistics at the same Es/N0 and nominal Es/Ed
        twin = mc.noisy_link(cfg, 2, lin_to_db(cfg.Es / link.N0), es_ed_db, fixed_ed)
        return blmmse_build(cfg, op, N0=twin.N0, Ed=twin.Ed)
    # Model-3 statistics: dither referred back through the expected AGC gain
    p_dbw = mc.link_rf_power_dBW(cfg, link)
    a = 10.0 ** (mc.agc_gain(p_dbw, cfg.agc) / 20.0) * link.power_scale
    return blmmse_build(cfg, op, N0=link.N0, Ed=link.Ed / a**2)


def _evaluate(cfg: SystemConfig, params: UnfoldedParams, link: mc.Link, bl, sweep: int) -> tuple[float, float]:
    op = _operator(cfg)
    rng = mc.stream_rng(cfg.master_seed, mc.STREAM_TEST, sweep)
    H, Z = mc.generate_batch(cfg, op, link, rng, cfg.experiment.test_size)
    h_dnn = tr.estimate(params, StructuredOperator(op), Z)
    h_bl = bl.estimate(Z.astype(float))
    return nmse_db(H, h_dnn), nmse_db(H, h_bl)


@dataclass
class PointOutcome:
    result: SweepResult
    params: UnfoldedParams | None
    records: list


def _dither_job(cfg: SystemConfig, es_ed_db: float) -> PointOutcome:
    with threadpool_limits(1):
        op = _operator(cfg)
        link = mc.dither_link(cfg, es_ed_db)
        res = tr.train(cfg, op, link, (mc.STREAM_TRAIN, SWEEP_DITHER))
        bl = blmmse_for_link(cfg, link, es_ed_db, None)
        dnn, blm = _evaluate(cfg, res.params, link, bl, SWEEP_DITHER)
    row = SweepResult(float(es_ed_db), dnn, blm, cfg.experiment.test_size, cfg.master_seed, cfg.hash())
    return PointOutcome(row, res.params, res.records)


def _snr_job(cfg: SystemConfig, scenario: str, snr_db: float, es_ed_db: float,
             params: UnfoldedParams | None) -> PointOutcome:
    train_model, test_model, retrain, _ = SCENARIOS[scenario]
    fixed_ed = cfg.Ed if cfg.experiment.snr_dither_policy == "fixed_abs" else None
    records = []
    with threadpool_limits(1):
        op = _operator(cfg)
        link = mc.noisy_link(cfg, test_model, snr_db, es_ed_db, fixed_ed)
        if retrain:
            res = tr.train(cfg, op, mc.noisy_link(cfg, train_model, snr_db, es_ed_db, fixed_ed),
                           (mc.STREAM_TRAIN, SWEEP_SNR))
            params, records = res.params, res.records
        bl = blmmse_for_link(cfg, link, es_ed_db, fixed_ed)
        dnn, blm = _evaluate(cfg, params, link, bl, SWEEP_SNR)
    row = SweepResult(float(snr_db), dnn, blm, cfg.experiment.test_size, cfg.master_seed, cfg.hash())
    return PointOutcome(row, params if retrain else None, records)


def _run_jobs(fn, arg_list: list[tuple], workers: int) -> list[PointOutcome]:
    if workers <= 1 or len(arg_list) <= 1:
        return [fn(*args) for args in arg_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in arg_list]
        return [f.result() for f in futures]


def _save_point(out: Path, stem: str, cfg: SystemConfig, outcome: PointOutcome) -> None:
    if outcome.params is None:
        return
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoints" / f"{stem}.txt", outcome.params, cfg.hash())
    tr.write_run_log(out / "logs" / f"{stem}.csv", outcome.records)


def write_config(out: Path, cfg: SystemConfig) -> Path:
    """Store the resolved config next to the results, keyed by its hash."""
    path = out / f"config_{cfg.hash()}.json"
    path.write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1, default=list) + "\n")
    return path


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class DitherSweep:
    rows: list[SweepResult]
    optimum_dnn_db: float
    optimum_blmmse_db: float


def run_dither_sweep(cfg: SystemConfig, out: str | Path | None = None, workers: int = 1) -> DitherSweep:
    """NMSE versus Es/Ed on noise-free data, training one estimator per grid point."""
    values = grid(cfg.experiment.dither_grid)
    outcomes = _run_jobs(_dither_job, [(cfg, float(v)) for v in values], workers)
    rows = [o.result for o in outcomes]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(out, cfg)
        for i, o in enumerate(outcomes):
            _save_point(out, f"dither_{i:02d}", cfg, o)
        write_csv(out / "dither_sweep.csv", rows)
    return DitherSweep(rows, argmin_db(rows, "dnn").sweep_db, argmin_db(rows, "blmmse").sweep_db)


def optimum_es_ed(cfg: SystemConfig, out: str | Path | None) -> float:
    """Optimal Es/Ed read from a previous dither sweep."""
    path = cfg.experiment.dither_sweep_csv
    if not path:
        if out is None:
            raise ConfigError("experiment.dither_sweep_csv", "no dither sweep output to read the optimum from")
        path = Path(out) / "dither_sweep.csv"
    try:
        return read_optimum(path, cfg.experiment.optimum_from)
    except (OSError, ValueError, StopIteration) as exc:
        raise ConfigError("experiment.dither_sweep_csv", f"cannot read optimum from {path}: {exc}") from exc


def train_reference(cfg: SystemConfig, es_ed_db: float) -> tr.TrainResult:
    """Estimator trained on noise-free data at the given Es/Ed."""
    with threadpool_limits(1):
        return tr.train(cfg, _operator(cfg), mc.dither_link(cfg, es_ed_db), (mc.STREAM_TRAIN, SWEEP_DITHER))


def run_snr_sweep(cfg: SystemConfig, scenario: str, es_ed_db: float, out: str | Path | None = None,
                  workers: int = 1, reference: tr.TrainResult | None = None) -> list[SweepResult]:
    """NMSE versus Es/N0 for one of :data:`SCENARIOS`."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    train_model, _, retrain, stem = SCENARIOS[scenario]
    params = None
    if not retrain:
        reference = reference or train_reference(cfg, es_ed_db)
        params = reference.params
    values = grid(cfg.experiment.snr_grid)
    outcomes = _run_jobs(_snr_job, [(cfg, scenario, float(v), es_ed_db, params) for v in values], workers)
    rows = [o.result for o in outcomes]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(out, cfg)
        if not retrain:
            _save_point(out, f"{stem}_train", cfg, PointOutcome(rows[0], reference.params, reference.records))
        for i, o in enumerate(outcomes):
            _save_point(out, f"{stem}_{i:02d}", cfg, o)
        write_csv(out / f"{stem}.csv", rows)
    return rows
