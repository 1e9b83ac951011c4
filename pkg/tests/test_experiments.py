import math

import numpy as np
import pytest

from onebit_rof import experiments as ex
from onebit_rof import model_core as mc
from onebit_rof.config import ConfigError, ExperimentParams, SystemConfig


@pytest.fixture(scope="module")
def tiny_cfg():
    # small enough that a whole sweep takes seconds
    return SystemConfig(
        N=32, S=3, Np=4, L=3,
        experiment=ExperimentParams(test_size=300, dither_grid=(-5.0, 25.0, 4), snr_grid=(0.0, 50.0, 4)),
    ).with_training(epochs=20, batch=100, lr0=0.01)


def test_nmse_examples(rng):
    H = mc.sample_channel(rng, 9, 1, 5000)
    assert ex.nmse_db(H, H) == -math.inf
    assert ex.format_db(ex.nmse_db(H, H)) == "<-100"
    assert abs(ex.nmse_db(H, np.zeros_like(H))) <= 0.1
    assert ex.nmse_db(H, 2 * H) == pytest.approx(0.0, abs=1e-12)


def test_nmse_is_pooled():
    H = np.array([[1.0, 3.0]])
    E = np.array([[0.0, 3.0]])
    # pooled: 1 / 10, not the mean of per-sample ratios (1 + 0) / 2
    assert ex.nmse_db(H, E) == pytest.approx(-10.0)


def test_grid_is_affine():
    g = ex.grid((-5.0, 25.0, 20))
    assert g[0] == -5.0 and g[-1] == 25.0 and g.size == 20
    np.testing.assert_allclose(np.diff(g), 30 / 19)


def test_csv_roundtrip(tmp_path):
    rows = [ex.SweepResult(1.5, -12.25, -11.0, 5000, 7, "abc"),
            ex.SweepResult(2.0, -math.inf, -3.0, 5000, 7, "abc")]
    path = tmp_path / "r.csv"
    ex.write_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "sweep_db,nmse_dnn_db,nmse_blmmse_db,n_test,seed,config_hash"
    assert lines[2].split(",")[1] == "<-100"
    back = ex.read_csv(path)
    assert back[0] == rows[0]
    assert back[1].nmse_dnn_db == -math.inf


def test_read_optimum(tmp_path):
    rows = [ex.SweepResult(x, d, b, 10, 1, "h") for x, d, b in
            [(0.0, -5.0, -4.0), (5.0, -9.0, -8.0), (10.0, -8.0, -8.5)]]
    ex.write_csv(tmp_path / "d.csv", rows)
    assert ex.read_optimum(tmp_path / "d.csv", "dnn") == 5.0
    assert ex.read_optimum(tmp_path / "d.csv", "blmmse") == 10.0


def test_optimum_missing_file_is_config_error(tiny_cfg, tmp_path):
    with pytest.raises(ConfigError) as err:
        ex.optimum_es_ed(tiny_cfg, tmp_path)
    assert err.value.key == "experiment.dither_sweep_csv"


def test_dither_sweep_small(tiny_cfg, tmp_path):
    res = ex.run_dither_sweep(tiny_cfg, tmp_path)
    assert [r.sweep_db for r in res.rows] == pytest.approx([-5.0, 5.0, 15.0, 25.0])
    assert all(r.n_test == 300 and r.seed == 1 and r.config_hash == tiny_cfg.hash() for r in res.rows)
    # a linear MMSE estimator never loses to the zero estimate
    assert all(r.nmse_blmmse_db <= 0.05 for r in res.rows)
    assert len(ex.read_csv(tmp_path / "dither_sweep.csv")) == 4
    assert len(list((tmp_path / "checkpoints").glob("dither_*.txt"))) == 4
    assert (tmp_path / f"config_{tiny_cfg.hash()}.json").exists()


def test_dither_sweep_independent_of_workers(tiny_cfg, tmp_path):
    ex.run_dither_sweep(tiny_cfg, tmp_path / "a", workers=1)
    ex.run_dither_sweep(tiny_cfg, tmp_path / "b", workers=2)
    for name in ["dither_sweep.csv"] + [f"checkpoints/dither_{i:02d}.txt" for i in range(4)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("scenario", sorted(ex.SCENARIOS))
def test_snr_sweep_small(tiny_cfg, tmp_path, scenario):
    rows = ex.run_snr_sweep(tiny_cfg, scenario, 5.0, tmp_path)
    assert [r.sweep_db for r in rows] == pytest.approx(list(ex.grid(tiny_cfg.experiment.snr_grid)))
    assert all(np.isfinite(r.nmse_dnn_db) and np.isfinite(r.nmse_blmmse_db) for r in rows)
    stem = ex.SCENARIOS[scenario][3]
    assert (tmp_path / f"{stem}.csv").exists()


def test_snr_sweep_unknown_scenario(tiny_cfg):
    with pytest.raises(ValueError):
        ex.run_snr_sweep(tiny_cfg, "train-M2-test-M1", 5.0)


def test_model2_blmmse_not_worse_than_zero(tiny_cfg):
    rows = ex.run_snr_sweep(tiny_cfg, "train-M1-test-M2", 5.0)
    assert all(r.nmse_blmmse_db <= 0.05 for r in rows)
