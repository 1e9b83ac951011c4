"""Command-line driver: ``onebit-rof <command> [options]``."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import model_core as mc
from . import training as tr
from .config import ConfigError, SystemConfig, load_config
from .estimators import NotPositiveDefiniteError, load_checkpoint, save_checkpoint

# the reduced training budget behind --fast
FAST_EPOCHS = 200

# test stream id for one-off evaluations, distinct from the sweeps
_EVAL_SWEEP = 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the options appear before or after the subcommand
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML configuration file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--fast", action="store_true", default=argparse.SUPPRESS,
                   help=f"reduced training budget ({FAST_EPOCHS} epochs)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes for sweeps")
    p.add_argument("--emit-plot", action="store_true", default=argparse.SUPPRESS,
                   help="also write an SVG chart per sweep")
    return p


_DEFAULTS = {"config": None, "seed": None, "out": Path("results"), "fast": False, "threads": 1, "emit_plot": False}


def _link_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=int, choices=(1, 2, 3), default=1, help="data model")
    p.add_argument("--es-ed", type=float, default=None,
                   help="Es/Ed in dB (default: from the config's Ed)")
    p.add_argument("--snr", type=float, default=None, help="Es/N0 in dB (models 2 and 3)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="onebit-rof", parents=[common],
                                     description="1-bit radio-over-fiber channel estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("sweep-dither", parents=[common], help="NMSE versus Es/Ed on noise-free data")

    p = sub.add_parser("sweep-snr", parents=[common], help="NMSE versus Es/N0")
    p.add_argument("--scenario", required=True, choices=sorted(ex.SCENARIOS) + ["all"])

    p = sub.add_parser("train", parents=[common], help="train one unfolded estimator")
    _link_args(p)

    p = sub.add_parser("evaluate", parents=[common], help="NMSE of a checkpoint and the BLMMSE baseline")
    _link_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("blmmse", parents=[common], help="build the Bussgang LMMSE matrix and report its NMSE")
    _link_args(p)

    p = sub.add_parser("selftest", parents=[common], help="run the oracle and invariant checks")
    p.add_argument("--quick", action="store_true", help="10 instead of 100 finite-difference points")
    return parser


def resolve_config(args) -> SystemConfig:
    cfg = load_config(args.config) if args.config is not None else SystemConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("master_seed", "must be an unsigned 64-bit integer")
        cfg = cfg.replace(master_seed=args.seed)
    if args.fast:
        cfg = cfg.with_training(epochs=min(cfg.training.epochs, FAST_EPOCHS))
    return cfg


def _link(cfg: SystemConfig, args) -> tuple[mc.Link, float, float]:
    """Link for the per-command options; returns (link, Es/Ed dB, abscissa dB)."""
    es_ed = args.es_ed
    if es_ed is None:
        es_ed = 10 * math.log10(cfg.Es / cfg.Ed) if cfg.Ed > 0 else math.inf
    if args.model == 1:
        return mc.dither_link(cfg, es_ed), es_ed, es_ed
    if args.snr is None:
        raise ConfigError("snr", f"model {args.model} needs --snr")
    return mc.noisy_link(cfg, args.model, args.snr, es_ed), es_ed, args.snr


def _plot(rows, path: Path, xlabel: str, title: str) -> None:
    from .plotting import plot_sweep
    plot_sweep(rows, path, xlabel, title)


def cmd_sweep_dither(cfg: SystemConfig, args) -> None:
    res = ex.run_dither_sweep(cfg, args.out, workers=args.threads)
    print(f"wrote {args.out / 'dither_sweep.csv'} ({len(res.rows)} rows)")
    print(f"optimal Es/Ed: DNN {res.optimum_dnn_db:.2f} dB, BLMMSE {res.optimum_blmmse_db:.2f} dB")
    if args.emit_plot:
        _plot(res.rows, args.out / "dither_sweep.svg", "Es/Ed [dB]", "Noise-free data")


def cmd_sweep_snr(cfg: SystemConfig, args) -> None:
    es_ed = ex.optimum_es_ed(cfg, args.out)
    print(f"using Es/Ed = {es_ed:.2f} dB")
    names = sorted(ex.SCENARIOS) if args.scenario == "all" else [args.scenario]
    reference = None
    if any(not ex.SCENARIOS[n][2] for n in names):
        reference = ex.train_reference(cfg, es_ed)
    for name in names:
        rows = ex.run_snr_sweep(cfg, name, es_ed, args.out, workers=args.threads, reference=reference)
        stem = ex.SCENARIOS[name][3]
        print(f"wrote {args.out / (stem + '.csv')} ({len(rows)} rows)")
        if args.emit_plot:
            _plot(rows, args.out / f"{stem}.svg", "Es/N0 [dB]", name)


def cmd_train(cfg: SystemConfig, args) -> None:
    link, _, _ = _link(cfg, args)
    res = tr.train(cfg, mc.build_measurement_matrix(cfg), link, (mc.STREAM_TRAIN, _EVAL_SWEEP))
    (args.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (args.out / "logs").mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "checkpoints" / "train.txt", res.params, cfg.hash())
    tr.write_run_log(args.out / "logs" / "train.csv", res.records)
    last = res.records[-1].loss if res.records else float("nan")
    print(f"trained {cfg.training.epochs} epochs, final batch loss {last:.5f}")


def _test_batch(cfg: SystemConfig, op, link):
    rng = mc.stream_rng(cfg.master_seed, mc.STREAM_TEST, _EVAL_SWEEP)
    return mc.generate_batch(cfg, op, link, rng, cfg.experiment.test_size)


def cmd_evaluate(cfg: SystemConfig, args) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    if params.L != cfg.L:
        raise ConfigError("L", f"checkpoint has {params.L} layers, config has {cfg.L}")
    link, es_ed, x = _link(cfg, args)
    op = mc.build_measurement_matrix(cfg)
    H, Z = _test_batch(cfg, op, link)
    dnn = ex.nmse_db(H, tr.estimate(params, tr.StructuredOperator(op), Z))
    bl = ex.blmmse_for_link(cfg, link, es_ed, None)
    blm = ex.nmse_db(H, bl.estimate(Z.astype(float)))
    row = ex.SweepResult(float(x), dnn, blm, cfg.experiment.test_size, cfg.master_seed, cfg.hash())
    args.out.mkdir(parents=True, exist_ok=True)
    ex.write_csv(args.out / "evaluate.csv", [row])
    print(f"NMSE: DNN {ex.format_db(dnn)} dB, BLMMSE {ex.format_db(blm)} dB")


def cmd_blmmse(cfg: SystemConfig, args) -> None:
    link, es_ed, _ = _link(cfg, args)
    op = mc.build_measurement_matrix(cfg)
    bl = ex.blmmse_for_link(cfg, link, es_ed, None)
    H, Z = _test_batch(cfg, op, link)
    args.out.mkdir(parents=True, exist_ok=True)
    np.save(args.out / "blmmse_W.npy", bl.W)
    print(f"BLMMSE NMSE {ex.format_db(ex.nmse_db(H, bl.estimate(Z.astype(float))))} dB "
          f"({cfg.experiment.test_size} samples); matrix in {args.out / 'blmmse_W.npy'}")


def cmd_selftest(cfg: SystemConfig, args) -> int:
    from .selftest import run_all
    failed = 0
    for check in run_all(cfg, quick=args.quick):
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}: {check.detail}")
        failed += not check.passed
    return 1 if failed else 0


COMMANDS = {
    "sweep-dither": cmd_sweep_dither,
    "sweep-snr": cmd_sweep_snr,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "blmmse": cmd_blmmse,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for key, value in _DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    try:
        cfg = resolve_config(args)
        if args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        return COMMANDS[args.command](cfg, args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, NotPositiveDefiniteError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
