"""Command-line entry point.

Every subcommand reads one INI config, works inside the run directory
``<out_dir>/<experiment>_seed<seed>`` and copies the resolved config there
as ``config.ini``. Exit codes: 0 success, 1 invalid input, 2 I/O error,
3 numerical or training failure, 4 infeasible calibration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .calibration import calibrate, coverage_loss, interval_at, read_calibration, write_calibration
from .config import ConfigError, load_config
from .encoder import (
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    write_trace,
)
from .errors import NumericalError, TrainingError
from .evaluation import (
    adaptivity_study,
    coverage_trials,
    empirical_risk,
    set_size,
    write_adaptivity_report,
    write_coverage_report,
)
from .synth_gen import STREAM_POOL, load_dataset, make_dataset, make_samples, save_dataset
from .viz import export_interval_plot_data, render_panel

log = logging.getLogger("latent_intervals")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

DATASET = "dataset.bin"
CHECKPOINT = "checkpoint.bin"


def _dump_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["run"]["seed"] = int(args.seed)
    if args.out is not None:
        cfg.values["run"]["out_dir"] = str(args.out)
    cfg.validate()
    return cfg


def _open_run(cfg):
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.ini").write_text(cfg.to_ini())
    return run


def _artifact(arg, run, name):
    path = Path(arg) if arg else run / name
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}")
    return path


def _check_shapes(params, split):
    x = split.train.x if len(split.train) else split.validation.x
    if params.input_size != x[0].size or params.dim != split.generator.dim:
        raise ValueError(
            f"checkpoint expects {params.input_size} inputs / {params.dim} latents, "
            f"dataset has {x[0].size} / {split.generator.dim}"
        )


def _lambda_hat(run, arg):
    path = Path(arg) if arg else run
    if not (path / "calibration.json").exists():
        raise FileNotFoundError(f"missing calibration results in {path}")
    return read_calibration(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg, args):
    split = make_dataset(cfg["data.n"], cfg.generator, cfg.policy, cfg.seed, cfg.ratios)
    run = _open_run(cfg)
    save_dataset(split, run / DATASET)
    log.info("wrote %s (train/calibration/validation = %d/%d/%d)", run / DATASET, *split.sizes)
    return EXIT_OK


def _train_split(cfg, split, recon_weight=None):
    tc = cfg.train_config() if recon_weight is None else cfg.train_config(recon_weight=recon_weight)

    def progress(row):
        log.info("epoch %d total %.5f", row["epoch"], row["total"])

    return train(split.train, cfg.dim_mask, tc, split.generator, log=progress)


def cmd_train(cfg, args):
    run = cfg.run_dir
    split = load_dataset(_artifact(args.dataset, run, DATASET))
    result = _train_split(cfg, split)
    run = _open_run(cfg)
    meta = {"seed": cfg.seed, "epochs": cfg["train.epochs"], "recon_weight": cfg["train.recon_weight"]}
    save_checkpoint(result.params, run / CHECKPOINT, meta)
    write_trace(result.trace, run / "loss_trace.csv")
    log.info("loss %.5f -> %.5f", result.trace[0]["total"], result.trace[-1]["total"])
    return EXIT_OK


def _load_pair(cfg, args):
    run = cfg.run_dir
    split = load_dataset(_artifact(args.dataset, run, DATASET))
    params, _ = load_checkpoint(_artifact(args.checkpoint, run, CHECKPOINT))
    _check_shapes(params, split)
    return run, split, params


def cmd_calibrate(cfg, args):
    run, split, params = _load_pair(cfg, args)
    cal = split.calibration
    if len(cal) == 0:
        raise ValueError("calibration split is empty")
    out = predict(params, cal.x)
    result = calibrate(out, cal.z, cfg.dim_mask, cfg.risk, cfg.grid, cfg.bound)
    run = _open_run(cfg)
    write_calibration(result, run)
    if not result.feasible:
        log.error("no lambda on the grid meets alpha = %g (results written)", cfg.risk.alpha)
        return EXIT_INFEASIBLE
    log.info("lambda_hat = %g", result.lambda_hat)
    return EXIT_OK


def cmd_evaluate(cfg, args):
    run, split, params = _load_pair(cfg, args)
    result = _lambda_hat(run, args.calibration)
    lam = result.lambda_hat
    mask = cfg.dim_mask
    val = split.validation
    if len(val) == 0:
        raise ValueError("validation split is empty")
    out_val = predict(params, val.x)
    out_cal = predict(params, split.calibration.x)
    summary = {
        "lambda_hat": lam,
        "n_validation": len(val),
        "validation_risk_pre": empirical_risk(out_val, val.z, 1.0, mask),
        "validation_risk_post": None,
        "calibration_risk_at_lambda_hat": None,
        "mean_set_size": None,
    }
    report = None
    if lam is not None:
        summary["validation_risk_post"] = empirical_risk(out_val, val.z, lam, mask)
        summary["calibration_risk_at_lambda_hat"] = empirical_risk(out_cal, split.calibration.z, lam, mask)
        sizes = np.atleast_1d(set_size(out_val, lam, mask))
        summary["mean_set_size"] = float(sizes.mean())
        report = adaptivity_study(
            params, lam, cfg.adaptivity_levels, cfg["adaptivity.n_per_level"],
            cfg.seed, split.generator, split.policy, mask,
        )
        summary["adaptivity_means"] = dict(zip([s.label() for s in report.levels], report.means()))
    run = _open_run(cfg)
    _dump_json(summary, run / "evaluation.json")
    loss_pre = coverage_loss(interval_at(out_val, 1.0), val.z, mask)
    loss_post = np.full(len(val), np.nan)
    size = np.full(len(val), np.nan)
    if lam is not None:
        loss_post = coverage_loss(interval_at(out_val, lam), val.z, mask)
        size = sizes
    with open(run / "evaluation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "corruption", "parameter", "loss_pre", "loss_post", "set_size"])
        for i in range(len(val)):
            c = val[i].corruption
            row = [repr(float(v[i])) for v in (loss_pre, loss_post, size)]
            w.writerow([i, c.kind, f"{c.parameter:g}", *row])
    if report is not None:
        write_adaptivity_report(report, run)
    if lam is None:
        log.error("calibration was infeasible; evaluation holds pre-calibration risk only")
        return EXIT_INFEASIBLE
    log.info("validation risk %.4f -> %.4f", summary["validation_risk_pre"], summary["validation_risk_post"])
    return EXIT_OK


def cmd_coverage(cfg, args):
    run = cfg.run_dir
    params, _ = load_checkpoint(_artifact(args.checkpoint, run, CHECKPOINT))
    pool = make_samples(cfg["coverage.pool_size"], cfg.generator, cfg.policy, cfg.seed, STREAM_POOL)
    if params.input_size != pool.x[0].size or params.dim != cfg.generator.dim:
        raise ValueError("checkpoint does not match the configured generator and corruption")
    out = predict(params, pool.x)
    report = coverage_trials(
        out, pool.z, cfg.dim_mask, cfg.risk, cfg["coverage.n_trials"], cfg.seed, cfg.grid, cfg.bound
    )
    run = _open_run(cfg)
    write_coverage_report(report, run)
    log.info("%d of %d trials above alpha", report.violations(), report.n_trials)
    return EXIT_OK


def cmd_visualize(cfg, args):
    run, split, params = _load_pair(cfg, args)
    result = _lambda_hat(run, args.calibration)
    if result.lambda_hat is None:
        log.error("calibration was infeasible; nothing to visualize")
        return EXIT_INFEASIBLE
    val = split.validation
    i = cfg["visualize.sample"]
    if not 0 <= i < len(val):
        raise ValueError(f"visualize.sample {i} outside the validation split (size {len(val)})")
    run = _open_run(cfg)
    panel_dir = run / "panels"
    render_panel(params, result.lambda_hat, val.x[i], cfg.visualize_dims, panel_dir, split.generator, cfg.dim_mask)
    out = predict(params, val.x[i:i + 1])[0]
    export_interval_plot_data(out, result.lambda_hat, val.z[i], cfg.dim_mask, panel_dir / "intervals.csv")
    log.info("wrote panels for dims %s to %s", cfg.visualize_dims, panel_dir)
    return EXIT_OK


def cmd_ablate(cfg, args):
    run = cfg.run_dir
    split = load_dataset(_artifact(args.dataset, run, DATASET))
    mask = cfg.dim_mask
    rows = []
    for c in cfg["ablate.recon_weights"]:
        log.info("recon_weight = %g", c)
        params = _train_split(cfg, split, recon_weight=c).params
        cal, val = split.calibration, split.validation
        result = calibrate(predict(params, cal.x), cal.z, mask, cfg.risk, cfg.grid, cfg.bound)
        out_val = predict(params, val.x)
        lam = result.lambda_hat
        rows.append(
            {
                "recon_weight": c,
                "validation_point_l1": float(np.abs(out_val.point - val.z)[:, mask].mean()),
                "lambda_hat": lam,
                "validation_risk_pre": empirical_risk(out_val, val.z, 1.0, mask),
                "validation_risk_post": None if lam is None else empirical_risk(out_val, val.z, lam, mask),
                "mean_set_size": None if lam is None else float(np.mean(set_size(out_val, lam, mask))),
            }
        )
    run = _open_run(cfg)
    cols = list(rows[0])
    with open(run / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[k] is None else repr(float(r[k])) for k in cols])
    _dump_json(rows, run / "ablation.json")
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "sample a synthetic dataset and split it 80/10/10"),
    "train": (cmd_train, "train the quantile encoder on the training split"),
    "calibrate": (cmd_calibrate, "choose lambda_hat on the calibration split"),
    "evaluate": (cmd_evaluate, "validation risk before/after calibration, set sizes, adaptivity"),
    "coverage": (cmd_coverage, "repeated 50-50 calibrate/evaluate trials on a fresh pool"),
    "visualize": (cmd_visualize, "render calibrated endpoint images for one validation sample"),
    "ablate": (cmd_ablate, "retrain across reconstruction weights and compare"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", type=Path, help="override run.out_dir (parent of the run directory)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="latent-intervals",
        description="Calibrated per-dimension uncertainty intervals in a generator's latent space.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name in ("train", "calibrate", "evaluate", "visualize", "ablate"):
            p.add_argument("--dataset", type=Path, help=f"dataset file (default: <run>/{DATASET})")
        if name in ("calibrate", "evaluate", "coverage", "visualize"):
            p.add_argument("--checkpoint", type=Path, help=f"encoder checkpoint (default: <run>/{CHECKPOINT})")
        if name in ("evaluate", "visualize"):
            p.add_argument("--calibration", type=Path, help="directory holding calibration.json (default: <run>)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    fn = COMMANDS[args.command][0]
    try:
        cfg = _prepare(args)
        log.info("kernel backend: %s", kernels.backend())
        return fn(cfg, args)
    except (NumericalError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
