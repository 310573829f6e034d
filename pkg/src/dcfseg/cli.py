"""Experiment runner.

Subcommands:
  train        one training run: checkpoints, metric CSV, final evaluation
  eval         score a checkpoint on the synthetic test split
  ablate       tutoring-policy and/or competition-metric sweeps over seeds
  export-data  dump the synthetic dataset as PGM files

The environment variable DCF_LOG (debug|info, default info) controls
verbosity.  All outputs land under --out.

Examples:
  dcfseg train --mode supervised --labeled-fraction 1.0 --out runs/sup
  dcfseg train --config base.cfg --seed 5 --out runs/dcf5
  dcfseg eval --ckpt runs/dcf5/teacher_4000.ckpt --data-seed 5 --out runs/dcf5
  dcfseg ablate --sweep tutoring --seeds 3 --iterations 500 --out runs/tut
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import segnet, synthdata, trainer
from .config import ConfigError, RunConfig, build_config, write_resolved

log = logging.getLogger("dcfseg")

TUTORING_SWEEP = trainer.TUTORING_POLICIES
COMPETITION_SWEEP = (
    "dice", "ce", "jac", "asd", "hd95",
    "dice+jac", "dice+ce", "ce+jac", "hd95+asd", "ce+jac+dice",
)


def _setup_logging() -> None:
    level = os.environ.get("DCF_LOG", "info").strip().lower()
    logging.basicConfig(level=logging.DEBUG if level == "debug" else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=str, default=None,
                       help=f"override config key {f.name}")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    keys = {f.name for f in dataclasses.fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in keys and v is not None}


def _dataset_from_config(cfg: RunConfig) -> synthdata.Dataset:
    return synthdata.generate_dataset(cfg.data_seed, cfg.n_train, cfg.n_test, cfg.labeled_fraction)


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args.config, _overrides_from_args(args))
    if cfg.out is None:
        raise ConfigError("out", "an output directory is required (use --out)")
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)
    dataset = _dataset_from_config(cfg)
    log.info("training mode=%s seed=%d iterations=%d out=%s",
             cfg.mode, cfg.seed, cfg.iterations, out_dir)
    result = trainer.train_run(dataset, cfg, out_dir)
    e = result.final_eval
    log.info("final %s: dice=%.4f jaccard=%.4f hd95=%s asd=%s (undefined=%d)",
             result.eval_network, e.mean_dice, e.mean_jaccard,
             "nan" if e.mean_hd95 is None else f"{e.mean_hd95:.3f}",
             "nan" if e.mean_asd is None else f"{e.mean_asd:.3f}", e.undefined_count)
    print(f"run complete: {out_dir} (final {result.eval_network} dice {e.mean_dice:.4f})")
    return 0


# ---------------------------------------------------------------------------
# eval


def _print_eval(result: trainer.EvalResult) -> None:
    def num(x: Optional[float]) -> str:
        return "nan" if x is None else f"{x:.4f}"

    print(f"{'index':>6} {'dice':>8} {'jaccard':>8} {'hd95':>8} {'asd':>8}")
    for i, r in enumerate(result.reports):
        print(f"{i:>6} {num(r.dice):>8} {num(r.jaccard):>8} {num(r.hd95):>8} {num(r.asd):>8}")
    print(f"{'mean':>6} {num(result.mean_dice):>8} {num(result.mean_jaccard):>8} "
          f"{num(result.mean_hd95):>8} {num(result.mean_asd):>8}")
    print(f"undefined distances: {result.undefined_count} (excluded from means)")


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_config(args.config, _overrides_from_args(args))
    dataset = _dataset_from_config(cfg)
    if args.oracle:
        result = trainer.oracle_eval(dataset.test)
        label = "oracle"
    else:
        if args.ckpt is None:
            raise ConfigError("ckpt", "either --ckpt or --oracle is required")
        params = segnet.load_checkpoint(args.ckpt)
        result = trainer.evaluate_params(params, dataset.test)
        label = Path(args.ckpt).stem
    _print_eval(result)
    if cfg.out is not None:
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        trainer.write_eval_csv(result, out_dir / f"eval_{label}.csv")
    return 0


# ---------------------------------------------------------------------------
# ablate


def _variant_configs(sweep: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    variants: list[tuple[str, RunConfig]] = []
    if sweep in ("tutoring", "both"):
        for policy in TUTORING_SWEEP:
            variants.append((f"tutoring_{policy}",
                             dataclasses.replace(base, tutoring=policy)))
    if sweep in ("competition", "both"):
        for combo in COMPETITION_SWEEP:
            variants.append((f"competition_{combo.replace('+', '-')}",
                             dataclasses.replace(base, competition=combo)))
    return variants


def _run_one(job: tuple[str, RunConfig, int, str]) -> tuple[str, int, float, float, Optional[float], Optional[float]]:
    name, cfg, seed, out_root = job
    run_cfg = dataclasses.replace(cfg, seed=seed, data_seed=None, out=None).resolved()
    run_dir = Path(out_root) / name / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(run_cfg, run_dir)
    dataset = _dataset_from_config(run_cfg)
    result = trainer.train_run(dataset, run_cfg, run_dir)
    e = result.final_eval
    return (name, seed, e.mean_dice, e.mean_jaccard, e.mean_hd95, e.mean_asd)


def _mean_std(values: list[Optional[float]]) -> tuple[float, float, int]:
    defined = [v for v in values if v is not None and not math.isnan(v)]
    if not defined:
        return (math.nan, math.nan, 0)
    return (float(np.mean(defined)), float(np.std(defined)), len(defined))


def cmd_ablate(args: argparse.Namespace) -> int:
    base = build_config(args.config, _overrides_from_args(args))
    if base.out is None:
        raise ConfigError("out", "an output directory is required (use --out)")
    if args.seeds < 1:
        raise ConfigError("seeds", f"must be >= 1, got {args.seeds}")
    variants = _variant_configs(args.sweep, base)
    if not variants:
        raise ConfigError("sweep", f"sweep {args.sweep!r} produced no configurations")
    out_root = Path(base.out)
    out_root.mkdir(parents=True, exist_ok=True)
    seeds = [base.seed + k for k in range(args.seeds)]
    jobs = [(name, cfg, seed, str(out_root)) for name, cfg in variants for seed in seeds]
    log.info("ablation sweep %s: %d configs x %d seeds = %d runs",
             args.sweep, len(variants), len(seeds), len(jobs))

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(job) for job in jobs]

    by_variant: dict[str, list] = {name: [] for name, _ in variants}
    for name, seed, dice, jac, hd, ad in rows:
        by_variant[name].append((seed, dice, jac, hd, ad))

    summary_path = out_root / "summary.csv"
    with open(summary_path, "w", encoding="ascii", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config", "seeds", "dice_mean", "dice_std", "jaccard_mean", "jaccard_std",
                    "hd95_mean", "hd95_std", "hd95_defined", "asd_mean", "asd_std", "asd_defined"])
        header = f"{'config':<28} {'Dice(%)':>14} {'Jaccard(%)':>14} {'95HD(px)':>14} {'ASD(px)':>14}"
        print(header)
        print("-" * len(header))
        for name, _ in variants:
            runs = by_variant[name]
            dice_m, dice_s, _ = _mean_std([r[1] for r in runs])
            jac_m, jac_s, _ = _mean_std([r[2] for r in runs])
            hd_m, hd_s, hd_n = _mean_std([r[3] for r in runs])
            ad_m, ad_s, ad_n = _mean_std([r[4] for r in runs])
            w.writerow([name, len(runs), f"{dice_m:.9g}", f"{dice_s:.9g}",
                        f"{jac_m:.9g}", f"{jac_s:.9g}",
                        f"{hd_m:.9g}", f"{hd_s:.9g}", hd_n,
                        f"{ad_m:.9g}", f"{ad_s:.9g}", ad_n])
            print(f"{name:<28} {100 * dice_m:>8.2f}+-{100 * dice_s:<4.2f} "
                  f"{100 * jac_m:>8.2f}+-{100 * jac_s:<4.2f} "
                  f"{hd_m:>8.2f}+-{hd_s:<4.2f} {ad_m:>8.2f}+-{ad_s:<4.2f}")
    print(f"summary written to {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# export-data


def cmd_export_data(args: argparse.Namespace) -> int:
    cfg = build_config(args.config, _overrides_from_args(args))
    if cfg.out is None:
        raise ConfigError("out", "an output directory is required (use --out)")
    dataset = _dataset_from_config(cfg)
    count = synthdata.export_dataset(dataset, cfg.out)
    print(f"wrote {count} PGM files to {cfg.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcfseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p_eval)
    p_eval.add_argument("--ckpt", type=Path, default=None, help="checkpoint to evaluate")
    p_eval.add_argument("--oracle", action="store_true",
                        help="score ground truth against itself (sanity check)")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="tutoring / competition sweeps")
    _add_config_flags(p_ablate)
    p_ablate.add_argument("--sweep", choices=("tutoring", "competition", "both"),
                          required=True, help="which axis to sweep")
    p_ablate.add_argument("--seeds", type=int, default=3, help="seeds per configuration")
    p_ablate.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p_ablate.set_defaults(func=cmd_ablate)

    p_export = sub.add_parser("export-data", help="write the dataset as PGM files")
    _add_config_flags(p_export)
    p_export.set_defaults(func=cmd_export_data)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (segnet.CheckpointError, synthdata.ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
