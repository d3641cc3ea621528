"""Command-line entry point: ``resflow {generate,train,predict,evaluate,ablate,correlate}``.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import RunConfig, config_to_dict, load_config
from .dataset import (build_inference_sample, build_samples, chrono_split, load_data_dir,
                      write_entrance_csv, write_reservation_csv)
from .errors import (ConfigConflictError, ConfigError, ParseError, ResflowError,
                     ValidationError, WindowError)
from .evalkit import BASELINES, grid_eval, lag_correlation, run_ablation, write_corr_csv
from .synthgen import generate
from .training import VARIANT_ALIASES, make_variant, train

log = logging.getLogger("resflow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SEED_ENV = "RESFLOW_SEED"


class UsageError(ResflowError):
    pass


def _seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return None


def _config(args) -> RunConfig:
    cfg = load_config(args.config).with_seed(_seed(args))
    if getattr(args, "variant", None):
        cfg = replace(cfg, variant=VARIANT_ALIASES[args.variant])
    return cfg


def _data(args, cfg: RunConfig):
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    for name in ("entrance.csv", "reservations.csv"):
        if not (data_dir / name).is_file():
            raise UsageError(f"{data_dir / name} is missing")
    return load_data_dir(data_dir, cfg.grid, cfg.generator.gates)


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    attendance, reservations = generate(cfg.generator)
    out.mkdir(parents=True, exist_ok=True)
    write_entrance_csv(attendance, out / "entrance.csv")
    write_reservation_csv(reservations, out / "reservations.csv")
    manifest = {"seed": cfg.generator.seed, "generator": config_to_dict(cfg)["generator"],
                "num_events": len(reservations)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    log.info("wrote %d days and %d reservation rows to %s", attendance.num_days,
             len(reservations), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    entrance, reservations = _data(args, cfg)
    model_cfg = make_variant(cfg.variant, base=cfg.model_config())
    samples = build_samples(entrance, reservations, cfg.window)
    train_s, test_s = chrono_split(samples, cfg.train_fraction)
    forecaster, report = train(model_cfg, train_s, cfg.train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(forecaster, out, extra={
        "variant": cfg.variant,
        "head": "adaptive_fusion" if model_cfg.use_adaptive_fusion else "plain",
        "last_train_issue": train_s[-1].issue_date.isoformat(),
        "first_test_issue": test_s[0].issue_date.isoformat(),
    })
    log_path = Path(args.log) if args.log else out.parent / "train_log.csv"
    report.write_csv(log_path)
    print(f"variant={cfg.variant} best_epoch={report.best_epoch} "
          f"stopped_epoch={report.stopped_epoch} best_val_mae={report.best_val_loss:.6g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    expected = None
    if args.config:
        cfg = _config(args)
        expected = make_variant(cfg.variant, base=cfg.model_config())
    forecaster, _ = ckpt.load_checkpoint(args.checkpoint, expected)
    spec = forecaster.config.spec
    cfg = load_config(args.config) if args.config else RunConfig()
    entrance, reservations = _data(args, replace(cfg, grid=spec.grid))
    sample = build_inference_sample(entrance, reservations, spec, args.issue_date)
    parts = forecaster.predict_parts([sample])
    channels = spec.channel_names(entrance.channels)
    cols = [c for c in ("baseline", "gate", "smoothed") if c in parts]
    T = spec.grid.slots_per_day
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_date", "slot", "channel", "yhat"] + cols)
        for c, name in enumerate(channels):
            for h, target in enumerate(d for d in sample.target_dates for _ in range(T)):
                w.writerow([target.isoformat(), h % T, name, repr(float(parts["yhat"][0, h, c]))]
                           + [repr(float(parts[k][0, h, c])) for k in cols])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    entrance, reservations = _data(args, cfg)
    ev = cfg.evaluate
    variants = [VARIANT_ALIASES[v] for v in args.variant_list] if args.variant_list else ev.variants
    baselines = args.baselines.split(",") if args.baselines else ev.baselines
    bad = [b for b in baselines if b not in BASELINES]
    if bad:
        raise UsageError(f"unknown baseline(s) {bad}; choose from {BASELINES}")
    report = grid_eval(entrance, reservations, variants, ev.input_days, ev.horizons, cfg.train,
                       ev.settings, baselines, cfg.model_config(), ev.train_fraction,
                       cfg.window.res_feature_lags, jobs=args.jobs)
    report.write_csv(args.out)
    if args.predictions:
        report.write_predictions(args.predictions)
    for r in report.rows:
        print(f"{r.variant:<26} {r.setting:<6} IW={r.input_days:<2} H={r.horizon_days:<2} "
              f"MAE={r.mae:.3f} MAPE={r.mape_pct:.2f}%")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    entrance, reservations = _data(args, cfg)
    ab = cfg.ablate
    report = run_ablation(entrance, reservations, cfg.train, ab.out_channels, ab.input_days,
                          ab.horizon_days, cfg.model_config(), jobs=args.jobs)
    report.write_csv(args.out)
    for r in report.rows:
        print(f"{r.variant:<16} MAE={r.mae:.3f} MAPE={r.mape_pct:.2f}%")
    return EXIT_OK


def cmd_correlate(args) -> int:
    cfg = _config(args)
    entrance, reservations = _data(args, cfg)
    cc = cfg.correlate
    months = list(cc.months) if cc.months else None
    mats = [lag_correlation(entrance, None, "visits", cc.visit_lags, months),
            lag_correlation(entrance, reservations, "reservations", cc.reservation_lags, months)]
    write_corr_csv(mats, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config seed")
        return p

    p = add("generate", cmd_generate, "write a synthetic entrance/reservation dataset")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train one model variant and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", choices=list(VARIANT_ALIASES))
    p.add_argument("--log", help="train log CSV (default: train_log.csv next to the checkpoint)")

    p = add("predict", cmd_predict, "forecast from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--issue-date", required=True)
    p.add_argument("--out", default="forecast.csv")
    p.add_argument("--variant", choices=list(VARIANT_ALIASES))

    p = add("evaluate", cmd_evaluate, "input-window x horizon evaluation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="report.csv")
    p.add_argument("--predictions", help="also write per-slot test predictions")
    p.add_argument("--variant", dest="variant_list", action="append",
                   choices=list(VARIANT_ALIASES), help="repeatable; defaults to the config list")
    p.add_argument("--baselines", help=f"comma-separated subset of {','.join(BASELINES)}")
    p.add_argument("--jobs", type=int, default=1)

    p = add("ablate", cmd_ablate, "train and score the five ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="ablation.csv")
    p.add_argument("--jobs", type=int, default=1)

    p = add("correlate", cmd_correlate, "monthly lag-correlation tables")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="corr.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigConflictError, ParseError, ValidationError) as exc:
        print(f"resflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ResflowError, OSError, ArithmeticError) as exc:
        print(f"resflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
