"""Command-line entry point: ``brati <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .data import (
    DatasetContainer,
    load_csv,
    prepare_dataset,
    read_container,
    synth_generate,
    write_container,
)
from .evaluation import (
    container_batch,
    evaluate,
    locf_imputer,
    mask_container,
    median_imputer,
    model_imputer,
    run_ablation,
)
from .gradcheck import run_suite
from .masking import CLI_SCENARIOS, ScenarioSpec
from .model import BratiConfig, impute
from .plotting import plot_ablation, plot_training_curve
from .trainer import TrainConfig, load_checkpoint, train

log = logging.getLogger("brati")

DEFAULT_MODEL = {"d_model": 16, "d_ffn": 32, "heads": 2, "blocks": 1, "dropout": 0.0, "bias": True}
DEFAULT_TRAIN = {"warmup_steps": 200, "batch_size": 16, "max_epochs": 150, "patience": 30}
GRADCHECK_TOLERANCE = 1e-4


def load_config(path) -> dict:
    """``{"model": {...}, "train": {...}, "ablation": {...}}`` merged over the desk defaults."""
    raw = json.loads(Path(path).read_text()) if path else {}
    return {
        "model": {**DEFAULT_MODEL, **raw.get("model", {})},
        "train": {**DEFAULT_TRAIN, **raw.get("train", {})},
        "ablation": raw.get("ablation", {}),
    }


def _splits(root: Path) -> dict[str, DatasetContainer]:
    return {name: read_container(root / name) for name in ("train", "val", "test")}


def _mask_targets(path: Path) -> list[Path]:
    if (path / "meta.json").exists():
        return [path]
    targets = [path / name for name in ("val", "test") if (path / name / "meta.json").exists()]
    if not targets:
        raise FileNotFoundError(f"{path} holds neither a container nor val/test containers")
    return targets


# ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    table = synth_generate(args.features, args.rows, args.seed)
    prepare_dataset(table, args.out, T=args.T, stride=args.stride, seed=args.seed, source="synthetic")
    print(f"wrote synthetic dataset ({args.rows} rows x {args.features} features, T={args.T}) to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    table = load_csv(args.csv, timestamp_column=args.timestamp_column)
    prepare_dataset(table, args.out, T=args.T, stride=args.stride, seed=args.seed, source=Path(args.csv).stem)
    print(f"wrote dataset from {args.csv} to {args.out}")
    return 0


def cmd_mask(args) -> int:
    spec = ScenarioSpec(CLI_SCENARIOS[args.scenario], args.rate)
    source = Path(args.data)
    for target in _mask_targets(source):
        masked = mask_container(read_container(target), spec, args.seed)
        if args.out is None:
            dest = target
        else:
            dest = Path(args.out) if target == source else Path(args.out) / target.name
        write_container(dest, masked)
        print(f"{dest}: {int(masked.indicating.sum())} cells hidden ({args.scenario}, rate {args.rate}, seed {args.seed})")
    return 0


def cmd_train(args) -> int:
    cfg_all = load_config(args.config)
    root = Path(args.data)
    splits = _splits(root)
    train_c, val_c = splits["train"], splits["val"]
    tcfg = TrainConfig.from_dict({**cfg_all["train"], **_train_overrides(args)})
    if val_c.indicating is None:
        val_c = mask_container(val_c, tcfg.scenario_spec, tcfg.seed + 1)
    cfg = BratiConfig(D=train_c.D, T=train_c.T, **cfg_all["model"])
    out = Path(args.out)
    result = train(cfg, train_c.standardized(), container_batch(val_c), tcfg, out_dir=out)
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
        "epochs_run": len(result.log),
        "stopped_early": result.stopped_early,
        "model": cfg.to_dict(),
        "train": tcfg.to_dict(),
    }
    reports = {}
    for name, container in (("val", val_c), ("test", splits["test"])):
        if container.indicating is not None:
            reports[name] = evaluate(model_imputer(result.params, cfg), container, f"brati-{cfg.variant}").to_dict()
    summary["reports"] = reports
    (out / "train_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        plot_training_curve(result.log, out / "training_curve.png")
    print(f"best epoch {result.best_epoch} val masked MAE {result.best_val_mae:.6f}; outputs in {out}")
    return 0


def _train_overrides(args) -> dict:
    out = {}
    for key in ("seed", "max_epochs", "patience", "batch_size", "warmup_steps"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "scenario", None):
        out["scenario"] = CLI_SCENARIOS[args.scenario]
    if getattr(args, "rate", None) is not None:
        out["rate"] = args.rate
    return out


def cmd_impute(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    container = read_container(args.data)
    std = container.standardizer
    mask = container.mask
    if container.indicating is not None:
        mask = mask - container.indicating
    x_hat = np.where(mask == 1, np.nan_to_num(container.standardized()), 0.0)
    imputed = std.inverse(impute(x_hat, mask, params, cfg))
    n, T, D = imputed.shape
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(container.columns)
        for row in imputed.reshape(n * T, D):
            writer.writerow([format(v, ".17g") for v in row])
    print(f"wrote {n * T} imputed rows to {out}")
    return 0


def cmd_evaluate(args) -> int:
    container = read_container(args.data)
    if args.ckpt:
        params, cfg = load_checkpoint(args.ckpt)
        imputer, name = model_imputer(params, cfg), f"brati-{cfg.variant}"
    elif args.baseline == "median":
        train_path = Path(args.train) if args.train else Path(args.data).parent / "train"
        imputer, name = median_imputer(read_container(train_path)), "median"
    else:
        imputer, name = locf_imputer(), "locf"
    report = evaluate(imputer, container, name, standardized=not args.raw)
    report.write(args.report)
    print(f"{name}: MAE {report.mae:.6f} RMSE {report.rmse:.6f} MRE {report.mre:.6f} over {report.n_evaluated} cells")
    return 0


def cmd_ablate(args) -> int:
    cfg_all = load_config(args.config)
    abl = cfg_all["ablation"]
    scenarios = [CLI_SCENARIOS[s] for s in (args.scenarios or abl.get("scenarios", list(CLI_SCENARIOS)))]
    rate = args.rate if args.rate is not None else abl.get("rate", 0.2)
    seed = args.seed if args.seed is not None else abl.get("seed", 0)
    tcfg = TrainConfig.from_dict({**cfg_all["train"], "seed": seed})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation(cfg_all["model"], tcfg, _splits(Path(args.data)), scenarios, rate, seed, out_dir=out)
    rows = []
    for res in results:
        for key, rep in res.reports.items():
            row = rep.to_dict()
            row["parameters"] = res.parameter_counts.get(key, 0)
            rows.append(row)
            Path(out / res.scenario).mkdir(exist_ok=True)
            rep.write(out / res.scenario / f"report_{key}.json")
    fields = ["scenario", "rate", "model", "mae", "rmse", "mre", "n_evaluated", "parameters", "seed", "mask_sha256"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        plot_ablation(rows, out / "ablation_mae.png", "mae")
        plot_ablation(rows, out / "ablation_rmse.png", "rmse")
    for row in rows:
        print(f"{row['scenario']}\t{row['model']}\t{row['mae']:.6f}\t{row['rmse']:.6f}\t{row['mre']:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    errors, seconds = run_suite(args.seed)
    worst = 0.0
    for name, err in errors.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:24s} max relative error {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g}) in {seconds:.1f}s")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brati", description="Bidirectional recurrent-attention time-series imputation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic train/val/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--rows", type=int, default=4800)
    p.add_argument("--T", type=int, default=24)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="window, split and standardise a CSV file")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--timestamp-column", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("mask", help="write an indicating mask (I.csv) for a container")
    p.add_argument("--data", required=True, help="container, or dataset root (masks val and test)")
    p.add_argument("--scenario", required=True, choices=sorted(CLI_SCENARIOS))
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None, help="write here instead of updating in place")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a model on a dataset root")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    p.add_argument("--scenario", choices=sorted(CLI_SCENARIOS), default=None)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--no-figures", dest="no_figures", action="store_true", help="skip training_curve.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="fill missing cells of a container with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("evaluate", help="masked MAE/RMSE/MRE of a model or baseline")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--baseline", choices=["median", "locf"])
    p.add_argument("--data", required=True)
    p.add_argument("--train", default=None, help="training container for the median baseline")
    p.add_argument("--report", required=True)
    p.add_argument("--raw", action="store_true", help="compute metrics in raw units")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train/evaluate full, single_block and average_combine variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--scenarios", nargs="+", choices=sorted(CLI_SCENARIOS), default=None)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", dest="no_figures", action="store_true", help="skip the ablation bar charts")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError, jsonschema.ValidationError) as exc:
        print(f"brati {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
