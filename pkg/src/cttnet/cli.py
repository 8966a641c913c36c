"""Command-line entry point: ``cttnet <command> --config cfg.json``.

Exit codes: 0 success, 2 invalid config content, 3 data error, 4 numeric
failure (non-finite loss or failed gradient check), 64 unknown flag or
command, 66 config file not found.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .ctt import CttModel, load_checkpoint
from .data import DataError
from .gradcheck import check_gradients, jitter
from .objectives import compute_metrics, compute_objective, format_distribution, gap_distribution
from .train import NumericError, evaluate, resolve_dataset, run_comparison, run_cross_validation, run_training, synth_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_USAGE = 64
EXIT_NO_CONFIG = 66

log = logging.getLogger("cttnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_data(cfg: ExperimentConfig, args) -> int:
    data = synth_dataset(cfg, _out(cfg) / "data")
    print(f"wrote {len(data.dataset)} samples to {data.manifest}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    result = run_training(cfg)
    out = _out(cfg)
    summary = {
        "final": result.history.rows[-1],
        "best_iteration": result.history.best_iteration,
        "validation": result.history.evals,
        "data_hash": result.history.data_hash,
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"checkpoint: {result.history.checkpoint}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    ds = resolve_dataset(cfg)
    report, preds = evaluate(model, ds, cfg.loss.threshold)
    (out / "evaluation.json").write_text(report.to_json() + "\n")
    with (out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "pred", "true", "pre_va"])
        for sid, p, y, x in zip(ds.ids, preds, ds.post_va, ds.pre_va):
            w.writerow([sid, repr(float(p)), repr(float(y)), repr(float(x))])
    print(f"MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  ACC {report.acc:.3f}  F1 {report.f1:.3f}")
    return EXIT_OK


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    preds, trues = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"pred", "true"} <= set(reader.fieldnames):
            raise DataError(f"{path}: needs 'pred' and 'true' columns")
        for i, row in enumerate(reader, start=1):
            try:
                preds.append(float(row["pred"]))
                trues.append(float(row["true"]))
            except ValueError:
                raise DataError(f"{path}: row {i} is not numeric") from None
    if not preds:
        raise DataError(f"{path}: no predictions")
    return np.array(preds), np.array(trues)


def cmd_export_dist(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    preds, trues = read_predictions(args.predictions or out / "predictions.csv")
    dist = gap_distribution(preds, trues)
    (out / "dist.json").write_text(json.dumps(dist, indent=2) + "\n")
    text = format_distribution(dist)
    (out / "dist.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_cross_validate(cfg: ExperimentConfig, args) -> int:
    res = run_cross_validation(cfg, k=args.folds, max_folds=args.max_folds, out_dir=_out(cfg))
    for key, s in res.summary.items():
        print(f"{key.upper():>5}: {s['mean']:.4f} ± {s['std']:.4f}")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    variants = args.variants.split(",") if args.variants else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    res = run_comparison(cfg, variants=variants, seeds=seeds, max_folds=args.max_folds, out_dir=_out(cfg))
    print(res.format_table(), end="")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    data = synth_dataset(cfg.replace(data__synthetic_count=args.samples)).dataset
    model = CttModel.init(cfg.model, cfg.seed)
    jitter(model.params, cfg.seed)

    def loss():
        pred = model(data.hor, data.ver, data.pre_va)
        return compute_objective(pred, data.post_va, data.pre_va, cfg.loss)[2]

    report = check_gradients(loss, model.params, max_elements=args.max_elements, seed=cfg.seed)
    out = _out(cfg)
    (out / "gradcheck.json").write_text(json.dumps({"max_error": report.max_error, "errors": report.errors}, indent=2) + "\n")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {report.max_error:.3e} ({report.worst}) over {len(report.errors)} tensors")
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate the synthetic two-view dataset"),
    "train": (cmd_train, "train one model"),
    "evaluate": (cmd_evaluate, "score a checkpoint and write predictions.csv"),
    "export-dist": (cmd_export_dist, "grouped VA-gap statistics from predictions.csv"),
    "cross-validate": (cmd_cross_validate, "k-fold cross-validation"),
    "compare": (cmd_compare, "baselines and ablations on identical data"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every parameter gradient"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cttnet", description="Multi-view cross-token transformer experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="defaults to <output_dir>/checkpoint.json")
        if name == "export-dist":
            p.add_argument("--predictions", help="defaults to <output_dir>/predictions.csv")
        if name in ("cross-validate", "compare"):
            p.add_argument("--max-folds", type=int, default=None, help="stop after this many folds")
        if name == "cross-validate":
            p.add_argument("--folds", type=int, default=None)
        if name == "compare":
            p.add_argument("--variants", help="comma-separated subset of variant names")
            p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
        if name == "gradcheck":
            p.add_argument("--samples", type=int, default=2)
            p.add_argument("--max-elements", type=int, default=None, help="check at most this many entries per tensor")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cttnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not Path(args.config).is_file():
        print(f"cttnet: config file not found: {args.config}", file=sys.stderr)
        return EXIT_NO_CONFIG
    try:
        cfg = load_config(args.config)
        handler, _ = COMMANDS[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"cttnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"cttnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"cttnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
