"""SGD training, cross-validation and the baseline/ablation comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .ctt import CttModel, FusionMode, save_checkpoint
from .data import Dataset, augment, generate_synthetic, kfold_split, load_dataset, sample_rng, SynthConfig
from .objectives import MetricsReport, compute_metrics, compute_objective

log = logging.getLogger(__name__)

METRIC_KEYS = ("mae", "rmse", "acc", "f1")


class NumericError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


# -- optimizer ---------------------------------------------------------------

def lr_at(iteration: int, base_lr: float, decay: float, interval: int) -> float:
    """Step schedule: base_lr * decay ** floor(iteration / interval)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return base_lr * decay ** (iteration // interval)


def sgd_step(params: dict, state: dict, lr: float, momentum: float) -> None:
    """In-place heavy-ball update: v <- momentum * v + g;  p <- p - lr * v."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        v = state.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        state[name] = v
        p.data = p.data - lr * v


# -- training ----------------------------------------------------------------

@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)  # iteration, l_reg, l_cls, l_tot, lr
    evals: list[dict] = field(default_factory=list)  # iteration + validation metrics
    data_hash: str = ""
    checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None
    best_iteration: Optional[int] = None

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "l_reg", "l_cls", "l_tot", "lr"])
            for r in self.rows:
                w.writerow([r["iteration"], repr(r["l_reg"]), repr(r["l_cls"]), repr(r["l_tot"]), repr(r["lr"])])


@dataclass
class TrainResult:
    model: CttModel  # final parameters
    best: CttModel  # lowest validation MAE (final when there is no validation split)
    history: TrainingHistory


def batch_stream(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Consecutive batches cut from a chain of seeded per-epoch permutations."""
    rng = np.random.default_rng([seed, 0xBA7C])
    buf = np.zeros(0, dtype=int)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def split_validation(ds: Dataset, fraction: float) -> tuple[Dataset, Optional[Dataset]]:
    """Hold out the last ``floor(fraction * N)`` samples; none if that is zero."""
    n_val = int(math.floor(fraction * len(ds)))
    if n_val == 0:
        return ds, None
    idx = np.arange(len(ds))
    return ds.subset(idx[:-n_val]), ds.subset(idx[-n_val:])


def evaluate(model: CttModel, ds: Dataset, threshold: float = 0.2) -> tuple[MetricsReport, np.ndarray]:
    preds = model.predict(ds.hor, ds.ver, ds.pre_va)
    return compute_metrics(preds, ds.post_va, ds.pre_va, threshold), preds


def train_model(cfg: ExperimentConfig, train: Dataset, val: Optional[Dataset] = None, out_dir=None) -> TrainResult:
    """Train one model; every random choice derives from ``cfg.seed``."""
    opt = cfg.optim
    model = CttModel.init(cfg.model, cfg.seed)
    for p in model.params.values():
        p.requires_grad = True
    state: dict = {}
    history = TrainingHistory()
    digest = hashlib.sha256(train.fingerprint().encode())
    best, best_mae = model.copy(), math.inf
    stream = batch_stream(len(train), opt.batch_size, cfg.seed)
    policy = cfg.data.augmentation

    for it in range(opt.iterations):
        idx = next(stream)
        digest.update(idx.tobytes())
        hor, ver = train.hor[idx], train.ver[idx]
        if not policy.is_identity:
            pairs = [augment(hor[j], ver[j], policy, sample_rng(cfg.seed, it, int(i))) for j, i in enumerate(idx)]
            hor = np.stack([a for a, _ in pairs])
            ver = np.stack([b for _, b in pairs])
        pre, post = train.pre_va[idx], train.post_va[idx]
        lr = lr_at(it, opt.lr, opt.decay, opt.decay_interval)
        with T.Tape() as tape:
            pred = model(hor, ver, pre)
            l_reg, l_cls, l_tot = compute_objective(pred, post, pre, cfg.loss)
            value = l_tot.item()
            if not math.isfinite(value):
                raise NumericError(it, value)
            tape.backward(l_tot)
        sgd_step(model.params, state, lr, opt.momentum)
        history.rows.append({"iteration": it, "l_reg": l_reg.item(), "l_cls": l_cls.item(), "l_tot": value, "lr": lr})

        last = it == opt.iterations - 1
        if val is not None and ((it + 1) % opt.eval_interval == 0 or last):
            report, _ = evaluate(model, val, cfg.loss.threshold)
            history.evals.append({"iteration": it, **report.to_dict(include_gaps=False)})
            if report.mae < best_mae:
                best_mae, best = report.mae, model.copy()
                history.best_iteration = it
    if val is None:
        best = model.copy()
        history.best_iteration = opt.iterations - 1
    history.data_hash = digest.hexdigest()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        history.checkpoint = str(save_checkpoint(out / "checkpoint.json", model))
        history.best_checkpoint = str(save_checkpoint(out / "best_checkpoint.json", best, {"iteration": history.best_iteration}))
        history.write_csv(out / "history.csv")
    for p in model.params.values():
        p.grad = None
    return TrainResult(model, best, history)


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    """Manifest if configured, else ``<output_dir>/data`` (generated on first use)."""
    size = tuple(cfg.model.image_size)
    if cfg.data.manifest:
        return load_dataset(cfg.data.manifest, size)
    manifest = Path(cfg.output_dir) / "data" / "manifest.csv"
    if manifest.is_file():
        return load_dataset(manifest, size)
    return synth_dataset(cfg, Path(cfg.output_dir) / "data").dataset


def synth_dataset(cfg: ExperimentConfig, out_dir=None):
    if cfg.model.image_size[0] != cfg.model.image_size[1]:
        raise ValueError("synthetic generator produces square images")
    return generate_synthetic(
        cfg.data.synthetic_count, cfg.data.synthetic_seed, SynthConfig(image_size=cfg.model.image_size[0]), out_dir
    )


def run_training(cfg: ExperimentConfig, dataset: Optional[Dataset] = None, out_dir=None) -> TrainResult:
    """Train on a seeded shuffle of the dataset minus its validation tail."""
    ds = dataset if dataset is not None else resolve_dataset(cfg)
    order = np.random.default_rng([cfg.seed, 0x5EED]).permutation(len(ds))
    train, val = split_validation(ds.subset(order), cfg.data.val_fraction)
    return train_model(cfg, train, val, out_dir if out_dir is not None else cfg.output_dir)


# -- cross-validation --------------------------------------------------------

def aggregate(reports: Sequence[dict]) -> dict:
    """Mean and population std of each metric over folds."""
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([r[key] for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


@dataclass
class CrossValidationResult:
    folds: list[dict]
    summary: dict
    data_hashes: list[str]

    def to_dict(self) -> dict:
        return {"std_over": "folds", "folds": self.folds, "summary": self.summary}


def run_cross_validation(
    cfg: ExperimentConfig,
    dataset: Optional[Dataset] = None,
    k: Optional[int] = None,
    max_folds: Optional[int] = None,
    out_dir=None,
) -> CrossValidationResult:
    """Train on k-1 folds, test on the held-out one; optionally stop after ``max_folds`` folds."""
    ds = dataset if dataset is not None else resolve_dataset(cfg)
    k = k or cfg.folds
    splits = kfold_split(list(range(len(ds))), k, cfg.seed)
    if max_folds is not None:
        splits = splits[:max_folds]
    folds, hashes = [], []
    for f, (train_idx, test_idx) in enumerate(splits):
        train, val = split_validation(ds.subset(train_idx), cfg.data.val_fraction)
        fold_dir = Path(out_dir) / f"fold{f}" if out_dir is not None else None
        result = train_model(cfg, train, val, fold_dir)
        report, _ = evaluate(result.best, ds.subset(test_idx), cfg.loss.threshold)
        log.info("fold %d: mae=%.4f rmse=%.4f acc=%.3f f1=%.3f", f, report.mae, report.rmse, report.acc, report.f1)
        folds.append({"fold": f, "n_train": len(train), "n_test": len(test_idx), **report.to_dict(include_gaps=False)})
        hashes.append(result.history.data_hash)
    res = CrossValidationResult(folds, aggregate(folds), hashes)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "metrics.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
    return res


# -- comparison --------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    label: str
    fusion: FusionMode
    use_preop_va: bool
    acl_enabled: bool


VARIANTS = (
    Variant("single_hor", "Single view (HOR)", FusionMode.SINGLE_HOR, False, False),
    Variant("single_ver", "Single view (VER)", FusionMode.SINGLE_VER, False, False),
    Variant("late_no_attention", "No attention", FusionMode.LATE_NO_ATTENTION, False, False),
    Variant("full_attention", "Full attention", FusionMode.FULL_ATTENTION, False, False),
    Variant("cta", "CTA", FusionMode.CROSS_TOKEN, False, False),
    Variant("cta_pva", "CTA+PVA", FusionMode.CROSS_TOKEN, True, False),
    Variant("cta_pva_acl", "CTA+PVA+ACL (full model)", FusionMode.CROSS_TOKEN, True, True),
)

# Full-scale clinical reference numbers (mean, std), shown for context only.
REFERENCE_ROWS = {
    "single_hor": {"mae": (0.168, 0.014), "rmse": (0.219, 0.014), "acc": (0.805, 0.034), "f1": (0.866, 0.022)},
    "single_ver": {"mae": (0.167, 0.013), "rmse": (0.212, 0.012), "acc": (0.807, 0.034), "f1": (0.870, 0.021)},
    "late_no_attention": {"mae": (0.162, 0.012), "rmse": (0.207, 0.016), "acc": (0.821, 0.033), "f1": (0.878, 0.025)},
    "full_attention": {"mae": (0.157, 0.014), "rmse": (0.197, 0.014), "acc": (0.832, 0.024), "f1": (0.883, 0.021)},
    "cta": {"mae": (0.153, 0.013), "rmse": (0.195, 0.016), "acc": (0.845, 0.022), "f1": (0.892, 0.020)},
    "cta_pva": {"mae": (0.145, 0.012), "rmse": (0.189, 0.016), "acc": (0.867, 0.019), "f1": (0.909, 0.017)},
    "cta_pva_acl": {"mae": (0.144, 0.012), "rmse": (0.189, 0.012), "acc": (0.874, 0.017), "f1": (0.917, 0.016)},
}


def variant_config(cfg: ExperimentConfig, v: Variant) -> ExperimentConfig:
    return cfg.replace(model__fusion=v.fusion, model__use_preop_va=v.use_preop_va, loss__acl_enabled=v.acl_enabled)


@dataclass
class ComparisonResult:
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"std_over": "folds x seeds", "rows": self.rows, "reference": {k: {m: list(v) for m, v in r.items()} for k, r in REFERENCE_ROWS.items()}}

    def row(self, name: str) -> dict:
        return next(r for r in self.rows if r["name"] == name)

    def format_table(self) -> str:
        head = f"{'method':<24} " + " ".join(f"{k.upper():>17}" for k in METRIC_KEYS)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            cells = " ".join(f"{r[k]['mean']:>8.4f} ± {r[k]['std']:<6.4f}" for k in METRIC_KEYS)
            lines.append(f"{r['label']:<24} {cells}")
        lines.append("")
        lines.append("full-scale clinical reference (not reproducible here):")
        for v in VARIANTS:
            ref = REFERENCE_ROWS[v.name]
            cells = " ".join(f"{ref[k][0]:>8.3f} ± {ref[k][1]:<6.3f}" for k in METRIC_KEYS)
            lines.append(f"{v.label:<24} {cells}")
        return "\n".join(lines) + "\n"


def run_comparison(
    cfg: ExperimentConfig,
    variants: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    dataset: Optional[Dataset] = None,
    max_folds: Optional[int] = None,
    out_dir=None,
) -> ComparisonResult:
    """Cross-validate every variant on identical data, splits and batch order.

    With several ``seeds`` each seed also regenerates the synthetic dataset
    (unless ``dataset`` is given); statistics pool all folds of all seeds.
    """
    chosen = [v for v in VARIANTS if variants is None or v.name in variants]
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    data_by_seed = {}
    for s in seeds:
        if dataset is not None:
            data_by_seed[s] = dataset
        elif cfg.data.manifest:
            data_by_seed[s] = resolve_dataset(cfg)
        else:
            data_by_seed[s] = synth_dataset(cfg.replace(data__synthetic_seed=cfg.data.synthetic_seed + s)).dataset
    rows = []
    for v in chosen:
        per_fold, hashes = [], []
        for s in seeds:
            res = run_cross_validation(variant_config(cfg, v).replace(seed=s), data_by_seed[s], max_folds=max_folds)
            per_fold.extend(res.folds)
            hashes.extend(res.data_hashes)
        row = {"name": v.name, "label": v.label, **aggregate(per_fold), "n_runs": len(per_fold), "data_hashes": hashes}
        log.info("%s: mae=%.4f", v.name, row["mae"]["mean"])
        rows.append(row)
    result = ComparisonResult(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
        (out / "comparison.txt").write_text(result.format_table())
    return result
