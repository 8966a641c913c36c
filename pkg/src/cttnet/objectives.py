"""Training objectives, recovery labels and evaluation metrics.

A sample counts as *recovered* (label 1) when postoperative VA exceeds
preoperative VA by strictly more than the threshold (0.2 by default).  The
auxiliary classification loss is a hinge on the signed margin
``pred - pre_va - threshold``: positives are penalised when the margin is
negative, negatives when it is positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

RECOVERY_THRESHOLD = 0.2
HIGH_VA_SPLIT = 0.7
STAT_KEYS = ("min", "q1", "median", "q3", "max")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 2.0
    threshold: float = RECOVERY_THRESHOLD
    acl_enabled: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.threshold <= 0:
            raise ValueError("recovery threshold must be positive")


def _vector(x, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    if arr.size == 0:
        raise ValueError(f"{name}: empty batch")
    return arr


def regression_loss(pred, true) -> Tensor:
    """Mean squared error, differentiable w.r.t. ``pred``."""
    pred = T.as_tensor(pred)
    y = _vector(true, "true")
    _vector(pred, "pred")
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: pred {pred.shape}, true {y.shape}")
    return T.mean(T.square(pred - y))


def recovery_label(post_va, pre_va, threshold: float = RECOVERY_THRESHOLD):
    """1 where ``post_va - pre_va > threshold`` (strict), else 0.  Works on scalars and arrays."""
    diff = np.asarray(post_va, dtype=np.float64) - np.asarray(pre_va, dtype=np.float64)
    out = (diff > threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def auxiliary_classification_loss(pred, pre_va, labels, threshold: float = RECOVERY_THRESHOLD) -> Tensor:
    """mean_i [ Y_i * relu(-m_i) + (1 - Y_i) * relu(m_i) ],  m_i = pred_i - pre_i - threshold."""
    pred = T.as_tensor(pred)
    x = _vector(pre_va, "pre_va")
    y = _vector(labels, "labels")
    _vector(pred, "pred")
    if not (pred.shape == x.shape == y.shape):
        raise ValueError(f"length mismatch: pred {pred.shape}, pre_va {x.shape}, labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    margin = pred - (x + threshold)
    terms = T.mul(T.relu(-margin), y) + T.mul(T.relu(margin), 1.0 - y)
    return T.mean(terms)


def total_loss(reg: Tensor, cls: Optional[Tensor], lam: float, acl_enabled: bool = True) -> Tensor:
    """reg + lam * cls.  With the auxiliary term off (or lam == 0) this is ``reg`` itself."""
    if not acl_enabled or lam == 0 or cls is None:
        return reg
    return reg + T.scale(cls, lam)


def compute_objective(pred: Tensor, true, pre_va, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(L_reg, L_cls, L_tot) for one batch; L_cls is always computed for logging."""
    reg = regression_loss(pred, true)
    labels = recovery_label(true, pre_va, cfg.threshold)
    if cfg.acl_enabled and cfg.lam != 0:
        cls = auxiliary_classification_loss(pred, pre_va, labels, cfg.threshold)
    else:
        cls = Tensor(auxiliary_classification_loss(pred.data, pre_va, labels, cfg.threshold).data)
    return reg, cls, total_loss(reg, cls, cfg.lam, cfg.acl_enabled)


# -- metrics -----------------------------------------------------------------

def quantile_stats(values: Sequence[float]) -> dict[str, float]:
    """Boxplot five-number summary; quartiles by linear interpolation of order statistics."""
    v = np.asarray(values, dtype=np.float64)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return dict(zip(STAT_KEYS, (float(x) for x in q)))


def gap_distribution(preds, trues, split: float = HIGH_VA_SPLIT) -> dict[str, Optional[dict]]:
    """Gap (true - pred) statistics for the high (true > split) and low (true <= split) groups.

    An empty group maps to ``None`` rather than to zero-valued statistics.
    """
    p = _vector(preds, "preds")
    y = _vector(trues, "trues")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: preds {p.shape}, trues {y.shape}")
    gaps = y - p
    out: dict[str, Optional[dict]] = {}
    for name, mask in (("high", y > split), ("low", y <= split)):
        if mask.any():
            out[name] = {"count": int(mask.sum()), **quantile_stats(gaps[mask])}
        else:
            out[name] = None
    return out


def format_distribution(dist: dict[str, Optional[dict]]) -> str:
    lines = [f"{'group':<6} {'count':>5} " + " ".join(f"{k:>10}" for k in STAT_KEYS)]
    for name, stats in dist.items():
        if stats is None:
            lines.append(f"{name:<6} {'absent':>5}")
        else:
            lines.append(f"{name:<6} {stats['count']:>5} " + " ".join(f"{stats[k]:>10.5f}" for k in STAT_KEYS))
    return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    acc: float
    f1: float
    gaps: list[float] = field(default_factory=list)
    distribution: dict = field(default_factory=dict)

    def to_dict(self, include_gaps: bool = True) -> dict:
        d = {"mae": self.mae, "rmse": self.rmse, "acc": self.acc, "f1": self.f1}
        if include_gaps:
            d["gaps"] = list(self.gaps)
        d["distribution"] = self.distribution
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def f1_score(pred_labels: np.ndarray, true_labels: np.ndarray) -> float:
    """F1 of the positive class; 0 when there is no true positive."""
    tp = int(np.sum((pred_labels == 1) & (true_labels == 1)))
    fp = int(np.sum((pred_labels == 1) & (true_labels == 0)))
    fn = int(np.sum((pred_labels == 0) & (true_labels == 1)))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def compute_metrics(preds, trues, pre_vas, threshold: float = RECOVERY_THRESHOLD, split: float = HIGH_VA_SPLIT) -> MetricsReport:
    p = _vector(preds, "preds")
    y = _vector(trues, "trues")
    x = _vector(pre_vas, "pre_vas")
    if not (p.shape == y.shape == x.shape):
        raise ValueError("preds, trues and pre_vas must be aligned")
    err = p - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    yl = recovery_label(y, x, threshold)
    pl = recovery_label(p, x, threshold)
    return MetricsReport(
        mae=mae,
        rmse=rmse,
        acc=float(np.mean(yl == pl)),
        f1=f1_score(pl, yl),
        gaps=(y - p).tolist(),
        distribution=gap_distribution(p, y, split),
    )
