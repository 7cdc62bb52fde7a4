"""Evaluation metrics for both task styles.

MOSI-style scores live in [-3, 3] and report the Has0/Non0 binary pairs,
5/7-class accuracies, MAE and Pearson correlation.  SIMS-style scores live in
[-1, 1] and report 2/3/5-class accuracies, binary F1, MAE and correlation.
Undefined metrics are reported as absent (None), never silently zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import task_range
from .errors import ContractError, UndefinedMetricError

MOSI_FIELDS = ("has0_acc2", "has0_f1", "non0_acc2", "non0_f1", "acc5", "acc7", "mae", "corr")
SIMS_FIELDS = ("acc2", "acc3", "acc5", "f1", "mae", "corr")


@dataclass
class EvalPairs:
    """Aligned prediction/label lists for one evaluation run."""

    predictions: np.ndarray
    labels: np.ndarray
    task_style: str

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.predictions.ndim != 1 or self.labels.ndim != 1:
            raise ContractError("predictions and labels must be flat lists")
        if len(self.predictions) != len(self.labels) or len(self.labels) == 0:
            raise ContractError(
                f"need equal nonzero lengths, got {len(self.predictions)} and {len(self.labels)}"
            )
        half = task_range(self.task_style)
        if np.max(np.abs(self.labels)) > half:
            raise ContractError(f"labels exceed the {self.task_style} range [{-half}, {half}]")


@dataclass
class MetricsReport:
    task_style: str
    has0_acc2: float | None = None
    has0_f1: float | None = None
    non0_acc2: float | None = None
    non0_f1: float | None = None
    acc2: float | None = None
    acc3: float | None = None
    acc5: float | None = None
    acc7: float | None = None
    f1: float | None = None
    mae: float | None = None
    corr: float | None = None

    def field_names(self):
        return MOSI_FIELDS if self.task_style == "mosi" else SIMS_FIELDS

    def as_dict(self):
        out = {"task_style": self.task_style}
        out.update({name: getattr(self, name) for name in self.field_names()})
        return out

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True)


def _require_style(pairs, style, op):
    if pairs.task_style != style:
        raise ContractError(f"{op} is defined for {style}-style pairs only")


def _accuracy(pred_cls, label_cls):
    return float(np.mean(pred_cls == label_cls))


def _weighted_f1(pred_cls, label_cls):
    """Support-weighted mean of per-class F1 scores."""
    total = len(label_cls)
    acc = 0.0
    for c in np.unique(label_cls):
        support = int(np.sum(label_cls == c))
        tp = int(np.sum((pred_cls == c) & (label_cls == c)))
        predicted = int(np.sum(pred_cls == c))
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        acc += support * f1
    return acc / total


def has0_binary(pairs):
    """Binary accuracy/F1 counting zero scores as positive (v >= 0)."""
    _require_style(pairs, "mosi", "has0_binary")
    pred_cls = pairs.predictions >= 0
    label_cls = pairs.labels >= 0
    return _accuracy(pred_cls, label_cls), _weighted_f1(pred_cls, label_cls)


def non0_binary(pairs):
    """Binary accuracy/F1 dropping zero-labeled pairs; positive means v > 0."""
    _require_style(pairs, "mosi", "non0_binary")
    keep = pairs.labels != 0
    if not np.any(keep):
        raise UndefinedMetricError("non0 metrics undefined: every label is zero")
    pred_cls = pairs.predictions[keep] > 0
    label_cls = pairs.labels[keep] > 0
    return _accuracy(pred_cls, label_cls), _weighted_f1(pred_cls, label_cls)


def _round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def acc_k_mosi(pairs, k):
    """k-class accuracy: clamp to +-(k-1)/2, round half away from zero."""
    _require_style(pairs, "mosi", "acc_k_mosi")
    if k not in (5, 7):
        raise ContractError(f"k must be 5 or 7, got {k}")
    half = (k - 1) / 2
    pred_cls = _round_half_away(np.clip(pairs.predictions, -half, half))
    label_cls = _round_half_away(np.clip(pairs.labels, -half, half))
    return _accuracy(pred_cls, label_cls)


def _sims_class(values, k):
    v = np.asarray(values)
    if k == 2:
        return (v >= 0).astype(int)
    if k == 3:
        return np.where(v <= -0.1, 0, np.where(v < 0.1, 1, 2))
    # bins [-1,-0.7], (-0.7,-0.1], (-0.1,0.1), [0.1,0.7), [0.7,1]
    return np.where(
        v <= -0.7, 0, np.where(v <= -0.1, 1, np.where(v < 0.1, 2, np.where(v < 0.7, 3, 4)))
    )


def sims_acc(pairs, k):
    """k-class accuracy over the fixed SIMS bins (edges at +-0.1 and +-0.7)."""
    _require_style(pairs, "sims", "sims_acc")
    if k not in (2, 3, 5):
        raise ContractError(f"k must be 2, 3 or 5, got {k}")
    return _accuracy(_sims_class(pairs.predictions, k), _sims_class(pairs.labels, k))


def mae(pairs):
    return float(np.mean(np.abs(pairs.predictions - pairs.labels)))


def pearson(pairs):
    p = pairs.predictions - pairs.predictions.mean()
    l = pairs.labels - pairs.labels.mean()
    denom = np.sqrt(np.sum(p * p) * np.sum(l * l))
    if denom == 0:
        raise UndefinedMetricError("pearson undefined: zero variance")
    return float(np.sum(p * l) / denom)


def full_report(pairs):
    """Assemble every style-appropriate metric into one report."""
    report = MetricsReport(task_style=pairs.task_style)
    report.mae = mae(pairs)
    try:
        report.corr = pearson(pairs)
    except UndefinedMetricError:
        report.corr = None
    if pairs.task_style == "mosi":
        report.has0_acc2, report.has0_f1 = has0_binary(pairs)
        try:
            report.non0_acc2, report.non0_f1 = non0_binary(pairs)
        except UndefinedMetricError:
            report.non0_acc2 = report.non0_f1 = None
        report.acc5 = acc_k_mosi(pairs, 5)
        report.acc7 = acc_k_mosi(pairs, 7)
    else:
        report.acc2 = sims_acc(pairs, 2)
        report.acc3 = sims_acc(pairs, 3)
        report.acc5 = sims_acc(pairs, 5)
        pred_cls = _sims_class(pairs.predictions, 2)
        label_cls = _sims_class(pairs.labels, 2)
        report.f1 = _weighted_f1(pred_cls, label_cls)
    return report
