"""Overfitting (O), generalization (G) and their ratio between checkpoints.

Loss variant, relative to epoch 0::

    O_N = (L^T_0 - L^T_N) - (L^V_0 - L^V_N)
    G_N = L^V_0 - L^V_N

The accuracy variant flips signs so that "learning" is positive in both.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from typing import Iterable

import numpy as np

EPS_G = 1e-8
METRIC_KINDS = ("loss", "accuracy")


@dataclass(frozen=True)
class CheckpointRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    source: str = ""

    def __post_init__(self):
        if self.epoch < 0:
            raise ValueError("epoch must be nonnegative")
        if self.train_loss < 0 or self.val_loss < 0:
            raise ValueError("losses must be nonnegative")
        for a in (self.train_acc, self.val_acc):
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")


@dataclass(frozen=True)
class OgrReport:
    delta_o: float
    delta_g: float
    ogr: float | None
    metric_kind: str

    @property
    def defined(self) -> bool:
        return self.ogr is not None

    @property
    def negative_g(self) -> bool:
        return self.delta_g < 0


def _check(rec0: CheckpointRecord, recN: CheckpointRecord, kind: str) -> None:
    if kind not in METRIC_KINDS:
        raise ValueError(f"metric kind must be one of {METRIC_KINDS}")
    if rec0.epoch >= recN.epoch:
        raise ValueError(f"checkpoints out of order: {rec0.epoch} >= {recN.epoch}")
    if rec0.source != recN.source:
        raise ValueError(f"records come from different sources: {rec0.source!r} vs {recN.source!r}")


def _gains(rec0: CheckpointRecord, recN: CheckpointRecord, kind: str) -> tuple[float, float]:
    if kind == "loss":
        return rec0.train_loss - recN.train_loss, rec0.val_loss - recN.val_loss
    return recN.train_acc - rec0.train_acc, recN.val_acc - rec0.val_acc


def overfitting_at(rec0: CheckpointRecord, recN: CheckpointRecord, kind: str = "loss") -> float:
    _check(rec0, recN, kind)
    train_gain, val_gain = _gains(rec0, recN, kind)
    return train_gain - val_gain


def generalization_at(rec0: CheckpointRecord, recN: CheckpointRecord, kind: str = "loss") -> float:
    _check(rec0, recN, kind)
    return _gains(rec0, recN, kind)[1]


def ogr_between(recA: CheckpointRecord, recB: CheckpointRecord, kind: str = "loss",
                eps_g: float = EPS_G) -> OgrReport:
    """OGR over [A, B]; ``ogr`` is None when |dG| < eps_g.

    O and G are measured from a common epoch-0 reference, which cancels in
    the differences, so only the two endpoints are needed.
    """
    _check(recA, recB, kind)
    train_gain, val_gain = _gains(recA, recB, kind)
    delta_o = train_gain - val_gain
    delta_g = val_gain
    ogr = abs(delta_o / delta_g) if abs(delta_g) >= eps_g else None
    return OgrReport(delta_o, delta_g, ogr, kind)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy for index labels, mean average precision for multi-hot."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return float(np.mean(np.argmax(logits, axis=1) == labels))
    return mean_average_precision(logits, labels)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes that have at least one positive of average precision."""
    aps = []
    for c in range(labels.shape[1]):
        y = labels[:, c].astype(bool)
        if not y.any():
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        hits = y[order]
        precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
        aps.append(precision[hits].mean())
    return float(np.mean(aps)) if aps else 0.0


CURVE_COLUMNS = ("epoch", "head", "train_loss", "val_loss", "train_acc", "val_acc", "O", "G")


def curve_rows(curves: dict, kind: str = "loss") -> Iterable[dict]:
    """Rows for the learning-curve CSV; O and G are relative to each head's first record."""
    for head, records in curves.items():
        first = records[0]
        for rec in records:
            if rec.epoch == first.epoch:
                o = g = 0.0
            else:
                o = overfitting_at(first, rec, kind)
                g = generalization_at(first, rec, kind)
            yield {"epoch": rec.epoch, "head": head, "train_loss": rec.train_loss,
                   "val_loss": rec.val_loss, "train_acc": rec.train_acc, "val_acc": rec.val_acc,
                   "O": o, "G": g}


def write_curves_csv(path, curves: dict, kind: str = "loss") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in curve_rows(curves, kind):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def record_to_dict(rec: CheckpointRecord) -> dict:
    return asdict(rec)
