"""Segmentation metrics from per-class confusion tallies.

Tallies are plain integer counts and add across images, so dataset scores
come from one accumulated tally rather than averaging per-image ratios.
Ratios with a zero denominator evaluate to 0 and are flagged, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_BETA_SQUARED = 0.3


@dataclass
class ConfusionTallies:
    """Per-class TP/FP/FN pixel counts plus the grand pixel total.

    TN for class c is total - TP - FP - FN and is derived, not stored.
    """

    num_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)
    total: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        for name in ("tp", "fp", "fn"):
            arr = getattr(self, name)
            if arr is None:
                arr = np.zeros(self.num_classes, dtype=np.int64)
            else:
                arr = np.asarray(arr, dtype=np.int64)
                if arr.shape != (self.num_classes,):
                    raise ValueError(
                        f"{name} must have shape ({self.num_classes},), "
                        f"got {arr.shape}"
                    )
            setattr(self, name, arr)

    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    def merge(self, other: "ConfusionTallies") -> "ConfusionTallies":
        if other.num_classes != self.num_classes:
            raise ValueError(
                f"cannot merge tallies over {other.num_classes} classes into "
                f"{self.num_classes}"
            )
        return ConfusionTallies(
            self.num_classes,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.total + other.total,
        )

    def present_classes(self) -> np.ndarray:
        """Classes appearing in ground truth or prediction."""
        return np.nonzero(self.tp + self.fp + self.fn > 0)[0]


def tally(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionTallies:
    """Confusion counts for one image pair of class-index rasters."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(
                f"{name} contains labels outside [0, {num_classes})"
            )
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (gt.ravel(), pred.ravel()), 1)
    tp = np.diag(conf).copy()
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    return ConfusionTallies(num_classes, tp, fp, fn, int(pred.size))


def tally_many(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int
) -> ConfusionTallies:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    acc = ConfusionTallies(num_classes)
    for p, g in zip(preds, gts):
        acc = acc.merge(tally(p, g, num_classes))
    return acc


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # zero denominator -> value 0, flagged
    den = np.asarray(den, dtype=np.float64)
    num = np.asarray(num, dtype=np.float64)
    flagged = den == 0
    out = np.zeros_like(den)
    np.divide(num, den, out=out, where=~flagged)
    return out, flagged


def per_class_iou(t: ConfusionTallies) -> tuple[np.ndarray, np.ndarray]:
    return _safe_div(t.tp, t.tp + t.fp + t.fn)


def per_class_f_beta(
    t: ConfusionTallies, beta_squared: float = DEFAULT_BETA_SQUARED
) -> tuple[np.ndarray, np.ndarray]:
    precision, p_flag = _safe_div(t.tp, t.tp + t.fp)
    recall, r_flag = _safe_div(t.tp, t.tp + t.fn)
    num = (1.0 + beta_squared) * precision * recall
    den = beta_squared * precision + recall
    f, f_flag = _safe_div(num, den)
    return f, p_flag | r_flag | f_flag


def per_class_fdr(t: ConfusionTallies) -> tuple[np.ndarray, np.ndarray]:
    return _safe_div(t.fp, t.fp + t.tp)


def miou(t: ConfusionTallies) -> float:
    """Mean IoU over classes present in ground truth or prediction."""
    present = t.present_classes()
    if present.size == 0:
        raise ValueError("no class present in ground truth or prediction")
    iou, _ = per_class_iou(t)
    return float(iou[present].mean())


def _evaluated_foreground(t: ConfusionTallies) -> np.ndarray:
    present = t.present_classes()
    return present[present != 0]


def f_beta(t: ConfusionTallies, beta_squared: float = DEFAULT_BETA_SQUARED) -> float:
    """Macro F-measure over evaluated foreground classes."""
    fg = _evaluated_foreground(t)
    if fg.size == 0:
        raise ValueError("no foreground class to evaluate")
    f, _ = per_class_f_beta(t, beta_squared)
    return float(f[fg].mean())


def fdr(t: ConfusionTallies) -> float:
    """Macro false discovery rate over evaluated foreground classes."""
    fg = _evaluated_foreground(t)
    if fg.size == 0:
        raise ValueError("no foreground class to evaluate")
    rate, _ = per_class_fdr(t)
    return float(rate[fg].mean())


def binary_f_beta_per_image(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    beta_squared: float = DEFAULT_BETA_SQUARED,
) -> float:
    """Mean over images of the foreground-vs-background F-measure.

    Collapses class indices to a sounding/background mask first, for
    benchmarks that score binary masks per image.
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal, non-empty prediction and ground-truth lists")
    scores = []
    for p, g in zip(preds, gts):
        t = tally(
            (np.asarray(p) > 0).astype(np.int64),
            (np.asarray(g) > 0).astype(np.int64),
            2,
        )
        f, _ = per_class_f_beta(t, beta_squared)
        scores.append(f[1])
    return float(np.mean(scores))


@dataclass
class MetricsReport:
    num_classes: int
    class_iou: np.ndarray
    class_f: np.ndarray
    class_fdr: np.ndarray
    flagged: np.ndarray  # classes where any ratio had a zero denominator
    present: np.ndarray
    miou: float
    f_beta: float
    fdr: float
    ppv: float
    combined: float  # (miou + f_beta) / 2

    def lines(self, class_names: dict[int, str] | None = None) -> list[str]:
        names = class_names or {}
        out = [f"classes evaluated: {len(self.present)}"]
        for c in self.present:
            label = names.get(int(c), f"class {c}")
            flag = "  [zero-denominator]" if self.flagged[c] else ""
            out.append(
                f"{label}: iou {self.class_iou[c]:.6f}  f {self.class_f[c]:.6f}"
                f"  fdr {self.class_fdr[c]:.6f}{flag}"
            )
        out.append(f"miou {self.miou:.6f}")
        out.append(f"f_beta {self.f_beta:.6f}")
        out.append(f"fdr {self.fdr:.6f}")
        out.append(f"ppv {self.ppv:.6f}")
        out.append(f"combined {self.combined:.6f}")
        return out

    def table_rows(self) -> list[tuple[int, float, float, float]]:
        return [
            (int(c), float(self.class_iou[c]), float(self.class_f[c]),
             float(self.class_fdr[c]))
            for c in self.present
        ]


def evaluate(
    t: ConfusionTallies, beta_squared: float = DEFAULT_BETA_SQUARED
) -> MetricsReport:
    iou, iou_flag = per_class_iou(t)
    f, f_flag = per_class_f_beta(t, beta_squared)
    rate, rate_flag = per_class_fdr(t)
    dataset_fdr = fdr(t)
    dataset_f = f_beta(t, beta_squared)
    mean_iou = miou(t)
    return MetricsReport(
        num_classes=t.num_classes,
        class_iou=iou,
        class_f=f,
        class_fdr=rate,
        flagged=iou_flag | f_flag | rate_flag,
        present=t.present_classes(),
        miou=mean_iou,
        f_beta=dataset_f,
        fdr=dataset_fdr,
        ppv=1.0 - dataset_fdr,
        combined=(mean_iou + dataset_f) / 2.0,
    )
