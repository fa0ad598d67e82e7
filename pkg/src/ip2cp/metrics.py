"""Confusion matrices and F1 scores for the patch and pixel-wise tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .raster import DamageLabel, LabelMask

# Damage classes scored one-vs-rest in pixel-wise evaluation (background is
# excluded from the truth side entirely).
PIXEL_CLASSES = (
    DamageLabel.NO_DAMAGE,
    DamageLabel.MINOR,
    DamageLabel.MAJOR,
    DamageLabel.DESTROYED,
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """k x k counts, rows = ground truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {arr.shape}")
        if (arr < 0).any():
            raise DataError("negative confusion count")
        object.__setattr__(self, "counts", arr)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, truths, k: int) -> ConfusionMatrix:
    """Tally predictions against ground truth for labels in 0..k-1."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise DataError(f"{preds.size} predictions but {truths.size} truths")
    if preds.size and (
        preds.min() < 0 or preds.max() >= k or truths.min() < 0 or truths.max() >= k
    ):
        raise DataError(f"label outside 0..{k - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def row_normalize(cm: ConfusionMatrix) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    counts = cm.counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    out = np.zeros_like(counts)
    nonzero = sums[:, 0] > 0
    out[nonzero] = counts[nonzero] / sums[nonzero]
    return out


def f1_binary(cm: ConfusionMatrix, positive: int) -> float:
    """F1 = 2TP / (2TP + FP + FN) for a 2x2 matrix; 0 when the denominator is 0."""
    if cm.k != 2:
        raise DataError(f"binary F1 needs a 2x2 matrix, got {cm.k}x{cm.k}")
    if positive not in (0, 1):
        raise DataError(f"positive class must be 0 or 1, got {positive}")
    other = 1 - positive
    tp = int(cm.counts[positive, positive])
    fp = int(cm.counts[other, positive])
    fn = int(cm.counts[positive, other])
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def f1_pixelwise(pred_map: LabelMask, truth_map: LabelMask):
    """One-vs-rest F1 per damage class over pixels whose truth is not background.

    Background-truth pixels are excluded; a background *prediction* over a
    damaged-truth pixel counts against that truth class (a miss). Returns
    (per_class, macro): per_class maps class names to F1 for classes that
    occur in truth or prediction on the evaluated pixels; macro is their
    arithmetic mean (0.0 when no class occurs at all).
    """
    if pred_map.labels.shape != truth_map.labels.shape:
        raise ShapeError(
            f"prediction {pred_map.labels.shape} and truth {truth_map.labels.shape} differ"
        )
    keep = truth_map.labels != int(DamageLabel.BACKGROUND)
    truth = truth_map.labels[keep]
    pred = pred_map.labels[keep]
    per_class: dict[str, float] = {}
    for cls in PIXEL_CLASSES:
        code = int(cls)
        tp = int(np.sum((truth == code) & (pred == code)))
        fp = int(np.sum((truth != code) & (pred == code)))
        fn = int(np.sum((truth == code) & (pred != code)))
        denom = 2 * tp + fp + fn
        if denom == 0:
            continue  # class absent here; skipped in the macro mean
        per_class[cls.name.lower()] = 2.0 * tp / denom
    macro = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, macro


def patch_report(cm: ConfusionMatrix) -> dict:
    """Evaluation report for the binary patch task (positive = with_damage)."""
    per_class = {
        "no_damage": f1_binary(cm, 0),
        "with_damage": f1_binary(cm, 1),
    }
    return {
        "confusion": cm.counts.tolist(),
        "confusion_row_norm": row_normalize(cm).tolist(),
        "f1": per_class["with_damage"],
        "per_class_f1": per_class,
        "macro_f1": float(np.mean(list(per_class.values()))),
    }


def pixel_report(pred_map: LabelMask, truth_map: LabelMask) -> dict:
    """Evaluation report for pixel-wise label maps (confusion over all 5 codes)."""
    cm = confusion(pred_map.labels.ravel(), truth_map.labels.ravel(), k=5)
    per_class, macro = f1_pixelwise(pred_map, truth_map)
    return {
        "confusion": cm.counts.tolist(),
        "confusion_row_norm": row_normalize(cm).tolist(),
        "f1": macro,
        "per_class_f1": per_class,
        "macro_f1": macro,
    }
