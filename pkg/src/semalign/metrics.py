"""Evaluation: per-class IoU, tail-class mIoU and pixel discrimination distance.

The discrimination distance of a class is the average, over its pixels, of
the cosine similarity to the class's own mean divided by the summed cosine
similarity to every other class mean. Negative cosines in the denominator
are floored at zero and the sum is clamped at a small epsilon, which keeps
the ratio finite and monotone in intra-class alignment.
"""

from __future__ import annotations

import numpy as np

from .containers import IGNORE_ID, write_embeddings

__all__ = ["ConfusionMatrix", "iou", "pdd", "tail_classes", "export_embeddings"]


class ConfusionMatrix:
    """K x K ground-truth-by-prediction pixel counts; addition merges partials."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = (
            np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts
        )

    def add(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction sizes differ")
        valid = truth != IGNORE_ID
        idx = truth[valid] * self.num_classes + pred[valid]
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou(conf: ConfusionMatrix):
    """Per-class TP/(TP+FP+FN) and the mean over classes with non-empty union.

    Classes whose union is empty come back as NaN and do not enter the mean.
    """
    counts = conf.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - tp
    per_class = np.where(union > 0, tp / np.where(union > 0, union, 1.0), np.nan)
    valid = union > 0
    mean = float(per_class[valid].mean()) if np.any(valid) else float("nan")
    return per_class, mean


def _cosine_rows(x: np.ndarray, means: np.ndarray) -> np.ndarray:
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    mn = np.linalg.norm(means, axis=1, keepdims=True)
    denom = np.maximum(xn, 1e-12) * np.maximum(mn, 1e-12).T
    return (x @ means.T) / denom


def pdd(features, labels, means, initialized=None, eps: float = 1e-6) -> dict[int, float]:
    """Per-class discrimination distance of pixel vectors against class means.

    features: (N, D) vectors; labels: (N,) class per vector; means: (K, D).
    initialized limits which classes count as usable means (default: all).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    means = np.asarray(means, dtype=np.float64)
    k = means.shape[0]
    if k < 2:
        raise ValueError("discrimination distance needs at least two classes")
    usable = set(range(k)) if initialized is None else set(int(c) for c in initialized)
    present = [int(c) for c in np.unique(labels) if c != IGNORE_ID]
    for c in present:
        if c not in usable:
            raise ValueError(f"class {c} has no initialized mean")
    cos = _cosine_rows(features, means)
    floored = np.clip(cos, 0.0, None)
    out = {}
    usable_cols = sorted(usable)
    for c in present:
        rows = labels == c
        others = [j for j in usable_cols if j != c]
        denom = np.maximum(floored[rows][:, others].sum(axis=1), eps)
        out[c] = float(np.mean(cos[rows, c] / denom))
    return out


def tail_classes(class_freqs, threshold: float = 0.01) -> list[int]:
    """Classes whose source pixel share is below the threshold."""
    freqs = np.asarray(class_freqs, dtype=np.float64)
    return [int(k) for k in np.flatnonzero(freqs < threshold)]


def export_embeddings(features, labels, path) -> None:
    """Write (vector, label) rows for external visualization tools."""
    write_embeddings(path, np.asarray(features, dtype=np.float64), np.asarray(labels))
