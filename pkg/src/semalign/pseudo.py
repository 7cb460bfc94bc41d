"""Confidence-gated masks and pseudo labels for the unlabeled domain.

Target pixels only take part in alignment when the model is confident: a
pixel keeps its argmax class if the max softmax probability clears a
threshold, and gets the ignore id otherwise. For self-training, per-class
thresholds are set to the median confidence of each predicted class, so at
least half of every class survives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .containers import IGNORE_ID
from .seglosses import cross_entropy, softmax_probs

__all__ = [
    "ConfidenceMask",
    "downsample_labels",
    "target_mask",
    "median_thresholds",
    "pseudo_labels",
    "self_supervised_loss",
]


@dataclass
class ConfidenceMask:
    """Label map with rejected pixels set to IGNORE_ID, plus the threshold(s) used."""

    labels: np.ndarray
    threshold_used: float | np.ndarray


def downsample_labels(labels, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor label subsampling; the ignore id propagates unchanged."""
    labels = np.asarray(labels)
    h, w = labels.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(f"invalid target size {out_h}x{out_w} for {h}x{w} labels")
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return labels[np.ix_(rows, cols)]


def target_mask(logits, delta: float) -> ConfidenceMask:
    """Argmax labels gated by a global confidence threshold."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("confidence threshold must lie in [0, 1]")
    probs = softmax_probs(logits)
    conf = probs.max(axis=-1)
    arg = probs.argmax(axis=-1)
    labels = np.where(conf >= delta, arg, IGNORE_ID).astype(np.int32)
    return ConfidenceMask(labels, float(delta))


def median_thresholds(score_maps, num_classes: int) -> np.ndarray:
    """Per-class median of max-softmax confidence over a set of score maps.

    Classes never predicted get +inf so they are never selected later.
    """
    per_class: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
    for logits in score_maps:
        probs = softmax_probs(logits)
        conf = probs.max(axis=-1).reshape(-1)
        arg = probs.argmax(axis=-1).reshape(-1)
        for k in range(num_classes):
            sel = arg == k
            if np.any(sel):
                per_class[k].append(conf[sel])
    thresholds = np.full(num_classes, np.inf)
    for k in range(num_classes):
        if per_class[k]:
            thresholds[k] = float(np.median(np.concatenate(per_class[k])))
    return thresholds


def pseudo_labels(logits, thresholds) -> ConfidenceMask:
    """Argmax labels kept only where confidence reaches the class threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    probs = softmax_probs(logits)
    conf = probs.max(axis=-1)
    arg = probs.argmax(axis=-1)
    if thresholds.shape != (probs.shape[-1],):
        raise ValueError("need one threshold per class")
    labels = np.where(conf >= thresholds[arg], arg, IGNORE_ID).astype(np.int32)
    return ConfidenceMask(labels, thresholds)


def self_supervised_loss(logits, pseudo: ConfidenceMask | np.ndarray):
    """Cross-entropy against pseudo labels; rejected pixels are excluded."""
    labels = pseudo.labels if isinstance(pseudo, ConfidenceMask) else pseudo
    return cross_entropy(logits, labels)
