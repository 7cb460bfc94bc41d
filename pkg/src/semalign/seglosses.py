"""Supervised segmentation losses with analytic gradients w.r.t. logits.

Score maps are (H, W, K) float64 logit arrays; label maps are (H, W) integer
arrays using IGNORE_ID for pixels excluded from every mean. Both losses
return (value, grad_logits) with the gradient zeroed at ignored pixels.
"""

from __future__ import annotations

import numpy as np

from .containers import IGNORE_ID
from .linalg import log_softmax

__all__ = ["NoValidPixelsError", "softmax_probs", "cross_entropy", "lovasz_softmax"]


class NoValidPixelsError(ValueError):
    """Every pixel of the label map carries the ignore id."""


def _flatten_valid(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 3:
        raise ValueError(f"score map must be (H, W, K), got {logits.shape}")
    if labels.shape != logits.shape[:2]:
        raise ValueError(f"label map {labels.shape} does not match score map {logits.shape[:2]}")
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_labels = labels.reshape(-1)
    valid = flat_labels != IGNORE_ID
    if not np.any(valid):
        raise NoValidPixelsError("no valid pixels in label map")
    if np.any(flat_labels[valid] >= logits.shape[-1]) or np.any(flat_labels[valid] < 0):
        raise ValueError("label id outside [0, K)")
    return logits, flat_logits, flat_labels, valid


def softmax_probs(logits) -> np.ndarray:
    """Per-pixel class probabilities of a score map."""
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64), axis=-1))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood over valid pixels.

    Gradient is (softmax - one_hot) / n_valid at valid pixels, zero elsewhere.
    """
    logits, flat_logits, flat_labels, valid = _flatten_valid(logits, labels)
    rows = np.flatnonzero(valid)
    y = flat_labels[rows]
    logp = log_softmax(flat_logits[rows], axis=-1)
    value = -float(np.sum(logp[np.arange(rows.size), y])) / rows.size

    grad_flat = np.zeros_like(flat_logits)
    g = np.exp(logp)
    g[np.arange(rows.size), y] -= 1.0
    grad_flat[rows] = g / rows.size
    return value, grad_flat.reshape(logits.shape)


def _jaccard_weights(fg_sorted: np.ndarray) -> np.ndarray:
    """Marginal Jaccard-loss increases along a sorted error sequence."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if fg_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(logits, labels):
    """Convex surrogate of the per-class Jaccard loss, averaged over present classes.

    For each class present in the labels the prediction errors are sorted
    descending (ties broken by pixel index, for determinism) and weighted by
    the marginal Jaccard increases; at one-hot predictions the per-class
    value is exactly 1 - IoU. The gradient treats the sort permutation as
    locally constant and chains through the softmax.
    """
    logits, flat_logits, flat_labels, valid = _flatten_valid(logits, labels)
    rows = np.flatnonzero(valid)
    y = flat_labels[rows]
    probs = np.exp(log_softmax(flat_logits[rows], axis=-1))

    present = np.unique(y)
    grad_probs = np.zeros_like(probs)
    total = 0.0
    for c in present:
        fg = (y == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        weights = _jaccard_weights(fg[order])
        total += float(errors[order] @ weights)
        signs = np.where(fg > 0.5, -1.0, 1.0)
        g = np.empty_like(errors)
        g[order] = weights
        grad_probs[:, c] += signs * g
    n_present = present.size
    value = total / n_present
    grad_probs /= n_present

    # back through softmax: dL/dz_k = p_k * (g_k - sum_j g_j p_j)
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    grad_rows = probs * (grad_probs - inner)
    grad_flat = np.zeros_like(flat_logits)
    grad_flat[rows] = grad_rows
    return value, grad_flat.reshape(logits.shape)
