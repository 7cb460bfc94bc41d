"""Pixel-wise contrastive alignment against per-class Gaussian statistics.

A query vector q is pulled toward the Gaussian of its own class and pushed
from the Gaussians of the other classes. Averaging the softmax contrastive
loss over infinitely many sampled positives/negatives has a closed-form
upper bound: each class contributes a logit

    l_k = q . mu_k / tau + q^T Sigma_k q / (2 tau^2)

and the bound is the negative log-softmax of the positive logit plus the
positive-class quadratic term again as a regularizer. That expression and
its gradient in q are exact and cheap; the Monte-Carlo estimator here exists
to certify the bound, not to train with.

Gradients never flow into the statistics (the bank is a frozen buffer per
update); they flow only into the queries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bank import ClassStats, DistributionBank
from .linalg import log_sum_exp, sample_gaussian

__all__ = [
    "PixelBatch",
    "LossResult",
    "infonce_reference",
    "finite_pair_loss",
    "mc_expected_loss",
    "closed_form_bound",
    "batch_level_loss",
]


@dataclass
class PixelBatch:
    """Flattened query vectors with their class ids and the domain they came from."""

    queries: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    domain: str = "source"

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        if self.queries.ndim != 2:
            raise ValueError("queries must be an (N, D) array")
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.queries.shape[0] != self.labels.shape[0]:
            raise ValueError("queries and labels must have equal length")
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self) -> int:
        return self.queries.shape[0]


@dataclass
class LossResult:
    """Scalar loss with per-query gradients for the source and target batches."""

    value: float
    grads_source: np.ndarray
    grads_target: np.ndarray


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValueError("temperature must be positive")
    return tau


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / max(float(np.linalg.norm(v)), 1e-12)


def infonce_reference(z, z_pos, z_negs, tau: float) -> float:
    """Plain softmax contrastive loss on unit-normalized vectors.

    Reference implementation for one positive and a list of single negative
    samples; used as a sanity anchor by the pair-sampled losses.
    """
    tau = _check_tau(tau)
    z_negs = [np.asarray(n, dtype=np.float64) for n in z_negs]
    if not z_negs:
        raise ValueError("infonce_reference needs at least one negative")
    z = _unit(z)
    logits = np.array([float(z @ _unit(z_pos))] + [float(z @ _unit(n)) for n in z_negs]) / tau
    return float(log_sum_exp(logits) - logits[0])


def finite_pair_loss(q, positives, negatives_by_class, tau: float) -> float:
    """Sampled multi-pair contrastive loss for one query.

    positives: (M, D) draws from the query's own class.
    negatives_by_class: list over other classes of (N_j, D) draws.
    Each per-positive softmax shares the class-averaged negative mass.
    """
    tau = _check_tau(tau)
    q = np.asarray(q, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise ValueError("need at least one positive sample")
    neg_terms = []
    for neg in negatives_by_class:
        neg = np.asarray(neg, dtype=np.float64)
        if neg.ndim != 2 or neg.shape[0] == 0:
            raise ValueError("each negative class needs at least one sample")
        neg_terms.append(neg @ q / tau - np.log(neg.shape[0]))
    if not neg_terms:
        raise ValueError("need at least one negative class")
    log_neg_mass = log_sum_exp(np.concatenate(neg_terms))
    a = pos @ q / tau
    return float(np.mean(np.logaddexp(a, log_neg_mass) - a))


def _require_initialized(stats: ClassStats, role: str) -> ClassStats:
    if not stats.initialized:
        raise ValueError(f"{role} class statistics are uninitialized")
    return stats


def mc_expected_loss(q, pos: ClassStats, negs, tau: float, n_samples: int, rng: np.random.Generator):
    """Monte-Carlo estimate of the expected contrastive loss under the class Gaussians.

    Each draw takes one fresh positive and one fresh sample per negative
    class. Returns (estimate, standard error of the mean).
    """
    tau = _check_tau(tau)
    if n_samples < 1000:
        raise ValueError("mc_expected_loss needs n_samples >= 1000")
    q = np.asarray(q, dtype=np.float64)
    pos = _require_initialized(pos, "positive")
    negs = [_require_initialized(n, "negative") for n in negs]
    if not negs:
        raise ValueError("need at least one negative class")
    cols = [sample_gaussian(pos.mean, pos.cov, rng, n_samples) @ q / tau]
    for st in negs:
        cols.append(sample_gaussian(st.mean, st.cov, rng, n_samples) @ q / tau)
    logits = np.column_stack(cols)
    draws = log_sum_exp(logits, axis=1) - logits[:, 0]
    estimate = float(np.mean(draws))
    std_error = float(np.std(draws, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return estimate, std_error


def _class_logit(q, stats: ClassStats, tau: float) -> tuple[float, float]:
    """Returns (logit, quadratic term q^T Sigma q / (2 tau^2)) for one class."""
    quad = float(q @ stats.cov @ q) / (2.0 * tau * tau)
    return float(q @ stats.mean) / tau + quad, quad


def closed_form_bound(q, pos: ClassStats, negs, tau: float):
    """Closed-form upper bound on the expected contrastive loss, with gradient.

    Returns (value, grad_q). The value is the negative log-softmax of the
    positive-class logit among all class logits, plus the positive quadratic
    term; the gradient is assembled from the softmax weights analytically.
    """
    tau = _check_tau(tau)
    q = np.asarray(q, dtype=np.float64)
    pos = _require_initialized(pos, "positive")
    negs = [_require_initialized(n, "negative") for n in negs]
    if not negs:
        raise ValueError("need at least one negative class")
    stats = [pos] + list(negs)
    logits = np.empty(len(stats))
    for i, st in enumerate(stats):
        logits[i], quad = _class_logit(q, st, tau)
        if i == 0:
            quad_pos = quad
    lse = float(log_sum_exp(logits))
    value = (lse - logits[0]) + quad_pos

    probs = np.exp(logits - lse)
    inv_t2 = 1.0 / (tau * tau)
    grad = np.zeros_like(q)
    for i, st in enumerate(stats):
        coeff = probs[i] - (1.0 if i == 0 else 0.0)
        grad += coeff * (st.mean / tau + (st.cov @ q) * inv_t2)
    grad += (pos.cov @ q) * inv_t2
    return value, grad


def _normalize_rows(queries: np.ndarray):
    norms = np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    return queries / norms, norms


def _bound_many(queries: np.ndarray, labels: np.ndarray, bank: DistributionBank, tau: float):
    """Vectorized bound + gradient for a block of queries against one bank."""
    active = bank.initialized_classes()
    if len(active) < 2:
        raise ValueError("bank needs at least two initialized classes")
    if len(active) < bank.num_classes:
        warnings.warn(
            "skipping uninitialized classes from the negative set: "
            f"{sorted(set(range(bank.num_classes)) - set(active))}",
            RuntimeWarning,
            stacklevel=3,
        )
    col_of = {k: j for j, k in enumerate(active)}
    missing = [int(k) for k in np.unique(labels) if int(k) not in col_of]
    if missing:
        raise ValueError(f"query labels {missing} are not initialized in the bank")

    means = np.stack([bank.stats(k).mean for k in active])  # (K', D)
    sig_q = [queries @ bank.stats(k).cov for k in active]  # each (N, D)
    quad = np.stack([np.sum(sq * queries, axis=1) for sq in sig_q], axis=1)  # (N, K')
    logits = queries @ means.T / tau + quad / (2.0 * tau * tau)

    rows = np.arange(queries.shape[0])
    pos_col = np.array([col_of[int(k)] for k in labels])
    lse = log_sum_exp(logits, axis=1)
    values = (lse - logits[rows, pos_col]) + quad[rows, pos_col] / (2.0 * tau * tau)

    coeff = np.exp(logits - lse[:, None])
    coeff[rows, pos_col] -= 1.0
    inv_t2 = 1.0 / (tau * tau)
    grads = coeff @ means / tau
    for j in range(len(active)):
        grads += coeff[:, j : j + 1] * sig_q[j] * inv_t2
    for j in range(len(active)):
        sel = pos_col == j
        if np.any(sel):
            grads[sel] += sig_q[j][sel] * inv_t2
    return values, grads


def batch_level_loss(
    batch_s: PixelBatch,
    batch_t: PixelBatch | None,
    bank: DistributionBank,
    tau: float,
    normalize_queries: bool = False,
) -> LossResult:
    """Mean bound over a source batch plus mean bound over a target batch.

    The target batch may be empty (nothing passed the confidence threshold),
    in which case only the source term contributes. Per-query gradients come
    back scaled by the corresponding 1/|batch| factor. Off by default,
    normalize_queries projects queries to the unit sphere first and chains
    the gradient through the projection.
    """
    tau = _check_tau(tau)
    if len(batch_s) == 0:
        raise ValueError("source batch must not be empty")
    value = 0.0
    grads = []
    for batch in (batch_s, batch_t):
        if batch is None or len(batch) == 0:
            grads.append(np.zeros((0, bank.dim)))
            continue
        queries = batch.queries
        if queries.shape[1] != bank.dim:
            raise ValueError(f"query dim {queries.shape[1]} != bank dim {bank.dim}")
        if normalize_queries:
            unit, norms = _normalize_rows(queries)
            values, g_hat = _bound_many(unit, batch.labels, bank, tau)
            radial = np.sum(g_hat * unit, axis=1, keepdims=True)
            g = (g_hat - radial * unit) / norms
        else:
            values, g = _bound_many(queries, batch.labels, bank, tau)
        value += float(np.sum(values)) / len(batch)
        grads.append(g / len(batch))
    return LossResult(value, grads[0], grads[1])
