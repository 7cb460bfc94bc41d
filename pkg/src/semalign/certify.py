"""Self-contained property checks runnable from the command line.

Each check exercises one load-bearing piece of math against an independent
oracle: streaming statistics against whole-dataset statistics, the
closed-form alignment bound against Monte-Carlo estimates, analytic
gradients against finite differences, the Jaccard surrogate against a
set-based oracle, and the metric implementations against brute force. The
test suite runs the same properties at full scale; this module keeps sizes
small enough for an interactive pass/fail report.
"""

from __future__ import annotations

import numpy as np

from .bank import ClassStats, batch_stats, merge
from .contrast import closed_form_bound, mc_expected_loss
from .metrics import ConfusionMatrix, iou, pdd
from .seglosses import lovasz_softmax

__all__ = ["run_all_checks", "CHECKS"]


def random_psd(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return scale * (a @ a.T / dim + 0.05 * np.eye(dim))


def random_stats(rng: np.random.Generator, dim: int, scale: float = 1.0) -> ClassStats:
    return ClassStats(1, rng.standard_normal(dim), random_psd(rng, dim, scale))


def check_streaming_merge(rng: np.random.Generator, trials: int = 10) -> dict:
    """Chunked online merges must match whole-dataset population statistics."""
    worst = 0.0
    for _ in range(trials):
        dim = int(rng.integers(2, 9))
        n = int(rng.integers(50, 400))
        data = rng.standard_normal((n, dim)) * rng.uniform(0.5, 2.0)
        m_all, mu_all, cov_all = batch_stats(data)
        stats = ClassStats.empty(dim)
        start = 0
        while start < n:
            stop = min(n, start + int(rng.integers(1, 40)))
            stats = merge(stats, *batch_stats(data[start:stop]))
            start = stop
        rel_mu = np.max(np.abs(stats.mean - mu_all)) / max(np.max(np.abs(mu_all)), 1e-12)
        rel_cov = np.max(np.abs(stats.cov - cov_all)) / max(np.max(np.abs(cov_all)), 1e-12)
        worst = max(worst, rel_mu, rel_cov, abs(stats.count - m_all))
    return {"passed": bool(worst < 1e-9), "worst_rel_err": worst, "tolerance": 1e-9}


def check_bound_vs_mc(rng: np.random.Generator, trials: int = 40, n_samples: int = 20000) -> dict:
    """The closed form must upper-bound the Monte-Carlo estimate within noise."""
    worst_margin = np.inf
    taus = [0.05, 0.1, 0.5, 1.0]
    for i in range(trials):
        dim = int(rng.integers(2, 7))
        k = int(rng.integers(2, 5))
        q = rng.standard_normal(dim)
        pos = random_stats(rng, dim, scale=rng.uniform(0.1, 1.0))
        negs = [random_stats(rng, dim, scale=rng.uniform(0.1, 1.0)) for _ in range(k - 1)]
        tau = taus[i % len(taus)]
        value, _ = closed_form_bound(q, pos, negs, tau)
        est, se = mc_expected_loss(q, pos, negs, tau, n_samples, rng)
        worst_margin = min(worst_margin, value - (est - 3.0 * se))
    return {"passed": bool(worst_margin >= 0.0), "worst_margin": float(worst_margin)}


def check_bound_gradient(rng: np.random.Generator, trials: int = 20, h: float = 1e-5) -> dict:
    """Analytic query gradient against central finite differences."""
    worst = 0.0
    for i in range(trials):
        dim = int(rng.integers(2, 7))
        k = int(rng.integers(2, 5))
        q = rng.standard_normal(dim)
        pos = random_stats(rng, dim)
        negs = [random_stats(rng, dim) for _ in range(k - 1)]
        tau = [0.1, 0.5, 1.0][i % 3]
        _, grad = closed_form_bound(q, pos, negs, tau)
        fd = np.empty(dim)
        for d in range(dim):
            e = np.zeros(dim)
            e[d] = h
            fd[d] = (
                closed_form_bound(q + e, pos, negs, tau)[0]
                - closed_form_bound(q - e, pos, negs, tau)[0]
            ) / (2 * h)
        worst = max(worst, float(np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), 1e-12)))
    return {"passed": bool(worst < 1e-5), "worst_rel_err": worst, "tolerance": 1e-5}


def _jaccard_oracle(truth: np.ndarray, pred: np.ndarray, cls: int) -> float:
    gt = truth == cls
    pr = pred == cls
    union = np.sum(gt | pr)
    return 1.0 - (np.sum(gt & pr) / union if union else 1.0)


def check_lovasz_vertex(rng: np.random.Generator, trials: int = 30) -> dict:
    """At one-hot predictions the surrogate equals 1 - Jaccard exactly."""
    worst = 0.0
    for _ in range(trials):
        h, w, k = 6, 6, int(rng.integers(2, 5))
        truth = rng.integers(0, k, size=(h, w))
        pred = rng.integers(0, k, size=(h, w))
        logits = np.full((h, w, k), -60.0)
        for i in range(h):
            for j in range(w):
                logits[i, j, pred[i, j]] = 60.0
        value, _ = lovasz_softmax(logits, truth)
        oracle = float(np.mean([_jaccard_oracle(truth, pred, c) for c in np.unique(truth)]))
        worst = max(worst, abs(value - oracle))
    return {"passed": bool(worst < 1e-12), "worst_abs_err": worst, "tolerance": 1e-12}


def check_metric_oracles(rng: np.random.Generator, trials: int = 20) -> dict:
    """iou and pdd against per-pixel brute force."""
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(2, 5))
        truth = rng.integers(0, k, size=64)
        pred = rng.integers(0, k, size=64)
        per_class, _ = iou(ConfusionMatrix(k).add(truth, pred))
        for c in range(k):
            tp = np.sum((truth == c) & (pred == c))
            union = np.sum((truth == c) | (pred == c))
            if union:
                worst = max(worst, abs(per_class[c] - tp / union))

        dim = int(rng.integers(2, 6))
        feats = rng.standard_normal((40, dim))
        labels = rng.integers(0, k, size=40)
        means = rng.standard_normal((k, dim))
        got = pdd(feats, labels, means)
        for c in np.unique(labels):
            vals = []
            for x, lab in zip(feats, labels):
                if lab != c:
                    continue
                num = x @ means[c] / (np.linalg.norm(x) * np.linalg.norm(means[c]))
                den = 0.0
                for j in range(k):
                    if j == c:
                        continue
                    cj = x @ means[j] / (np.linalg.norm(x) * np.linalg.norm(means[j]))
                    den += max(cj, 0.0)
                vals.append(num / max(den, 1e-6))
            worst = max(worst, abs(got[int(c)] - float(np.mean(vals))))
    return {"passed": bool(worst < 1e-12), "worst_abs_err": worst, "tolerance": 1e-12}


CHECKS = {
    "streaming_merge": check_streaming_merge,
    "bound_vs_mc": check_bound_vs_mc,
    "bound_gradient": check_bound_gradient,
    "lovasz_vertex": check_lovasz_vertex,
    "metric_oracles": check_metric_oracles,
}


def run_all_checks(seed: int = 0) -> dict:
    report = {}
    for index, (name, fn) in enumerate(CHECKS.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        report[name] = fn(rng)
    report["all_passed"] = all(entry["passed"] for entry in report.values() if isinstance(entry, dict))
    return report
