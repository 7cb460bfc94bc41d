"""Dense vector/matrix primitives shared by every other module.

All math here is float64. Operations are pure functions; randomness only
enters through an explicit numpy Generator, so everything is reproducible
and safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NotPositiveDefiniteError",
    "quadratic_form",
    "log_softmax",
    "log_sum_exp",
    "cholesky",
    "psd_factor",
    "sample_gaussian",
]


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky factorization fails on a non-PD matrix."""


def _as_vector(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {q.shape}")
    return q


def _as_square(s, dim: int | None = None) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if dim is not None and s.shape[0] != dim:
        raise ValueError(f"dimension mismatch: vector dim {dim}, matrix dim {s.shape[0]}")
    return s


def quadratic_form(q, s) -> float:
    """q^T S q, evaluated on the symmetric part of S.

    Symmetrizing first makes quadratic_form(q, S) == quadratic_form(q, (S+S^T)/2)
    hold bit-exactly, which downstream covariance code relies on.
    """
    q = _as_vector(q)
    s = _as_square(s, q.shape[0])
    sym = 0.5 * (s + s.T)
    return float(q @ sym @ q)


def log_sum_exp(x, axis=-1):
    """Stable log(sum(exp(x))) along an axis."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(logits, axis=-1) -> np.ndarray:
    """Shift-invariant log softmax; exp of the result sums to 1."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_softmax of an empty array")
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cholesky(s) -> np.ndarray:
    """Lower-triangular L with L L^T = S.

    Raises NotPositiveDefiniteError when S is not positive definite; callers
    that can tolerate semidefinite inputs should go through psd_factor.
    """
    s = _as_square(s)
    if not np.allclose(s, s.T, rtol=1e-9, atol=1e-12):
        raise ValueError("cholesky requires a symmetric matrix")
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc


def psd_factor(s) -> np.ndarray:
    """A factor L with L L^T ~= S for symmetric PSD S, tolerant of rank deficiency.

    Tries Cholesky first; on failure retries with a scale-aware diagonal
    jitter eps = 1e-8 * trace(S)/D, and finally falls back to an
    eigendecomposition with negative eigenvalues clipped to zero (this is
    what handles S = 0 and other exactly-singular inputs).
    """
    s = _as_square(s)
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    d = s.shape[0]
    eps = 1e-8 * float(np.trace(s)) / d
    if eps > 0.0:
        try:
            return np.linalg.cholesky(s + eps * np.eye(d))
        except np.linalg.LinAlgError:
            pass
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_gaussian(mean, s, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n samples from N(mean, S) as an (n, D) array.

    Deterministic for a fixed Generator state. S only needs to be symmetric
    PSD; degenerate directions produce exactly-constant coordinates.
    """
    mean = _as_vector(mean)
    s = _as_square(s, mean.shape[0])
    if n < 0:
        raise ValueError("sample count must be non-negative")
    factor = psd_factor(s)
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + z @ factor.T
