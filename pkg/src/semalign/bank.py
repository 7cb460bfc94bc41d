"""Per-class Gaussian statistics estimated online from labeled source pixels.

A bank keeps K (count, mean, covariance) triples of a common dimensionality
and is updated by merging per-image batch statistics. Covariances use the
population (divide-by-n) convention, under which the pairwise merge below is
exact. Two banks are used in training: one over hidden features, one over
classifier outputs.

The bank is a plain buffer: nothing differentiates through it, and updates
replace ClassStats objects instead of mutating them, so a snapshot() taken
by a reader stays frozen while the writer keeps merging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .containers import IGNORE_ID, read_bank_blob, write_bank_blob

__all__ = ["ClassStats", "DistributionBank", "batch_stats", "merge"]


@dataclass(frozen=True)
class ClassStats:
    """Running pixel count, mean vector and covariance matrix of one class."""

    count: int
    mean: np.ndarray
    cov: np.ndarray

    @property
    def initialized(self) -> bool:
        return self.count > 0

    @staticmethod
    def empty(dim: int) -> "ClassStats":
        return ClassStats(0, np.zeros(dim), np.zeros((dim, dim)))


def batch_stats(pixels) -> tuple[int, np.ndarray, np.ndarray]:
    """Count, mean and population covariance of a set of vectors.

    pixels: (m, D) array or a sequence of length-D vectors, m >= 1.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch_stats needs at least one pixel vector")
    m = x.shape[0]
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / m
    return m, mu, cov


def merge(stats: ClassStats, m: int, mu_batch, cov_batch) -> ClassStats:
    """Fold batch statistics (m, mu', cov') into running stats, exactly.

    With population covariances the pooled covariance is the count-weighted
    average of the two covariances plus a rank-one term from the mean gap.
    """
    mu_batch = np.asarray(mu_batch, dtype=np.float64)
    cov_batch = np.asarray(cov_batch, dtype=np.float64)
    if m < 1:
        raise ValueError("batch count must be >= 1")
    if mu_batch.shape != stats.mean.shape or cov_batch.shape != stats.cov.shape:
        raise ValueError("dimension mismatch in merge")
    n = stats.count
    if n == 0:
        return ClassStats(m, mu_batch.copy(), cov_batch.copy())
    total = n + m
    mean = (n * stats.mean + m * mu_batch) / total
    gap = stats.mean - mu_batch
    cov = (n * stats.cov + m * cov_batch) / total + (n * m) * np.outer(gap, gap) / total**2
    return ClassStats(total, mean, cov)


def _flatten_map(pixel_map) -> np.ndarray:
    arr = np.asarray(pixel_map, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[-1])
    if arr.ndim != 2:
        raise ValueError(f"pixel map must be (H, W, D) or (N, D), got {arr.shape}")
    return arr


@dataclass
class DistributionBank:
    """K per-class Gaussian statistics over a feature or output space."""

    dim: int
    num_classes: int
    space_tag: str = "feature"
    diag_only: bool = False
    classes: list[ClassStats] = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a bank needs at least two classes")
        if self.space_tag not in ("feature", "output"):
            raise ValueError(f"unknown space tag {self.space_tag!r}")
        if not self.classes:
            self.classes = [ClassStats.empty(self.dim) for _ in range(self.num_classes)]

    def stats(self, k: int) -> ClassStats:
        return self.classes[k]

    def initialized_classes(self) -> list[int]:
        return [k for k, st in enumerate(self.classes) if st.initialized]

    @property
    def total_count(self) -> int:
        return sum(st.count for st in self.classes)

    def snapshot(self) -> "DistributionBank":
        # ClassStats are replaced, never mutated, so a shallow copy is a
        # stable read-only view.
        return DistributionBank(
            self.dim, self.num_classes, self.space_tag, self.diag_only, list(self.classes)
        )

    def update_with_image(self, pixel_map, labels) -> "DistributionBank":
        """Merge per-class batch stats of one image; absent classes untouched."""
        x = _flatten_map(pixel_map)
        y = np.asarray(labels).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise ValueError("pixel map and label map sizes differ")
        if x.shape[1] != self.dim:
            raise ValueError(f"pixel dim {x.shape[1]} != bank dim {self.dim}")
        for k in np.unique(y):
            if k == IGNORE_ID:
                continue
            if k < 0 or k >= self.num_classes:
                raise ValueError(f"label {k} outside [0, {self.num_classes})")
            m, mu, cov = batch_stats(x[y == k])
            if self.diag_only:
                cov = np.diag(np.diag(cov))
            self.classes[k] = merge(self.classes[k], m, mu, cov)
        return self

    def init_from_dataset(self, samples) -> "DistributionBank":
        """Stream (pixel_map, label_map) pairs through update_with_image."""
        for pixel_map, labels in samples:
            self.update_with_image(pixel_map, labels)
        return self

    def means_matrix(self) -> np.ndarray:
        return np.stack([st.mean for st in self.classes])

    def save(self, path) -> None:
        write_bank_blob(
            path, self.dim, self.space_tag, [(st.count, st.mean, st.cov) for st in self.classes]
        )

    @staticmethod
    def load(path) -> "DistributionBank":
        dim, space_tag, classes = read_bank_blob(path)
        bank = DistributionBank(dim, len(classes), space_tag)
        bank.classes = [ClassStats(c, m, s) for c, m, s in classes]
        return bank
