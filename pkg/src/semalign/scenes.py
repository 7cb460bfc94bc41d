"""Synthetic paired source/target segmentation scenes with a controllable shift.

Scenes are built from smooth random fields: each class gets a bumpy score
surface and claims exactly its budgeted number of pixels from the highest
scores, which produces blob-shaped regions with exact class frequencies.
Pixel colors are drawn from per-class Gaussians; target-domain images then
get a global appearance shift (channel gain, additive bias, extra noise).

Everything derives from a master seed: sample i uses SeedSequence([seed, i]),
so generation is order-independent and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import read_manifest, read_raster, write_manifest, write_raster
from .linalg import sample_gaussian

__all__ = ["SceneSample", "ShiftSpec", "generate", "augment_source", "save_dataset", "load_dataset"]


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, C) float64
    labels: np.ndarray  # (H, W) int32
    domain: str  # "source" | "target"


@dataclass
class ShiftSpec:
    """Scene geometry, per-class appearance and the source->target shift."""

    height: int
    width: int
    channels: int
    class_means: np.ndarray  # (K, C) color means
    class_covs: np.ndarray  # (K, C, C) color covariances
    class_freqs: np.ndarray  # (K,) pixel-share budget, sums to 1
    bias: np.ndarray = None  # (C,) additive target shift
    gain: np.ndarray = None  # (C,) multiplicative target shift, > 0
    noise: float = 0.0  # extra target noise std
    bumps_per_class: int = 3

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.class_covs = np.asarray(self.class_covs, dtype=np.float64)
        self.class_freqs = np.asarray(self.class_freqs, dtype=np.float64)
        k = self.class_means.shape[0]
        if k < 2:
            raise ValueError("need at least two classes")
        if self.height < 8 or self.width < 8:
            raise ValueError("scene dims must be at least 8x8")
        if self.class_covs.shape != (k, self.channels, self.channels):
            raise ValueError("class_covs must be (K, C, C)")
        if self.class_freqs.shape != (k,) or np.any(self.class_freqs <= 0):
            raise ValueError("class_freqs must be positive, one per class")
        if not np.isclose(self.class_freqs.sum(), 1.0, atol=1e-9):
            raise ValueError("class_freqs must sum to 1")
        self.bias = np.zeros(self.channels) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        self.gain = np.ones(self.channels) if self.gain is None else np.asarray(self.gain, dtype=np.float64)
        if np.any(self.gain <= 0):
            raise ValueError("channel gains must be positive")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]


def default_shift_spec(
    num_classes: int = 5,
    channels: int = 3,
    height: int = 24,
    width: int = 24,
    bias: float = 0.5,
    gain: float = 1.3,
    noise: float = 0.05,
    tail_fraction: float = 0.008,
    color_spread: float = 1.0,
    color_std: float = 0.12,
) -> ShiftSpec:
    """A deterministic spec: well-separated class colors, one tail class."""
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = color_spread * np.stack(
        [np.cos(angles), np.sin(angles), np.cos(2.0 * angles)], axis=1
    )[:, :channels]
    if channels > 3:
        means = np.pad(means, ((0, 0), (0, channels - 3)))
    covs = np.tile((color_std**2) * np.eye(channels), (num_classes, 1, 1))
    # last class is the tail; remaining mass decays geometrically over the rest
    head = np.geomspace(1.0, 0.45, num_classes - 1)
    head = head / head.sum() * (1.0 - tail_fraction)
    freqs = np.concatenate([head, [tail_fraction]])
    return ShiftSpec(
        height,
        width,
        channels,
        means,
        covs,
        freqs,
        bias=np.full(channels, bias),
        gain=np.full(channels, gain),
        noise=noise,
    )


def _class_counts(freqs: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment with a floor of one pixel per class."""
    raw = freqs * total
    counts = np.floor(raw).astype(int)
    counts = np.maximum(counts, 1)
    while counts.sum() > total:
        counts[np.argmax(counts)] -= 1
    remainder = raw - np.floor(raw)
    while counts.sum() < total:
        order = np.argsort(-remainder, kind="stable")
        for k in order:
            if counts.sum() == total:
                break
            counts[k] += 1
            remainder[k] = -1.0
    return counts


def _bump_field(h: int, w: int, rng: np.random.Generator, bumps: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fld = np.zeros((h, w))
    scale = min(h, w)
    for _ in range(bumps):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.12, 0.35) * scale
        amp = rng.uniform(0.5, 1.5)
        fld += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
    return fld


def _make_labels(spec: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, k = spec.height, spec.width, spec.num_classes
    counts = _class_counts(spec.class_freqs, h * w)
    fields = np.stack([_bump_field(h, w, rng, spec.bumps_per_class).reshape(-1) for _ in range(k)])
    labels = np.full(h * w, -1, dtype=np.int32)
    # small classes claim their best pixels first so blobs survive
    for cls in np.argsort(counts, kind="stable"):
        free = np.flatnonzero(labels < 0)
        take = free[np.argsort(-fields[cls, free], kind="stable")[: counts[cls]]]
        labels[take] = cls
    return labels.reshape(h, w)


def _paint(labels: np.ndarray, spec: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    image = np.empty((h, w, spec.channels))
    flat = labels.reshape(-1)
    out = image.reshape(-1, spec.channels)
    for k in range(spec.num_classes):
        idx = np.flatnonzero(flat == k)
        if idx.size:
            out[idx] = sample_gaussian(spec.class_means[k], spec.class_covs[k], rng, idx.size)
    return image


def apply_domain_shift(image: np.ndarray, spec: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    shifted = image * spec.gain + spec.bias
    if spec.noise > 0:
        shifted = shifted + spec.noise * rng.standard_normal(image.shape)
    return shifted


def generate(spec: ShiftSpec, seed: int, n_source: int, n_target: int) -> list[SceneSample]:
    """n_source source samples followed by n_target shifted target samples."""
    samples = []
    for i in range(n_source + n_target):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        labels = _make_labels(spec, rng)
        image = _paint(labels, spec, rng)
        domain = "source" if i < n_source else "target"
        if domain == "target":
            image = apply_domain_shift(image, spec, rng)
        samples.append(SceneSample(image, labels, domain))
    return samples


def augment_source(sample: SceneSample, rng: np.random.Generator, jitter: float = 0.0, blur: float = 0.0) -> SceneSample:
    """Channel jitter plus box blur; labels untouched, zero strength is identity."""
    if jitter < 0 or not 0.0 <= blur <= 1.0:
        raise ValueError("jitter must be >= 0 and blur in [0, 1]")
    image = sample.image
    if jitter > 0:
        image = image + rng.uniform(-jitter, jitter, size=image.shape[-1])
    if blur > 0:
        padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
        box = np.zeros_like(image)
        for di in range(3):
            for dj in range(3):
                box += padded[di : di + image.shape[0], dj : dj + image.shape[1]]
        image = (1.0 - blur) * image + blur * (box / 9.0)
    return SceneSample(image, sample.labels, sample.domain)


def save_dataset(samples, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        image_rel = f"sample_{i:05d}_image.rast"
        label_rel = f"sample_{i:05d}_label.rast"
        write_raster(out_dir / image_rel, s.image)
        write_raster(out_dir / label_rel, s.labels.astype(np.int32))
        entries.append((i, s.domain, image_rel, label_rel))
    write_manifest(out_dir / "manifest.txt", entries)


def load_dataset(in_dir) -> list[SceneSample]:
    in_dir = Path(in_dir)
    samples = []
    for _, domain, image_rel, label_rel in read_manifest(in_dir / "manifest.txt"):
        samples.append(
            SceneSample(read_raster(in_dir / image_rel), read_raster(in_dir / label_rel), domain)
        )
    return samples
