"""A tiny per-pixel segmentation network with hand-written backpropagation.

Each pixel is classified from its local patch: patch -> hidden features via
a rectified linear layer -> class logits via a linear head. The hidden map
plays the role of the feature space (dim A) and the logit map the output
space (dim K) for the contrastive alignment. Two layers keep the exact
chain rule small enough to write out, which the analytic alignment
gradients plug into directly.

All parameters and activations are float64; training is single-threaded and
bit-reproducible under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .containers import read_arrays, write_arrays

__all__ = [
    "ModelParams",
    "ParamGrads",
    "ForwardCache",
    "OptimizerState",
    "init_params",
    "forward",
    "forward_cached",
    "backward",
    "sgd_step",
    "save_model",
    "load_model",
]


@dataclass
class ModelParams:
    w1: np.ndarray  # (A, patch*patch*C)
    b1: np.ndarray  # (A,)
    w2: np.ndarray  # (K, A)
    b2: np.ndarray  # (K,)
    patch: int
    channels: int

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.patch, self.channels
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ParamGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros_like(params: ModelParams) -> "ParamGrads":
        return ParamGrads(
            np.zeros_like(params.w1),
            np.zeros_like(params.b1),
            np.zeros_like(params.w2),
            np.zeros_like(params.b2),
        )

    def add_(self, other: "ParamGrads", scale: float = 1.0) -> "ParamGrads":
        self.w1 += scale * other.w1
        self.b1 += scale * other.b1
        self.w2 += scale * other.w2
        self.b2 += scale * other.b2
        return self


@dataclass
class ForwardCache:
    x: np.ndarray  # (H*W, P) extracted patches
    pre: np.ndarray  # (H*W, A) pre-activation
    hidden: np.ndarray  # (H*W, A) rectified features
    logits: np.ndarray  # (H*W, K)
    shape: tuple[int, int]

    @property
    def features(self) -> np.ndarray:
        h, w = self.shape
        return self.hidden.reshape(h, w, -1)

    @property
    def scores(self) -> np.ndarray:
        h, w = self.shape
        return self.logits.reshape(h, w, -1)


def init_params(rng: np.random.Generator, patch: int, channels: int, hidden: int, num_classes: int) -> ModelParams:
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch size must be odd and positive")
    fan_in = patch * patch * channels
    w1 = rng.standard_normal((hidden, fan_in)) * np.sqrt(2.0 / fan_in)
    w2 = rng.standard_normal((num_classes, hidden)) * np.sqrt(1.0 / hidden)
    return ModelParams(w1, np.zeros(hidden), w2, np.zeros(num_classes), patch, channels)


def extract_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Zero-padded local patches, one row per pixel: (H*W, patch*patch*C)."""
    image = np.asarray(image, dtype=np.float64)
    h, w, c = image.shape
    half = patch // 2
    padded = np.pad(image, ((half, half), (half, half), (0, 0)))
    slots = [padded[di : di + h, dj : dj + w, :] for di in range(patch) for dj in range(patch)]
    return np.stack(slots, axis=2).reshape(h * w, patch * patch * c)


def forward_cached(params: ModelParams, image: np.ndarray) -> ForwardCache:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != params.channels:
        raise ValueError(f"image must be (H, W, {params.channels}), got {image.shape}")
    x = extract_patches(image, params.patch)
    pre = x @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.w2.T + params.b2
    return ForwardCache(x, pre, hidden, logits, image.shape[:2])


def forward(params: ModelParams, image: np.ndarray):
    """Feature map (H, W, A) and score map (H, W, K) for one image."""
    cache = forward_cached(params, image)
    return cache.features, cache.scores


def backward(params: ModelParams, cache: ForwardCache, grad_features, grad_scores) -> ParamGrads:
    """Exact parameter gradients given upstream gradients on F and O.

    grad_features flows straight into the rectified hidden map; grad_scores
    flows into the logits. Either may be None. The rectifier gradient at 0
    is taken as 0.
    """
    n, a = cache.hidden.shape
    g_o = (
        np.zeros((n, params.num_classes))
        if grad_scores is None
        else np.asarray(grad_scores, dtype=np.float64).reshape(n, params.num_classes)
    )
    g_h = g_o @ params.w2
    if grad_features is not None:
        g_h = g_h + np.asarray(grad_features, dtype=np.float64).reshape(n, a)
    g_pre = g_h * (cache.pre > 0.0)
    return ParamGrads(
        w1=g_pre.T @ cache.x,
        b1=g_pre.sum(axis=0),
        w2=g_o.T @ cache.hidden,
        b2=g_o.sum(axis=0),
    )


@dataclass
class OptimizerState:
    """SGD with momentum, weight decay and polynomial LR decay."""

    base_lr: float = 2.5e-4
    power: float = 0.9
    max_iter: int = 40000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iteration: int = 0
    velocity: ParamGrads | None = None

    def lr(self) -> float:
        frac = min(self.iteration / self.max_iter, 1.0)
        return self.base_lr * (1.0 - frac) ** self.power


def sgd_step(opt: OptimizerState, params: ModelParams, grads: ParamGrads) -> ModelParams:
    """v <- momentum*v + grad + wd*param; param <- param - lr(iter)*v."""
    if opt.velocity is None:
        opt.velocity = ParamGrads.zeros_like(params)
    lr = opt.lr()
    for name in ("w1", "b1", "w2", "b2"):
        p = getattr(params, name)
        v = getattr(opt.velocity, name)
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch on {name}")
        v *= opt.momentum
        v += g + opt.weight_decay * p
        p -= lr * v
    opt.iteration += 1
    return params


def save_model(path, params: ModelParams) -> None:
    arrays = dict(params.arrays())
    arrays["meta"] = np.array([params.patch, params.channels], dtype=np.float64)
    write_arrays(path, arrays)


def load_model(path) -> ModelParams:
    arrays = read_arrays(path)
    patch, channels = (int(v) for v in arrays["meta"])
    return ModelParams(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], patch, channels)
