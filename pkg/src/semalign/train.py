"""End-to-end training: warm-up, statistics-guided alignment, self-training.

The procedure follows a fixed recipe. A source-only cross-entropy warm-up
comes first. Both statistics banks (hidden features and classifier outputs)
are then initialized by one pass over the source set. The adaptation loop
samples paired source/target images, refreshes the banks from the source
pixels, builds the confidence-gated target mask, and descends the combined
objective

    ce + lambda_lov * jaccard surrogate
       + lambda_feat * feature alignment + lambda_out * output alignment

with SGD under a polynomial learning-rate schedule. Optionally a final
self-training stage fine-tunes on frozen median-threshold pseudo labels.

Ablation modes toggle terms of this one code path, so runs stay comparable:
source_only (ce), lov (+jaccard), feat_only (+feature alignment),
multi_level (+output alignment), full (+self-training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import DistributionBank
from .config import ExperimentConfig
from .containers import IGNORE_ID
from .contrast import PixelBatch, batch_level_loss
from .metrics import ConfusionMatrix, iou, pdd, tail_classes
from .model import (
    ForwardCache,
    ModelParams,
    OptimizerState,
    ParamGrads,
    backward,
    forward_cached,
    init_params,
    sgd_step,
)
from .pseudo import downsample_labels, median_thresholds, pseudo_labels, target_mask
from .scenes import ShiftSpec, augment_source, default_shift_spec, generate
from .seglosses import NoValidPixelsError, cross_entropy, lovasz_softmax

__all__ = [
    "build_shift_spec",
    "generate_datasets",
    "train_sdca",
    "finetune_ssl",
    "evaluate",
    "run_experiment",
    "TrainOutput",
]


def build_shift_spec(config: ExperimentConfig, zero_shift: bool = False) -> ShiftSpec:
    return default_shift_spec(
        num_classes=config.num_classes,
        channels=config.channels,
        height=config.height,
        width=config.width,
        bias=0.0 if zero_shift else config.shift_bias,
        gain=1.0 if zero_shift else config.shift_gain,
        noise=0.0 if zero_shift else config.shift_noise,
        tail_fraction=config.tail_fraction,
        color_spread=config.color_spread,
        color_std=config.color_std,
    )


def generate_datasets(config: ExperimentConfig):
    """(train samples, eval samples); eval holds n_eval source + n_eval target."""
    spec = build_shift_spec(config)
    train = generate(spec, config.seed, config.n_source, config.n_target)
    evaluation = generate(spec, config.seed + 86243, config.n_eval, config.n_eval)
    return train, evaluation


def _by_domain(samples):
    source = [s for s in samples if s.domain == "source"]
    target = [s for s in samples if s.domain == "target"]
    return source, target


def source_class_frequencies(source_samples, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes)
    for s in source_samples:
        labels = s.labels.reshape(-1)
        labels = labels[labels != IGNORE_ID]
        counts += np.bincount(labels, minlength=num_classes)
    return counts / max(counts.sum(), 1.0)


@dataclass
class _Toggles:
    use_lov: bool
    use_feat: bool
    use_out: bool
    use_ssl: bool

    @staticmethod
    def for_mode(mode: str) -> "_Toggles":
        return _Toggles(
            use_lov=mode != "source_only",
            use_feat=mode in ("feat_only", "multi_level", "full"),
            use_out=mode in ("multi_level", "full"),
            use_ssl=mode == "full",
        )


@dataclass
class TrainOutput:
    params: ModelParams
    feat_bank: DistributionBank
    out_bank: DistributionBank
    trace: list[dict]


def _init_banks(config: ExperimentConfig, params: ModelParams, source_samples) -> tuple[DistributionBank, DistributionBank]:
    feat_bank = DistributionBank(config.hidden_dim, config.num_classes, "feature")
    out_bank = DistributionBank(config.num_classes, config.num_classes, "output")

    def stream(space: str):
        for s in source_samples:
            cache = forward_cached(params, s.image)
            mask = downsample_labels(s.labels, *cache.shape)
            yield (cache.features if space == "feature" else cache.scores), mask

    feat_bank.init_from_dataset(stream("feature"))
    out_bank.init_from_dataset(stream("output"))
    return feat_bank, out_bank


def _masked_batch(vectors_map: np.ndarray, mask: np.ndarray, domain: str, bank: DistributionBank):
    flat = vectors_map.reshape(-1, vectors_map.shape[-1])
    labels = np.asarray(mask).reshape(-1)
    idx = np.flatnonzero(labels != IGNORE_ID)
    if domain == "target" and idx.size:
        # a predicted class the bank never saw cannot act as a positive
        init_mask = np.zeros(bank.num_classes, dtype=bool)
        init_mask[bank.initialized_classes()] = True
        idx = idx[init_mask[labels[idx]]]
    return PixelBatch(flat[idx], labels[idx], domain), idx


def _alignment_terms(
    cache_s: ForwardCache,
    cache_t: ForwardCache | None,
    mask_s: np.ndarray,
    mask_t: np.ndarray | None,
    bank: DistributionBank,
    space: str,
    tau: float,
    normalize_queries: bool,
):
    """Alignment loss for one source/target pair in one space.

    Returns (value, grad map on the source queries, grad map on the target
    queries or None)."""
    vec_s = cache_s.features if space == "feature" else cache_s.scores
    batch_s, idx_s = _masked_batch(vec_s, mask_s, "source", bank)
    batch_t, idx_t = (None, None)
    if cache_t is not None:
        vec_t = cache_t.features if space == "feature" else cache_t.scores
        batch_t, idx_t = _masked_batch(vec_t, mask_t, "target", bank)
    result = batch_level_loss(batch_s, batch_t, bank, tau, normalize_queries=normalize_queries)

    grad_s = np.zeros((vec_s.shape[0] * vec_s.shape[1], vec_s.shape[2]))
    grad_s[idx_s] = result.grads_source
    grad_t = None
    if cache_t is not None:
        grad_t = np.zeros((vec_t.shape[0] * vec_t.shape[1], vec_t.shape[2]))
        if len(batch_t):
            grad_t[idx_t] = result.grads_target
    return result.value, grad_s, grad_t


def _log_row(trace, phase, iteration, losses, metrics=None):
    row = {"phase": phase, "iteration": iteration}
    for key in ("loss_ce", "loss_lov", "loss_feat", "loss_out", "loss_ssl"):
        row[key] = losses.get(key, 0.0)
    row.update(metrics or {})
    trace.append(row)


class _LossWindow:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def push(self, values: dict):
        for key, val in values.items():
            self.sums[key] = self.sums.get(key, 0.0) + val
        self.n += 1

    def means(self) -> dict:
        if self.n == 0:
            return {}
        return {k: v / self.n for k, v in self.sums.items()}

    def reset(self):
        self.sums, self.n = {}, 0


def train_sdca(config: ExperimentConfig, train_samples, eval_samples=None) -> TrainOutput:
    """Warm-up, bank initialization and the adaptation loop (no self-training)."""
    toggles = _Toggles.for_mode(config.mode)
    source_samples, target_samples = _by_domain(train_samples)
    if not source_samples:
        raise ValueError("training set has no source samples")
    needs_target = toggles.use_feat or toggles.use_out
    if needs_target and not target_samples:
        raise ValueError("adaptation requires target samples")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7151]))
    params = init_params(
        rng, config.patch_size, config.channels, config.hidden_dim, config.num_classes
    )
    opt = OptimizerState(
        base_lr=config.base_lr,
        power=config.lr_power,
        max_iter=max(config.warmup_iters + config.adapt_iters, 1),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    trace: list[dict] = []
    window = _LossWindow()
    freqs = source_class_frequencies(source_samples, config.num_classes)
    tails = tail_classes(freqs)

    banks = None
    if config.bank_init == "pre_warmup":
        banks = _init_banks(config, params, source_samples)

    def maybe_eval(phase, iteration, force=False):
        if eval_samples is None:
            return
        if force or (iteration + 1) % config.eval_every == 0:
            feat_bank = banks[0] if banks else None
            metrics = evaluate(params, eval_samples, feat_bank, tails)
            _log_row(trace, phase, iteration + 1, window.means(), metrics)
            window.reset()

    def pick(samples, count):
        return [samples[i] for i in rng.integers(0, len(samples), size=count)]

    # stage 1: source-only cross-entropy warm-up
    for it in range(config.warmup_iters):
        grads = ParamGrads.zeros_like(params)
        ce_total = 0.0
        batch = pick(source_samples, config.batch_pairs)
        for s in batch:
            s = augment_source(s, rng, config.augment_jitter, config.augment_blur)
            cache = forward_cached(params, s.image)
            ce, g_ce = cross_entropy(cache.scores, s.labels)
            ce_total += ce
            grads.add_(backward(params, cache, None, g_ce), scale=1.0 / len(batch))
        sgd_step(opt, params, grads)
        window.push({"loss_ce": ce_total / len(batch)})
        maybe_eval("warmup", it)

    # stage 2: initialize both banks over the source set
    if banks is None:
        banks = _init_banks(config, params, source_samples)
    feat_bank, out_bank = banks

    # stage 3: paired adaptation iterations
    for it in range(config.adapt_iters):
        grads = ParamGrads.zeros_like(params)
        pairs = list(zip(pick(source_samples, config.batch_pairs),
                         pick(target_samples, config.batch_pairs) if target_samples else []))
        if not pairs:
            pairs = [(s, None) for s in pick(source_samples, config.batch_pairs)]
        losses = {"loss_ce": 0.0, "loss_lov": 0.0, "loss_feat": 0.0, "loss_out": 0.0}
        n_pairs = len(pairs)
        for s, t in pairs:
            s = augment_source(s, rng, config.augment_jitter, config.augment_blur)
            cache_s = forward_cached(params, s.image)
            mask_s = downsample_labels(s.labels, *cache_s.shape)
            feat_bank.update_with_image(cache_s.features, mask_s)
            out_bank.update_with_image(cache_s.scores, mask_s)

            cache_t = mask_t = None
            if t is not None and needs_target:
                cache_t = forward_cached(params, t.image)
                mask_t = target_mask(cache_t.scores, config.delta).labels

            ce, g_o_s = cross_entropy(cache_s.scores, s.labels)
            losses["loss_ce"] += ce / n_pairs
            if toggles.use_lov:
                lov, g_lov = lovasz_softmax(cache_s.scores, s.labels)
                losses["loss_lov"] += lov / n_pairs
                g_o_s = g_o_s + config.lambda_lov * g_lov

            g_f_s = g_f_t = g_o_t = None
            if toggles.use_feat:
                val, gs, gt = _alignment_terms(
                    cache_s, cache_t, mask_s, mask_t, feat_bank, "feature",
                    config.tau, config.normalize_queries,
                )
                losses["loss_feat"] += val / n_pairs
                g_f_s = config.lambda_feat * gs
                g_f_t = None if gt is None else config.lambda_feat * gt
            if toggles.use_out:
                val, gs, gt = _alignment_terms(
                    cache_s, cache_t, mask_s, mask_t, out_bank, "output",
                    config.tau, config.normalize_queries,
                )
                losses["loss_out"] += val / n_pairs
                g_o_s = g_o_s + config.lambda_out * gs.reshape(g_o_s.shape)
                if gt is not None:
                    g_o_t = config.lambda_out * gt

            grads.add_(backward(params, cache_s, g_f_s, g_o_s), scale=1.0 / n_pairs)
            if cache_t is not None and (g_f_t is not None or g_o_t is not None):
                grads.add_(backward(params, cache_t, g_f_t, g_o_t), scale=1.0 / n_pairs)
        sgd_step(opt, params, grads)
        window.push(losses)
        maybe_eval("adapt", config.warmup_iters + it)

    return TrainOutput(params, feat_bank, out_bank, trace)


def finetune_ssl(config: ExperimentConfig, params: ModelParams, target_samples, trace=None, eval_samples=None, tails=(), feat_bank=None) -> ModelParams:
    """Self-training on pseudo labels frozen at generation time."""
    if not target_samples:
        raise ValueError("self-training requires target samples")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 9973]))
    thresholds = median_thresholds(
        (forward_cached(params, s.image).scores for s in target_samples), config.num_classes
    )
    frozen = [pseudo_labels(forward_cached(params, s.image).scores, thresholds).labels for s in target_samples]
    if all(np.all(lab == IGNORE_ID) for lab in frozen):
        raise NoValidPixelsError("every pseudo label was rejected")

    opt = OptimizerState(
        base_lr=config.base_lr,
        power=config.lr_power,
        max_iter=max(config.ssl_iters, 1),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    window = _LossWindow()
    for it in range(config.ssl_iters):
        grads = ParamGrads.zeros_like(params)
        idx = rng.integers(0, len(target_samples), size=config.batch_pairs)
        ssl_total = 0.0
        for i in idx:
            if np.all(frozen[i] == IGNORE_ID):
                continue
            cache = forward_cached(params, target_samples[i].image)
            ssl, g = cross_entropy(cache.scores, frozen[i])
            ssl_total += ssl
            grads.add_(backward(params, cache, None, g), scale=1.0 / idx.size)
        sgd_step(opt, params, grads)
        window.push({"loss_ssl": ssl_total / idx.size})
        if trace is not None and eval_samples is not None and (it + 1) % config.eval_every == 0:
            metrics = evaluate(params, eval_samples, feat_bank, tails)
            _log_row(trace, "ssl", it + 1, window.means(), metrics)
            window.reset()
    return params


def evaluate(params: ModelParams, eval_samples, feat_bank: DistributionBank | None, tails) -> dict:
    """Target mIoU / tail mIoU / discrimination distances, plus source mIoU."""
    num_classes = params.num_classes
    conf_t = ConfusionMatrix(num_classes)
    conf_s = ConfusionMatrix(num_classes)
    feats, feat_labels = [], []
    for s in eval_samples:
        cache = forward_cached(params, s.image)
        pred = cache.scores.argmax(axis=-1)
        if s.domain == "target":
            conf_t.add(s.labels, pred)
            feats.append(cache.hidden)
            feat_labels.append(downsample_labels(s.labels, *cache.shape).reshape(-1))
        else:
            conf_s.add(s.labels, pred)

    per_class_t, miou_t = iou(conf_t)
    _, miou_s = iou(conf_s)
    metrics = {"target_miou": miou_t, "source_miou": miou_s}
    tail_vals = [per_class_t[k] for k in tails if not np.isnan(per_class_t[k])]
    metrics["target_miou_tail"] = float(np.mean(tail_vals)) if tail_vals else float("nan")
    for k in range(num_classes):
        metrics[f"iou_{k}"] = float(per_class_t[k])

    pdd_by_class = {}
    if feat_bank is not None and feats:
        initialized = feat_bank.initialized_classes()
        features = np.concatenate(feats)
        labels = np.concatenate(feat_labels)
        keep = np.isin(labels, initialized)
        if np.any(keep) and len(initialized) >= 2:
            pdd_by_class = pdd(
                features[keep], labels[keep], feat_bank.means_matrix(), initialized
            )
    for k in range(num_classes):
        metrics[f"pdd_{k}"] = float(pdd_by_class.get(k, float("nan")))
    vals = [v for v in pdd_by_class.values()]
    metrics["mean_pdd"] = float(np.mean(vals)) if vals else float("nan")
    return metrics


def run_experiment(config: ExperimentConfig) -> tuple[TrainOutput, dict]:
    """Generate data, train in the configured mode, evaluate; returns (output, final metrics)."""
    train_samples, eval_samples = generate_datasets(config)
    source_samples, target_samples = _by_domain(train_samples)
    freqs = source_class_frequencies(source_samples, config.num_classes)
    tails = tail_classes(freqs)

    output = train_sdca(config, train_samples, eval_samples)
    if _Toggles.for_mode(config.mode).use_ssl:
        finetune_ssl(
            config, output.params, target_samples,
            trace=output.trace, eval_samples=eval_samples, tails=tails, feat_bank=output.feat_bank,
        )
    final = evaluate(output.params, eval_samples, output.feat_bank, tails)
    _log_row(output.trace, "final", config.warmup_iters + config.adapt_iters + config.ssl_iters,
             {}, final)
    return output, final
