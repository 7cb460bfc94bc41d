"""Distribution-guided pixel-wise contrastive domain adaptation, desk scale.

The package trains a tiny per-pixel segmenter on synthetic source scenes,
estimates per-class Gaussian statistics of its features and outputs online,
and aligns source and confident target pixels to those distributions with a
closed-form contrastive bound, optionally followed by median-threshold
self-training. Everything is float64, seeded and reproducible.
"""

from .bank import ClassStats, DistributionBank, batch_stats, merge
from .config import ExperimentConfig, load_config
from .containers import IGNORE_ID
from .contrast import (
    LossResult,
    PixelBatch,
    batch_level_loss,
    closed_form_bound,
    finite_pair_loss,
    infonce_reference,
    mc_expected_loss,
)
from .linalg import cholesky, log_softmax, quadratic_form, sample_gaussian
from .metrics import ConfusionMatrix, iou, pdd
from .model import ModelParams, OptimizerState, backward, forward, init_params, sgd_step
from .pseudo import downsample_labels, median_thresholds, pseudo_labels, self_supervised_loss, target_mask
from .scenes import SceneSample, ShiftSpec, augment_source, generate
from .seglosses import cross_entropy, lovasz_softmax
from .train import evaluate, finetune_ssl, run_experiment, train_sdca

__version__ = "0.1.0"
