"""Experiment configuration: defaults, flat key=value files, CLI overrides.

Config files are plain text, one `key = value` per line, `#` comments.
Values on the command line win over file values, which win over defaults.
Threshold and loss-weight defaults follow the published recipe (delta=0.9,
lambda_lov=0.75, lambda_feat=lambda_out=1.0); sizes and the learning rate
default to desk-scale values suited to the synthetic benchmark.
"""

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import get_type_hints

MODES = ("source_only", "lov", "feat_only", "multi_level", "full")
BANK_INIT_CHOICES = ("post_warmup", "pre_warmup")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "full"
    out_dir: str = "runs/default"

    # synthetic scenes
    height: int = 24
    width: int = 24
    channels: int = 3
    num_classes: int = 5
    n_source: int = 12
    n_target: int = 12
    n_eval: int = 8
    shift_bias: float = 0.5
    shift_gain: float = 1.3
    shift_noise: float = 0.05
    tail_fraction: float = 0.008
    color_spread: float = 1.0
    color_std: float = 0.12
    augment_jitter: float = 0.05
    augment_blur: float = 0.1

    # model
    patch_size: int = 3
    hidden_dim: int = 16

    # alignment
    tau: float = 16.0
    delta: float = 0.9
    lambda_lov: float = 0.75
    lambda_feat: float = 1.0
    lambda_out: float = 1.0
    normalize_queries: bool = False
    bank_init: str = "post_warmup"

    # optimization
    warmup_iters: int = 300
    adapt_iters: int = 400
    ssl_iters: int = 150
    batch_pairs: int = 2
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    eval_every: int = 100

    def validate(self) -> "ExperimentConfig":
        def require(cond, field, why):
            if not cond:
                raise ConfigError(f"{field}: {why}")

        require(self.mode in MODES, "mode", f"must be one of {MODES}")
        require(self.bank_init in BANK_INIT_CHOICES, "bank_init", f"must be one of {BANK_INIT_CHOICES}")
        require(self.height >= 8 and self.width >= 8, "height/width", "must be at least 8")
        require(self.num_classes >= 2, "num_classes", "must be at least 2")
        require(self.channels >= 1, "channels", "must be positive")
        require(self.n_source >= 1 and self.n_target >= 1, "n_source/n_target", "must be positive")
        require(self.n_eval >= 1, "n_eval", "must be positive")
        require(self.patch_size >= 1 and self.patch_size % 2 == 1, "patch_size", "must be odd")
        require(self.hidden_dim >= 1, "hidden_dim", "must be positive")
        require(self.tau > 0, "tau", "must be positive")
        require(0.0 <= self.delta <= 1.0, "delta", "must lie in [0, 1]")
        for name in ("lambda_lov", "lambda_feat", "lambda_out"):
            require(getattr(self, name) >= 0, name, "must be non-negative")
        require(self.shift_gain > 0, "shift_gain", "must be positive")
        require(self.shift_noise >= 0, "shift_noise", "must be non-negative")
        require(0 < self.tail_fraction < 1, "tail_fraction", "must lie in (0, 1)")
        require(self.color_std > 0, "color_std", "must be positive")
        require(self.augment_jitter >= 0, "augment_jitter", "must be non-negative")
        require(0.0 <= self.augment_blur <= 1.0, "augment_blur", "must lie in [0, 1]")
        for name in ("warmup_iters", "adapt_iters", "ssl_iters"):
            require(getattr(self, name) >= 0, name, "must be non-negative")
        require(self.batch_pairs >= 1, "batch_pairs", "must be positive")
        require(self.base_lr > 0, "base_lr", "must be positive")
        require(0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)")
        require(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        require(self.eval_every >= 1, "eval_every", "must be positive")
        return self


_FIELD_TYPES = get_type_hints(ExperimentConfig)
_FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def _convert(field: str, raw: str):
    kind = _FIELD_TYPES[field]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{field}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{field}: {exc}") from exc


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_NAMES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    return ExperimentConfig(**values).validate()


def config_text(config: ExperimentConfig) -> str:
    """Echo of every field, parseable by load_config."""
    lines = [f"{name} = {getattr(config, name)}" for name in _FIELD_NAMES]
    return "\n".join(lines) + "\n"
