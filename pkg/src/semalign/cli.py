"""Command-line entry point: generate, train, eval, sweep, certify.

Every run writes a self-describing output directory: the exact config used,
a metrics CSV with fixed headers, and model/bank checkpoints. Identical
config and seed give byte-identical CSVs. The output directory resolves
against $SEMALIGN_OUT_ROOT when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, MODES, config_text, load_config
from .train import run_experiment

OUT_ROOT_ENV = "SEMALIGN_OUT_ROOT"

SWEEPABLE = ("tau", "delta", "lambda_lov", "lambda_feat", "lambda_out")

_METRIC_KEYS = ("source_miou", "target_miou", "target_miou_tail", "mean_pdd")


def _resolve_out_dir(out_dir: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _trace_headers(num_classes: int) -> list[str]:
    head = ["phase", "iteration", "loss_ce", "loss_lov", "loss_feat", "loss_out", "loss_ssl"]
    head += list(_METRIC_KEYS)
    head += [f"iou_{k}" for k in range(num_classes)]
    head += [f"pdd_{k}" for k in range(num_classes)]
    return head


def write_trace_csv(path, trace, num_classes: int) -> None:
    headers = _trace_headers(num_classes)
    lines = [",".join(headers)]
    for row in trace:
        lines.append(",".join(_fmt(row.get(h, float("nan"))) for h in headers))
    Path(path).write_text("\n".join(lines) + "\n")


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--mode", choices=MODES)
    sub.add_argument("--out-dir", dest="out_dir")
    sub.add_argument("--tau", type=float)
    sub.add_argument("--delta", type=float)
    sub.add_argument("--lambda-lov", dest="lambda_lov", type=float)
    sub.add_argument("--lambda-feat", dest="lambda_feat", type=float)
    sub.add_argument("--lambda-out", dest="lambda_out", type=float)


def _config_from_args(args) -> ExperimentConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in ("seed", "mode", "out_dir", "tau", "delta", "lambda_lov", "lambda_feat", "lambda_out")
    }
    return load_config(args.config, overrides)


def _write_run_outputs(out_dir: Path, config: ExperimentConfig, output, final: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(config))
    write_trace_csv(out_dir / "metrics.csv", output.trace, config.num_classes)
    from .model import save_model

    save_model(out_dir / "model.ckpt", output.params)
    output.feat_bank.save(out_dir / "bank_feature.ckpt")
    output.out_bank.save(out_dir / "bank_output.ckpt")
    summary = {"mode": config.mode, "seed": config.seed}
    summary.update({k: final.get(k) for k in _METRIC_KEYS})
    summary["per_class_iou"] = [final.get(f"iou_{k}") for k in range(config.num_classes)]
    summary["per_class_pdd"] = [final.get(f"pdd_{k}") for k in range(config.num_classes)]
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    from .scenes import save_dataset
    from .train import build_shift_spec, generate_datasets

    config = _config_from_args(args)
    out_dir = _resolve_out_dir(config.out_dir)
    train, evaluation = generate_datasets(config)
    save_dataset(train, out_dir / "train")
    save_dataset(evaluation, out_dir / "eval")
    (out_dir / "config.txt").write_text(config_text(config))
    spec = build_shift_spec(config)
    print(f"wrote {len(train)} train and {len(evaluation)} eval samples "
          f"({spec.height}x{spec.width}, K={spec.num_classes}) to {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    out_dir = _resolve_out_dir(config.out_dir)
    output, final = run_experiment(config)
    _write_run_outputs(out_dir, config, output, final)
    print(f"mode={config.mode} seed={config.seed} "
          f"target_miou={final['target_miou']:.4f} tail={final['target_miou_tail']:.4f} "
          f"mean_pdd={final['mean_pdd']:.4f}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .metrics import tail_classes
    from .model import load_model
    from .bank import DistributionBank
    from .train import evaluate, generate_datasets, source_class_frequencies, _by_domain

    config = _config_from_args(args)
    out_dir = _resolve_out_dir(config.out_dir)
    params = load_model(args.model)
    feat_bank = DistributionBank.load(args.bank_feature) if args.bank_feature else None
    train, evaluation = generate_datasets(config)
    source, _ = _by_domain(train)
    tails = tail_classes(source_class_frequencies(source, config.num_classes))
    metrics = evaluate(params, evaluation, feat_bank, tails)
    out_dir.mkdir(parents=True, exist_ok=True)
    headers = sorted(metrics)
    lines = [",".join(headers), ",".join(_fmt(metrics[h]) for h in headers)]
    (out_dir / "eval_metrics.csv").write_text("\n".join(lines) + "\n")
    print(json.dumps({k: metrics[k] for k in _METRIC_KEYS}, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    import dataclasses

    if args.parameter not in SWEEPABLE:
        print(f"unknown sweep parameter {args.parameter!r}; choose from {SWEEPABLE}", file=sys.stderr)
        return 2
    config = _config_from_args(args)
    out_dir = _resolve_out_dir(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in args.values:
        point = dataclasses.replace(config, **{args.parameter: value})
        point.validate()
        output, final = run_experiment(point)
        point_dir = out_dir / f"{args.parameter}_{value:g}"
        _write_run_outputs(point_dir, point, output, final)
        rows.append((value, final))
        print(f"{args.parameter}={value:g}: target_miou={final['target_miou']:.4f}")
    headers = ["parameter", "value", *_METRIC_KEYS]
    lines = [",".join(headers)]
    for value, final in rows:
        lines.append(",".join([args.parameter, repr(float(value))] + [_fmt(final[k]) for k in _METRIC_KEYS]))
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep table in {out_dir / 'sweep.csv'}")
    return 0


def cmd_certify(args) -> int:
    from .certify import run_all_checks

    report = run_all_checks(seed=args.seed if args.seed is not None else 0)
    for name, entry in report.items():
        if isinstance(entry, dict):
            print(f"{'PASS' if entry['passed'] else 'FAIL'} {name}: "
                  + ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}"
                              for k, v in entry.items() if k != "passed"))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0 if report["all_passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semalign",
        description="Distribution-guided contrastive domain adaptation on synthetic scenes",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="write a synthetic dataset to disk")
    _add_common_flags(p)
    p.set_defaults(fn=cmd_generate)

    p = subs.add_parser("train", help="run the training pipeline in the configured mode")
    _add_common_flags(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval", help="evaluate a saved model checkpoint")
    _add_common_flags(p)
    p.add_argument("--model", required=True, help="model checkpoint path")
    p.add_argument("--bank-feature", dest="bank_feature", help="feature bank checkpoint (for PDD)")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("sweep", help="run a sensitivity grid over one parameter")
    _add_common_flags(p)
    p.add_argument("--parameter", required=True, help=f"one of {SWEEPABLE}")
    p.add_argument("--values", required=True, nargs="+", type=float)
    p.set_defaults(fn=cmd_sweep)

    p = subs.add_parser("certify", help="run the property/oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write a JSON report here")
    p.set_defaults(fn=cmd_certify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
