"""Command-line front end.

Commands: train, eval, calibrate, ablate, inspect-filters. Commands take
a JSON experiment config (dataset/model/training/evaluation sections)
and/or a checkpoint, are deterministic given config + seed, and write
reports atomically (temp file, rename on success). Module errors surface
as a one-line diagnostic on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

from . import experiments, novelty_eval
from .dual_trainer import load_checkpoint, save_checkpoint, train
from .errors import (
    CalibrationError,
    ConfigError,
    NovnetError,
    ProtocolError,
    UnsupportedArchitectureError,
)
from .experiments import ABLATION_MODES, parse_experiment_config
from .filter_analysis import build_filter_report
from .nn_core import GlobalAveragePool

CHECKPOINT_NAME = "checkpoint.nvfg"


def _write_atomic(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _ensure_out(out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _load_config(args) -> experiments.ExperimentConfig:
    cfg = parse_experiment_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if overrides:
        cfg.training = type(cfg.training).from_dict({**cfg.training.to_dict(), **overrides})
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args.out)
    data = experiments.assemble_datasets(cfg.dataset)
    training = cfg.training
    if training.uses_reference and data.reference is None:
        raise ConfigError(f"mode {training.mode!r} needs a reference dataset")
    reference = data.reference if training.uses_reference else None
    num_reference = reference.n_classes if reference is not None else 0
    model = experiments.build_dual_model(
        cfg.backbone, data.train_T.n_classes, num_reference,
        seed=training.seed, combined_head=training.mode == "finetune-cC")
    model, history = train(model, data.train_T, reference, training)

    history_rows = [[h.epoch, repr(h.loss_ce_R), repr(h.loss_ce_T), repr(h.loss_m_T), repr(h.cumulative)]
                    for h in history]
    _write_atomic(os.path.join(out, "history.csv"),
                  _csv_text(["epoch", "loss_ce_R", "loss_ce_T", "loss_m_T", "cumulative"], history_rows))
    final_metrics = history[-1].to_dict() if history else {}
    checkpoint_path = os.path.join(out, CHECKPOINT_NAME)
    save_checkpoint(model, training, checkpoint_path, epoch=len(history), metrics=final_metrics)
    print(checkpoint_path)
    print(os.path.join(out, "history.csv"))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args.out)
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model
    data = experiments.assemble_datasets(cfg.dataset)
    if model.num_known != data.train_T.n_classes:
        raise ProtocolError(
            f"checkpoint has {model.num_known} known classes but dataset has {data.train_T.n_classes}")
    if data.novel is None or len(data.novel) == 0:
        raise ProtocolError("evaluation needs novel samples; AUC is undefined without them")

    known_records = novelty_eval.score_dataset(model, data.test_T, is_novel=False)
    novel_records = novelty_eval.score_dataset(model, data.novel, is_novel=True,
                                               start_id=len(known_records))
    records = known_records + novel_records
    roc = novelty_eval.roc_auc([r.score for r in known_records],
                               [r.score for r in novel_records])
    accuracy = novelty_eval.closed_set_accuracy(model, data.test_T)

    scores_path = os.path.join(out, "scores.csv")
    rows = [[r.sample_id, repr(r.score), r.predicted_class, r.true_class, int(r.is_novel)]
            for r in records]
    _write_atomic(scores_path, _csv_text(novelty_eval.SCORE_CSV_HEADER, rows))

    roc_rows = [[repr(t), repr(fpr), repr(tpr)] for t, (fpr, tpr) in zip(roc.thresholds, roc.points)]
    roc_rows.append(["auc", repr(roc.auc)])
    _write_atomic(os.path.join(out, "roc.csv"), _csv_text(["threshold", "fpr", "tpr"], roc_rows))

    summary = {
        "auc": round(roc.auc, 4),
        "accuracy": round(accuracy, 4),
        "n_known_test": len(known_records),
        "n_novel_test": len(novel_records),
    }
    _write_atomic(os.path.join(out, "summary.json"), json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args.out)
    target_fnr = args.target_fnr if args.target_fnr is not None else cfg.evaluation.target_fnr
    if not 0.0 < target_fnr < 1.0:
        raise ConfigError(f"target false-negative rate must be in (0, 1), got {target_fnr}")
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model
    data = experiments.assemble_datasets(cfg.dataset)
    if len(data.test_T) == 0:
        raise CalibrationError("no known validation samples to calibrate on")
    records = novelty_eval.score_dataset(model, data.test_T, is_novel=False)
    scores = [r.score for r in records]
    threshold = novelty_eval.calibrate_threshold(scores, target_fnr)
    payload = {
        "gamma": threshold.gamma,
        "percentile": threshold.percentile,
        "sample_count": threshold.sample_count,
        "realized_fnr": novelty_eval.realized_fnr(scores, threshold),
    }
    _write_atomic(os.path.join(out, "threshold.json"), json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args.out)
    modes = (args.mode,) if args.mode else ABLATION_MODES
    if "benchmark" not in cfg.dataset and "synthetic" not in cfg.dataset \
            and "reference_csv" not in cfg.dataset:
        raise ConfigError("ablation needs reference data (dual modes require it)")
    rows = experiments.run_ablation(cfg, modes=modes, n_seeds=args.seeds,
                                    base_seed=args.seed if args.seed is not None else None)
    csv_rows = [[row.mode, row.seed, repr(row.auc), repr(row.accuracy)] for row in rows]
    means = experiments.ablation_means(rows)
    for mode in modes:
        csv_rows.append([mode, "mean", repr(means[mode]), ""])
    _write_atomic(os.path.join(out, "ablation.csv"),
                  _csv_text(["mode", "seed", "auc", "accuracy"], csv_rows))
    for mode in modes:
        print(f"{mode}\t{means[mode]:.4f}")
    return 0


def cmd_inspect_filters(args) -> int:
    out = _ensure_out(args.out)
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model
    layers = model.backbone_spec.layers
    if not layers or not isinstance(layers[-1], GlobalAveragePool):
        raise UnsupportedArchitectureError(
            "filter inspection needs a backbone ending in global-average-pool feeding the dense head")
    weights = model.head_T["layer0.weight"][: model.num_known]
    report = build_filter_report(weights)
    _write_atomic(os.path.join(out, "filter_report.json"),
                  json.dumps(report.to_json_dict(), indent=2) + "\n")
    print(os.path.join(out, "filter_report.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="novnet",
        description="Train, evaluate, and inspect multiple-class novelty detection models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False, checkpoint=False):
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the training seed")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    add_common(p, config=True)
    p.add_argument("--mode", choices=experiments.ABLATION_MODES + ("finetune-cC",),
                   default=None, help="override the training mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score test data, write ROC/AUC and accuracy reports")
    add_common(p, config=True, checkpoint=True)
    p.set_defaults(func=cmd_eval, mode=None)

    p = sub.add_parser("calibrate", help="calibrate the novelty threshold from matched scores")
    add_common(p, config=True, checkpoint=True)
    p.add_argument("--target-fnr", type=float, default=None,
                   help="accepted false-negative rate (default: evaluation section, 0.05)")
    p.set_defaults(func=cmd_calibrate, mode=None)

    p = sub.add_parser("ablate", help="run the ablation matrix (modes x seeds)")
    add_common(p, config=True)
    p.add_argument("--seeds", type=int, default=10, help="number of repetitions per mode")
    p.add_argument("--mode", choices=experiments.ABLATION_MODES, default=None,
                   help="restrict to a single mode")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-filters", help="emit the per-class filter sign report")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect_filters, mode=None, seed=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NovnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
