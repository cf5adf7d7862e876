"""Command-line interface.

Exit codes: 0 success, 1 input/validation error, 2 runtime or numeric failure.
Human-readable messages go to stderr; machine output goes to files or stdout.
Flag precedence for train: command-line flags > --config file > defaults, and
the resolved configuration is echoed into every output artifact (inline for
JSON artifacts, as a <name>.meta.json sidecar for CSV/JSONL ones).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import inference, metrics
from .data import (Dataset, TaskSchema, generate_synthetic, load_jsonl,
                   split_subject_independent, write_jsonl)
from .errors import (CaptionError, CheckpointError, ParseError, SchemaError,
                     SplitError, StylespaceError)
from .gradcheck import run_grad_check
from .trainer import TrainConfig, load_checkpoint, run_training

VALIDATION_ERRORS = (SchemaError, ParseError, SplitError, CaptionError,
                     CheckpointError, ValueError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise ValueError(message)


def _write_sidecar(out_path, command: str, resolved: dict) -> None:
    meta = {"command": command, "config": resolved}
    Path(str(out_path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _flag_config(args) -> TrainConfig:
    """Resolve a TrainConfig from defaults, then --config file, then flags."""
    values = dataclasses.asdict(TrainConfig())
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"config file {args.config}: {exc}") from exc
        unknown = set(file_values) - set(values)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    flag_map = {
        "steps": "max_steps", "batch_size": "batch_size", "lr": "learning_rate",
        "tau": "tau", "momentum": "momentum", "dim_meta": "meta_dim",
        "dim_task": "task_dim", "backbone": "backbone_kind",
        "denominator_mode": "denominator_mode", "seed": "seed",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    return TrainConfig(**values)


def _load_data(args, schema: TaskSchema) -> Dataset:
    if not args.data:
        raise ValueError("--data is required")
    return load_jsonl(args.data, schema)


def _schema_from_args(args) -> TaskSchema:
    if not args.schema:
        raise ValueError("--schema is required")
    return TaskSchema.load(args.schema)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    schema = _schema_from_args(args)
    data = generate_synthetic(schema, n=args.n, feat_dim=args.frames_f,
                              num_frames=args.frames_t, noise_sigma=args.noise_sigma,
                              seed=args.seed, n_subjects=args.subjects)
    write_jsonl(data, args.out)
    _write_sidecar(args.out, "gen-synthetic", {
        "schema": str(args.schema), "n": args.n, "frames_f": args.frames_f,
        "frames_t": args.frames_t, "noise_sigma": args.noise_sigma,
        "subjects": args.subjects, "seed": args.seed,
    })
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.checkpoint:
        # resume: the stored config wins, except for the step budget
        state = load_checkpoint(args.checkpoint)
        schema = state.model.schema
        config = state.config
        if args.steps is not None:
            config = dataclasses.replace(config, max_steps=args.steps)
        state.config = config
    else:
        state = None
        config = _flag_config(args)
        schema = _schema_from_args(args)
    data = _load_data(args, schema)

    train_part = data
    if args.test_fraction and args.test_fraction > 0:
        train_part, test_part = split_subject_independent(
            data, args.test_fraction, config.seed)
        stem = Path(args.out).with_suffix("")
        write_jsonl(train_part, f"{stem}.train.jsonl")
        write_jsonl(test_part, f"{stem}.test.jsonl")
        print(f"split: {len(train_part)} train / {len(test_part)} test samples "
              f"({len(set(s.subject for s in test_part.samples))} test subjects)",
              file=sys.stderr)

    loss_log = args.loss_log or str(Path(args.out).with_suffix("")) + "_loss.csv"
    state = run_training(train_part, config, state=state,
                         loss_log_path=loss_log, checkpoint_path=args.out)
    _write_sidecar(loss_log, "train", dataclasses.asdict(config))
    print(f"trained to step {state.step}; checkpoint at {args.out}, loss log at {loss_log}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = _load_data(args, state.model.schema)
    report = metrics.evaluate_runs(state.model, data, runs=args.runs,
                                   test_fraction=args.test_fraction,
                                   seed=args.seed if args.seed is not None else 0)
    payload = metrics.report_to_json(
        report, extra={"config": dataclasses.asdict(state.config)})
    if args.out:
        Path(args.out).write_text(payload + "\n")
        print(f"wrote metrics report to {args.out}")
    else:
        print(payload)
    return 0


def cmd_classify(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = _load_data(args, state.model.schema)
    rows = []
    for s in data.samples:
        preds = inference.classify(s, state.model)
        row = {"id": s.id}
        for task, (cls, sim) in preds.items():
            row[task] = cls
            row[f"{task}_sim"] = round(sim, 6)
        rows.append(row)
    out = json.dumps(rows, indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n")
        print(f"wrote predictions for {len(rows)} samples to {args.out}")
    else:
        print(out)
    return 0


def cmd_classify_caption(args) -> int:
    state = load_checkpoint(args.checkpoint)
    preds = inference.classify_caption(args.caption, state.model)
    if not preds:
        print(json.dumps({"caption": args.caption, "tasks": {}}))
        return 0
    payload = {"caption": args.caption,
               "tasks": {t: {"class": c, "similarity": round(sim, 6)}
                         for t, (c, sim) in preds.items()}}
    print(json.dumps(payload, indent=2))
    return 0


def cmd_manipulate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = _load_data(args, state.model.schema)
    if not args.task:
        raise ValueError("--task is required")
    targets = ([args.target_class] if args.target_class
               else list(state.model.schema.classes(args.task)))
    reports = {args.task: []}
    for s in data.samples:
        for target in targets:
            _, report = inference.manipulate(s, args.task, target, state.model,
                                             alpha=args.alpha)
            reports[args.task].append(report)
    inference.manipulation_report_csv(reports, args.out)
    _write_sidecar(args.out, "manipulate", {
        "checkpoint": args.checkpoint, "task": args.task,
        "target_class": args.target_class, "alpha": args.alpha,
        "samples": len(data.samples),
    })
    print(f"wrote manipulation report ({len(reports[args.task])} swaps) to {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = _load_data(args, state.model.schema)
    inference.export_embeddings_csv(state.model, data, args.out,
                                    split_label=args.split_label)
    _write_sidecar(args.out, "export-embeddings", {
        "checkpoint": args.checkpoint, "data": args.data,
        "split_label": args.split_label,
    })
    print(f"wrote embeddings for {len(data)} samples to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else 3
    results = run_grad_check(seed=seed)
    threshold = 1e-4
    ok = True
    for name, err in results.items():
        status = "ok" if err < threshold else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
        ok = ok and err < threshold
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


def cmd_stats(args) -> int:
    state = load_checkpoint(args.checkpoint)
    counts = state.model.section_param_counts()
    payload = {"step": state.step, "parameters": counts,
               "config": dataclasses.asdict(state.config)}
    print(json.dumps(payload, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="stylespace",
                     description="Multi-task speaking-style embeddings: train, "
                                 "evaluate, classify, and manipulate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_io(p, schema=False, data=False, out=False, checkpoint=False):
        if schema:
            p.add_argument("--schema", help="task schema JSON file")
        if data:
            p.add_argument("--data", help="dataset JSONL file")
        if out:
            p.add_argument("--out", required=True, help="output path")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint JSON")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-synthetic", help="generate a seeded synthetic dataset")
    common_io(p, schema=True, out=True)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--frames-f", type=int, default=24, help="feature bins F")
    p.add_argument("--frames-t", type=int, default=1, help="time frames t")
    p.add_argument("--noise-sigma", type=float, default=0.25)
    p.add_argument("--subjects", type=int, default=None)
    p.set_defaults(fn=cmd_gen_synthetic, seed=7)

    p = sub.add_parser("train", help="train a model (or resume from --checkpoint)")
    common_io(p, schema=True, data=True, out=True, checkpoint=True)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--dim-meta", type=int, default=None)
    p.add_argument("--dim-task", type=int, default=None)
    p.add_argument("--backbone", default=None,
                   choices=("frame_mlp", "recurrent", "attention_pool"))
    p.add_argument("--denominator-mode", default=None,
                   choices=("as_written", "standard"))
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="if > 0, hold out a subject-independent test split first")
    p.add_argument("--loss-log", default=None, help="loss CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common_io(p, data=True, checkpoint=True)
    p.add_argument("--out", default=None, help="metrics report JSON path")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="subject subsample fraction per run when --runs > 1")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("classify", help="nearest-prototype classification")
    common_io(p, data=True, checkpoint=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("classify-caption", help="classify a style caption")
    common_io(p, checkpoint=True)
    p.add_argument("caption", help="caption text, e.g. 'a happy adult female voice'")
    p.set_defaults(fn=cmd_classify_caption)

    p = sub.add_parser("manipulate", help="embedding-swap style manipulation report")
    common_io(p, data=True, out=True, checkpoint=True)
    p.add_argument("--task", required=True)
    p.add_argument("--target-class", default=None,
                   help="single target class (default: all classes of --task)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.set_defaults(fn=cmd_manipulate)

    p = sub.add_parser("export-embeddings", help="dump embeddings as CSV")
    common_io(p, data=True, out=True, checkpoint=True)
    p.add_argument("--split-label", default="all",
                   help="value for the CSV 'split' column")
    p.set_defaults(fn=cmd_export_embeddings)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=3)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("stats", help="parameter counts per checkpoint section")
    common_io(p, checkpoint=True)
    p.set_defaults(fn=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StylespaceError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected runtime failure
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
