"""Command line front end: synthesize data, train, evaluate, run the ablation.

Exit codes: 0 success, 2 usage (bad flags, bad config keys or values),
3 data problems (missing files, schema mismatches, unusable configurations),
4 numeric failures during optimization. Every failure prints one line to
stderr so batch drivers can grep for it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data_io import (
    MANIFEST_NAME,
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    read_manifest,
    save_dataset,
)
from .errors import (
    ArgumentError,
    ConfigurationError,
    DatasetError,
    GaitMilError,
    NumericError,
    SchemaError,
)
from .evaluation import evaluate_entries, evaluate_split
from .sampling import build_imbalance_split
from .training import TrainConfig, config_from_dict, config_to_dict, fit, load_checkpoint

DATA_ROOT_VAR = "GAITMIL_DATA_ROOT"

_DEFAULTS = TrainConfig()


def _fail(exc: Exception) -> None:
    message = str(exc).replace("\n", " ")
    print(f"gaitmil: error: {message}", file=sys.stderr)


def parse_ratio(text: str) -> tuple[int, int, int]:
    """'1:1:8' -> (1, 1, 8); anything else is a usage error."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ArgumentError(f"ratio must look like P:N:G, got {text!r}")
    try:
        ratio = tuple(int(p) for p in parts)
    except ValueError:
        raise ArgumentError(f"ratio components must be integers, got {text!r}") from None
    if any(r < 1 for r in ratio):
        raise ArgumentError(f"ratio components must be >= 1, got {text!r}")
    return ratio


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip() != ""]
    except ValueError:
        raise ArgumentError(f"expected comma-separated integers, got {text!r}") from None


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ROOT_VAR)
    if not root:
        raise ArgumentError(f"no dataset root: pass --data or set {DATA_ROOT_VAR}")
    return Path(root)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


# ---------------------------------------------------------------- config assembly


def train_config_from_args(args) -> TrainConfig:
    """File config (if any) with CLI overrides folded in, strictly validated."""
    payload: dict = {}
    if args.config is not None:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise DatasetError(f"config file not found: {config_path}")
        try:
            with open(config_path) as handle:
                payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config file is not valid JSON: {config_path}") from exc
        if not isinstance(payload, dict):
            raise SchemaError(f"config file must hold a JSON object: {config_path}")

    for key in (
        "steps",
        "lr",
        "momentum",
        "weight_decay",
        "lr_decay",
        "margin",
        "triplet_label",
        "seed",
        "checkpoint_interval",
    ):
        value = getattr(args, key)
        if value is not None:
            payload[key] = value
    if args.lr_milestones is not None:
        payload["lr_milestones"] = args.lr_milestones

    batch = payload.setdefault("batch", {})
    if args.subjects_per_batch is not None:
        batch["subjects_per_batch"] = args.subjects_per_batch
    if args.clips_per_subject is not None:
        batch["clips_per_subject"] = args.clips_per_subject

    model = payload.setdefault("model", {})
    for key in ("n_bags", "frames_per_clip", "embed_dim", "attention_dim"):
        value = getattr(args, key)
        if value is not None:
            model[key] = value
    if args.backbone_widths is not None:
        model["backbone_widths"] = args.backbone_widths
    if getattr(args, "no_mil", False):
        model["mil_enabled"] = False

    return config_from_dict(payload)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training configuration")
    group.add_argument("--config", help="JSON config file; flags below override its values")
    group.add_argument(
        "--steps", type=int, help=f"optimization steps (default: {_DEFAULTS.steps})"
    )
    group.add_argument("--lr", type=float, help=f"base learning rate (default: {_DEFAULTS.lr})")
    group.add_argument(
        "--momentum", type=float, help=f"SGD momentum (default: {_DEFAULTS.momentum})"
    )
    group.add_argument(
        "--weight-decay",
        dest="weight_decay",
        type=float,
        help=f"L2 penalty (default: {_DEFAULTS.weight_decay})",
    )
    group.add_argument(
        "--lr-milestones",
        dest="lr_milestones",
        type=parse_int_list,
        help=f"comma-separated decay steps (default: {list(_DEFAULTS.lr_milestones)})",
    )
    group.add_argument(
        "--lr-decay",
        dest="lr_decay",
        type=float,
        help=f"multiplier applied at each milestone (default: {_DEFAULTS.lr_decay})",
    )
    group.add_argument(
        "--margin", type=float, help=f"triplet margin (default: {_DEFAULTS.margin})"
    )
    group.add_argument(
        "--triplet-label",
        dest="triplet_label",
        choices=("subject", "class"),
        help=f"identity used for triplet mining (default: {_DEFAULTS.triplet_label})",
    )
    group.add_argument("--seed", type=int, help=f"run seed (default: {_DEFAULTS.seed})")
    group.add_argument(
        "--checkpoint-interval",
        dest="checkpoint_interval",
        type=int,
        help=f"steps between checkpoints, 0 = final only "
        f"(default: {_DEFAULTS.checkpoint_interval})",
    )
    group.add_argument(
        "--subjects-per-batch",
        dest="subjects_per_batch",
        type=int,
        help=f"P in the P x M batch (default: {_DEFAULTS.batch.subjects_per_batch})",
    )
    group.add_argument(
        "--clips-per-subject",
        dest="clips_per_subject",
        type=int,
        help=f"M in the P x M batch (default: {_DEFAULTS.batch.clips_per_subject})",
    )
    group.add_argument(
        "--n-bags", dest="n_bags", type=int, help=f"bags per clip K (default: {_DEFAULTS.model.n_bags})"
    )
    group.add_argument(
        "--frames-per-clip",
        dest="frames_per_clip",
        type=int,
        help=f"frames sampled per clip S (default: {_DEFAULTS.model.frames_per_clip})",
    )
    group.add_argument(
        "--backbone-widths",
        dest="backbone_widths",
        type=parse_int_list,
        help=f"comma-separated stage widths (default: {list(_DEFAULTS.model.backbone_widths)})",
    )
    group.add_argument(
        "--embed-dim",
        dest="embed_dim",
        type=int,
        help=f"per-part embedding size (default: {_DEFAULTS.model.embed_dim})",
    )
    group.add_argument(
        "--attention-dim",
        dest="attention_dim",
        type=int,
        help=f"attention hidden size (default: {_DEFAULTS.model.attention_dim})",
    )


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_subjects_per_class=args.subjects,
        frames_per_sequence=args.frames,
        noise_rate=args.noise,
        gait_period=args.period,
        seed=args.seed,
    )
    sequences, manifest = generate_synthetic(spec)
    save_dataset(sequences, manifest, args.out, force=args.force)
    counts = ", ".join(
        f"{label.short_name} {n}" for label, n in sorted(manifest.class_counts.items())
    )
    print(f"wrote {len(sequences)} sequences to {args.out} ({counts})")
    return 0


def cmd_train(args) -> int:
    config = train_config_from_args(args)
    root = _data_root(args)
    dataset, _ = load_dataset(root)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out / "train.jsonl"
    checkpoint = fit(
        config,
        dataset,
        checkpoint_dir=out,
        log_path=log_path,
        resume_from=args.resume,
    )
    print(f"final checkpoint: {out / 'checkpoint_final.pkl'} (step {checkpoint['step']})")
    return 0


def _eval_report(args, checkpoint_path: Path, manifest: DatasetManifest, root: Path) -> dict:
    checkpoint = load_checkpoint(checkpoint_path)
    if args.ratio is not None:
        split = build_imbalance_split(
            manifest, args.ratio, np.random.default_rng(args.split_seed), args.budget
        )
        report = evaluate_split(split, checkpoint, root)
        counts = {label.short_name: n for label, n in sorted(split.counts.items())}
        split_info = {
            "ratio": list(split.ratio),
            "seed": args.split_seed,
            "budget": args.budget,
            "counts": counts,
        }
    else:
        report = evaluate_entries(manifest.entries, checkpoint, root)
        counts = {label.short_name: n for label, n in sorted(manifest.class_counts.items())}
        split_info = {"ratio": None, "seed": None, "budget": None, "counts": counts}
    return {
        **report.to_dict(),
        "split": split_info,
        "checkpoint": str(checkpoint_path),
        "checkpoint_sha256": _sha256(checkpoint_path),
        "config": checkpoint["config"],
    }


def _print_metrics(prefix: str, payload: dict) -> None:
    def show(value):
        return "undefined" if value is None else f"{value:.4f}"

    print(
        f"{prefix}accuracy {show(payload['accuracy'])}, "
        f"sensitivity {show(payload['sensitivity'])}, "
        f"specificity {show(payload['specificity'])} "
        f"over {payload['total']} sequences"
    )


def cmd_eval(args) -> int:
    root = _data_root(args)
    manifest = read_manifest(root / MANIFEST_NAME)
    payload = _eval_report(args, Path(args.checkpoint), manifest, root)
    _write_json(Path(args.out), payload)
    _print_metrics("", payload)
    print(f"report written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    base = train_config_from_args(args)
    train_root = _data_root(args)
    dataset, _ = load_dataset(train_root)
    eval_root = Path(args.eval_data) if args.eval_data else train_root
    manifest = read_manifest(eval_root / MANIFEST_NAME)
    out = Path(args.out)

    arms = {}
    for arm, enabled in (("mil", True), ("no_mil", False)):
        config = dataclasses.replace(
            base, model=dataclasses.replace(base.model, mil_enabled=enabled)
        )
        arm_dir = out / arm
        fit(config, dataset, checkpoint_dir=arm_dir, log_path=arm_dir / "train.jsonl")
        checkpoint_path = arm_dir / "checkpoint_final.pkl"
        payload = _eval_report(args, checkpoint_path, manifest, eval_root)
        arms[arm] = payload
        _print_metrics(f"{arm}: ", payload)

    comparison = {
        "arms": arms,
        "accuracy_delta": arms["mil"]["accuracy"] - arms["no_mil"]["accuracy"],
    }
    _write_json(out / "comparison.json", comparison)
    print(f"comparison written to {out / 'comparison.json'}")
    return 0


# ---------------------------------------------------------------- wiring


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors are one greppable line."""

    def error(self, message):
        self.exit(2, f"gaitmil: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gaitmil",
        description="Train and evaluate the silhouette-sequence screening model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic silhouette dataset")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument(
        "--subjects", type=int, default=10, help="subjects per class (default: 10)"
    )
    synth.add_argument(
        "--frames", type=int, default=300, help="frames per sequence (default: 300)"
    )
    synth.add_argument(
        "--noise", type=float, default=0.0, help="salt-and-pepper pixel flip rate (default: 0.0)"
    )
    synth.add_argument(
        "--period", type=int, default=20, help="gait cycle length in frames (default: 20)"
    )
    synth.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    synth.add_argument(
        "--force", action="store_true", help="write into a non-empty output directory"
    )
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="fit the model on a dataset")
    train.add_argument("--data", help=f"dataset root (default: ${DATA_ROOT_VAR})")
    train.add_argument("--out", required=True, help="checkpoint directory")
    train.add_argument("--log", help="JSON-lines training log (default: OUT/train.jsonl)")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument(
        "--no-mil",
        dest="no_mil",
        action="store_true",
        help="disable bag partitioning (single-bag ablation arm)",
    )
    _add_train_flags(train)
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    evaluate.add_argument("--data", help=f"dataset root (default: ${DATA_ROOT_VAR})")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    evaluate.add_argument("--out", default="report.json", help="report file (default: report.json)")
    evaluate.add_argument(
        "--ratio",
        type=parse_ratio,
        help="class-imbalance split P:N:G, e.g. 1:1:8 (default: evaluate the full pool)",
    )
    evaluate.add_argument(
        "--split-seed",
        dest="split_seed",
        type=int,
        default=0,
        help="seed for split selection (default: 0)",
    )
    evaluate.add_argument(
        "--budget", type=int, help="cap on total split size (default: none)"
    )
    evaluate.set_defaults(func=cmd_eval)

    ablate = sub.add_parser(
        "ablate", help="train and evaluate matched runs with bag partitioning on and off"
    )
    ablate.add_argument("--data", help=f"training dataset root (default: ${DATA_ROOT_VAR})")
    ablate.add_argument(
        "--eval-data", dest="eval_data", help="evaluation dataset root (default: --data)"
    )
    ablate.add_argument("--out", required=True, help="output directory for both arms")
    ablate.add_argument(
        "--ratio", type=parse_ratio, help="optional class-imbalance split for evaluation"
    )
    ablate.add_argument(
        "--split-seed", dest="split_seed", type=int, default=0, help="split seed (default: 0)"
    )
    ablate.add_argument("--budget", type=int, help="cap on total split size (default: none)")
    _add_train_flags(ablate)
    ablate.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ArgumentError as exc:
        _fail(exc)
        return 2
    except (DatasetError, SchemaError, ConfigurationError) as exc:
        _fail(exc)
        return 3
    except NumericError as exc:
        _fail(exc)
        return 4
    except GaitMilError as exc:  # base-class fallback, same bucket as data errors
        _fail(exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
