"""Seeded training loop: SGD with momentum, milestone LR decay, atomic
checkpoints with a lossless round trip, and exact resume.

Determinism notes. All sampling and clustering randomness flows through one
numpy generator owned by the state; torch-level randomness is consumed only
during model initialization (init_state seeds it from config.seed), never
inside a step, so checkpoints carry the numpy generator state and nothing
else. The learning rate is a pure function of the step counter, which keeps
resumed runs on the exact schedule.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import pickle
import tempfile
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np
import torch

from .data_io import Label, SilhouetteSequence
from .clustering import partition_clip
from .errors import ArgumentError, ConfigurationError, DatasetError, NumericError, SchemaError
from .losses import DEFAULT_MARGIN, LossBreakdown, total_loss
from .network import GaitMILNet, ModelConfig
from .sampling import BatchPlan, SampledClip, make_batch, triplet_labels_for

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    margin: float = DEFAULT_MARGIN
    triplet_label: str = "subject"
    seed: int = 0
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    batch: BatchPlan = field(default_factory=BatchPlan)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.steps < 0:
            raise ArgumentError("steps must be >= 0")
        if self.lr < 0:  # lr=0 is a legal null step, useful for plumbing tests
            raise ArgumentError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ArgumentError("lr_decay must lie in (0, 1]")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)) or any(
            m < 1 for m in self.lr_milestones
        ):
            raise ArgumentError("lr_milestones must be strictly increasing positive steps")
        if self.margin <= 0:
            raise ArgumentError("margin must be positive")
        if self.triplet_label not in ("subject", "class"):
            raise ArgumentError("triplet_label must be 'subject' or 'class'")
        if self.checkpoint_interval < 0:
            raise ArgumentError("checkpoint_interval must be >= 0")


def config_to_dict(config: TrainConfig) -> dict:
    raw = dataclasses.asdict(config)
    raw["lr_milestones"] = list(config.lr_milestones)
    raw["model"]["backbone_widths"] = list(config.model.backbone_widths)
    return raw


def config_from_dict(payload: dict) -> TrainConfig:
    """Strict parse: unknown keys are rejected by name, at every nesting level."""

    def build(cls, section: dict, where: str):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ArgumentError(f"unknown config key {sorted(unknown)[0]!r} in {where}")
        return dict(section)

    if not isinstance(payload, dict):
        raise ArgumentError("config must be a JSON object")
    top = build(TrainConfig, payload, "config")
    if "batch" in top:
        top["batch"] = BatchPlan(**build(BatchPlan, top["batch"], "config.batch"))
    if "model" in top:
        top["model"] = ModelConfig(**build(ModelConfig, top["model"], "config.model"))
    return TrainConfig(**top)


@dataclass
class TrainState:
    config: TrainConfig
    model: GaitMILNet
    optimizer: torch.optim.SGD
    rng: np.random.Generator
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = GaitMILNet(config.model)
    optimizer = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    return TrainState(
        config=config,
        model=model,
        optimizer=optimizer,
        rng=np.random.default_rng(config.seed),
    )


def current_lr(config: TrainConfig, step: int) -> float:
    """LR for the given step index; decays once per passed milestone."""
    return config.lr * config.lr_decay ** bisect_right(config.lr_milestones, step)


def train_step(state: TrainState, batch: list[SampledClip]) -> LossBreakdown:
    """One optimization step on an already-composed batch.

    Partitions are computed here, fresh for every step, because they depend on
    the frames that sampling drew.
    """
    config = state.config
    state.model.train()
    lr = current_lr(config, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    if config.model.mil_enabled:
        partitions = [partition_clip(c, config.model.n_bags, state.rng) for c in batch]
    else:
        partitions = None  # single-bag path, identical to K=1
    output, _ = state.model.forward_clips(batch, partitions)
    triplet_labels = torch.from_numpy(triplet_labels_for(batch, config.triplet_label))
    class_labels = torch.tensor([int(c.label) for c in batch], dtype=torch.long)
    try:
        loss, breakdown = total_loss(output, triplet_labels, class_labels, config.margin)
    except NumericError as exc:
        subjects = sorted({c.subject_id for c in batch})
        raise NumericError(f"{exc} at step {state.step}; batch subjects: {subjects}") from exc

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return breakdown


def _log_line(handle: IO[str] | None, payload: dict) -> None:
    if handle is not None:
        handle.write(json.dumps(payload) + "\n")
        handle.flush()


def fit(
    config: TrainConfig,
    dataset: list[SilhouetteSequence],
    checkpoint_dir: Path | str | None = None,
    log_path: Path | str | None = None,
    resume_from: Path | str | None = None,
) -> dict:
    """Run the loop to config.steps; returns (and optionally writes) the final checkpoint."""
    if config.batch.class_stratified:
        present = {seq.label for seq in dataset}
        missing = [label.short_name for label in Label if label not in present]
        if missing:
            raise ConfigurationError(
                f"stratified batching needs every class; missing: {', '.join(missing)}"
            )

    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        if checkpoint["config"] != config_to_dict(config):
            raise SchemaError("resume config does not match the checkpoint's config")
        state = restore_state(checkpoint)
    else:
        state = init_state(config)

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_handle = open(log_path, "a") if log_path is not None else None
    try:
        _log_line(
            log_handle,
            {"event": "config", "resumed_at": state.step if resume_from else None}
            | config_to_dict(config),
        )
        while state.step < config.steps:
            batch = make_batch(dataset, config.batch, state.rng, config.model.frames_per_clip)
            lr = current_lr(config, state.step)
            breakdown = train_step(state, batch)
            _log_line(
                log_handle,
                {
                    "step": state.step,
                    "triplet": breakdown.triplet,
                    "ce": breakdown.ce,
                    "total": breakdown.total,
                    "n_valid": sum(breakdown.n_valid_per_part),
                    "lr": lr,
                },
            )
            if (
                checkpoint_dir is not None
                and config.checkpoint_interval > 0
                and state.step % config.checkpoint_interval == 0
            ):
                save_checkpoint(state, checkpoint_dir / f"checkpoint_{state.step:06d}.pkl")
        checkpoint = make_checkpoint(state)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint, checkpoint_dir / "checkpoint_final.pkl")
        return checkpoint
    finally:
        if log_handle is not None:
            log_handle.close()


def make_checkpoint(state: TrainState) -> dict:
    model_arrays = {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in state.model.state_dict().items()
    }
    name_of = {param: name for name, param in state.model.named_parameters()}
    momentum = {}
    for param, slot in state.optimizer.state.items():
        if "momentum_buffer" in slot and slot["momentum_buffer"] is not None:
            momentum[name_of[param]] = slot["momentum_buffer"].detach().cpu().numpy().copy()
    return {
        "schema_version": SCHEMA_VERSION,
        "step": state.step,
        "model": model_arrays,
        "optimizer": {"momentum": momentum},
        "rng_state": state.rng.bit_generator.state,
        "config": config_to_dict(state.config),
    }


def save_checkpoint(state_or_checkpoint: TrainState | dict, path: Path | str) -> None:
    """Atomic write (temp file + rename) of the pickled checkpoint dict."""
    checkpoint = (
        make_checkpoint(state_or_checkpoint)
        if isinstance(state_or_checkpoint, TrainState)
        else state_or_checkpoint
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = pickle.dumps(checkpoint, protocol=4)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_checkpoint(path: Path | str, expected_model: ModelConfig | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"checkpoint not found: {path}")
    with open(path, "rb") as handle:
        try:
            checkpoint = pickle.load(handle)
        except (pickle.UnpicklingError, EOFError) as exc:
            raise SchemaError(f"unreadable checkpoint: {path}") from exc
    if not isinstance(checkpoint, dict) or "schema_version" not in checkpoint:
        raise SchemaError(f"not a checkpoint archive: {path}")
    if checkpoint["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(
            f"checkpoint schema version {checkpoint['schema_version']} "
            f"is not the supported {SCHEMA_VERSION}"
        )
    missing = {"step", "model", "optimizer", "rng_state", "config"} - set(checkpoint)
    if missing:
        raise SchemaError(f"checkpoint missing fields: {sorted(missing)}")
    if expected_model is not None:
        saved = checkpoint["config"]["model"]
        wanted = config_to_dict(dataclasses.replace(TrainConfig(), model=expected_model))["model"]
        if saved != wanted:
            raise SchemaError(
                f"checkpoint model config {saved} does not match requested {wanted}"
            )
    return checkpoint


def restore_state(checkpoint: dict) -> TrainState:
    """Rebuild a live TrainState; continuing from it reproduces the original run."""
    config = config_from_dict(checkpoint["config"])
    state = init_state(config)
    tensors = {name: torch.from_numpy(arr.copy()) for name, arr in checkpoint["model"].items()}
    try:
        state.model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise SchemaError(f"checkpoint parameters do not fit the model: {exc}") from exc
    momentum = checkpoint["optimizer"].get("momentum", {})
    named = dict(state.model.named_parameters())
    for name, arr in momentum.items():
        if name not in named:
            raise SchemaError(f"momentum buffer for unknown parameter: {name}")
        state.optimizer.state[named[name]] = {
            "momentum_buffer": torch.from_numpy(arr.copy())
        }
    state.rng.bit_generator.state = checkpoint["rng_state"]
    state.step = int(checkpoint["step"])
    return state
