"""Sequence-level inference and the screening metric suite.

Sensitivity and specificity are binary notions applied to a three-class
problem, so both are computed over configurable label subsets. The default
treats positive and neutral as screening-relevant (both warrant referral)
against negative as the healthy class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .clustering import partition_frames
from .data_io import Label, SilhouetteSequence, load_sequence
from .errors import ArgumentError, ConfigurationError, NumericError, SchemaError
from .network import INPUT_HEIGHT, INPUT_WIDTH, N_CLASSES, GaitMILNet, ModelConfig
from .sampling import ImbalanceSplit
from .training import TrainState, restore_state

DEFAULT_POSITIVE_SET = (Label.POSITIVE, Label.NEUTRAL)
DEFAULT_NEGATIVE_SET = (Label.NEGATIVE,)

# Evaluation partitions the full sequence once with a fixed generator so that
# repeated calls on the same sequence give identical scores.
DEFAULT_PARTITION_SEED = 0


@dataclass
class MetricsReport:
    """Confusion counts plus the derived screening metrics.

    Rows of the confusion matrix are true labels, columns predictions, both
    in Label order. sensitivity/specificity are None when their ground-truth
    subset is empty (undefined, deliberately not reported as 0).
    """

    confusion: np.ndarray
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    positive_set: tuple[Label, ...] = DEFAULT_POSITIVE_SET
    negative_set: tuple[Label, ...] = DEFAULT_NEGATIVE_SET

    def __post_init__(self) -> None:
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.confusion.shape != (N_CLASSES, N_CLASSES):
            raise ArgumentError(
                f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, "
                f"got {self.confusion.shape}"
            )
        if (self.confusion < 0).any():
            raise ArgumentError("confusion counts must be >= 0")
        if self.total == 0:
            raise ArgumentError("metrics need at least one sample")
        if self.accuracy != self.confusion.trace() / self.total:
            raise ArgumentError("accuracy must equal trace/total")
        for name, value in (("sensitivity", self.sensitivity), ("specificity", self.specificity)):
            if value is not None and not 0.0 <= value <= 1.0:
                raise ArgumentError(f"{name} must lie in [0, 1], got {value}")

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def per_class_recall(self) -> dict[Label, float | None]:
        out: dict[Label, float | None] = {}
        for label in Label:
            row = int(self.confusion[label].sum())
            out[label] = int(self.confusion[label, label]) / row if row else None
        return out

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "total": self.total,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "positive_set": [label.short_name for label in self.positive_set],
            "negative_set": [label.short_name for label in self.negative_set],
            "per_class_recall": {
                label.short_name: recall for label, recall in self.per_class_recall().items()
            },
            "undefined_metrics": [
                name
                for name, value in (
                    ("sensitivity", self.sensitivity),
                    ("specificity", self.specificity),
                )
                if value is None
            ],
        }


def _label_subset(values, what: str) -> tuple[Label, ...]:
    labels = tuple(Label(v) for v in values)
    if not labels:
        raise ArgumentError(f"{what} must be nonempty")
    if len(set(labels)) != len(labels):
        raise ArgumentError(f"{what} has duplicate labels")
    return labels


def compute_metrics(
    preds,
    labels,
    positive_set=DEFAULT_POSITIVE_SET,
    negative_set=DEFAULT_NEGATIVE_SET,
) -> MetricsReport:
    """Three-class confusion matrix plus subset sensitivity/specificity.

    Sensitivity counts a sample as a hit when both the true and predicted
    label fall in positive_set, even if they differ within it (a neutral
    case predicted positive is still flagged for referral). Specificity is
    the mirror image over negative_set.
    """
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ArgumentError(f"{preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ArgumentError("metrics need at least one sample")
    for name, arr in (("predictions", preds), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= N_CLASSES:
            raise ArgumentError(f"{name} must be class indices in [0, {N_CLASSES})")
    positive_set = _label_subset(positive_set, "positive_set")
    negative_set = _label_subset(negative_set, "negative_set")
    if set(positive_set) & set(negative_set):
        raise ArgumentError("positive_set and negative_set must be disjoint")

    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)

    def subset_rate(subset: tuple[Label, ...]) -> float | None:
        member = np.isin(labels, [int(l) for l in subset])
        if not member.any():
            return None
        hits = member & np.isin(preds, [int(l) for l in subset])
        return int(hits.sum()) / int(member.sum())

    return MetricsReport(
        confusion=confusion,
        accuracy=confusion.trace() / preds.size,
        sensitivity=subset_rate(positive_set),
        specificity=subset_rate(negative_set),
        positive_set=positive_set,
        negative_set=negative_set,
    )


def _materialize(checkpoint) -> GaitMILNet:
    if isinstance(checkpoint, GaitMILNet):
        return checkpoint
    if isinstance(checkpoint, TrainState):
        return checkpoint.model
    if isinstance(checkpoint, dict):
        return restore_state(checkpoint).model
    raise ArgumentError(f"cannot evaluate a {type(checkpoint).__name__}")


def predict(
    seq: SilhouetteSequence,
    checkpoint,
    config: ModelConfig | None = None,
    partition_seed: int = DEFAULT_PARTITION_SEED,
) -> tuple[Label, np.ndarray]:
    """Classify one sequence; returns (label, softmax scores over classes).

    Uses every frame of the sequence, partitioned once with a fixed seed, so
    the result is a pure function of the sequence and the weights.
    """
    model = _materialize(checkpoint)
    config = config or model.config
    if seq.frames.shape[1:] != (INPUT_HEIGHT, INPUT_WIDTH):
        raise SchemaError(
            f"sequence frames are {seq.frames.shape[1]}x{seq.frames.shape[2]}, "
            f"the model expects {INPUT_HEIGHT}x{INPUT_WIDTH}"
        )
    model.eval()
    frames = torch.from_numpy(seq.frames).float().unsqueeze(0)
    bag_ids = None
    if config.mil_enabled:
        partition = partition_frames(
            seq.frames, config.n_bags, np.random.default_rng(partition_seed)
        )
        bag_ids = torch.from_numpy(partition.assignment).long().unsqueeze(0)
    with torch.no_grad():
        output, _ = model(frames, bag_ids)
        logits = output.logits[0].mean(dim=0)  # average the 16 part heads
        if not torch.isfinite(logits).all():
            raise NumericError(f"non-finite logits for sequence {seq.subject_id!r}")
        scores = torch.softmax(logits, dim=0).numpy()
    return Label(int(logits.argmax())), scores


def evaluate_entries(
    entries,
    checkpoint,
    root: Path | str,
    config: ModelConfig | None = None,
    partition_seed: int = DEFAULT_PARTITION_SEED,
    positive_set=DEFAULT_POSITIVE_SET,
    negative_set=DEFAULT_NEGATIVE_SET,
) -> MetricsReport:
    """Predict every manifest entry in order and reduce to a report."""
    if not entries:
        raise ArgumentError("no sequences to evaluate")
    model = _materialize(checkpoint)
    preds, labels = [], []
    for entry in entries:
        seq = load_sequence(root, entry)
        label, _ = predict(seq, model, config, partition_seed)
        preds.append(int(label))
        labels.append(int(entry.label))
    return compute_metrics(preds, labels, positive_set, negative_set)


def evaluate_split(
    split: ImbalanceSplit,
    checkpoint,
    root: Path | str,
    config: ModelConfig | None = None,
    partition_seed: int = DEFAULT_PARTITION_SEED,
    positive_set=DEFAULT_POSITIVE_SET,
    negative_set=DEFAULT_NEGATIVE_SET,
) -> MetricsReport:
    """Predict every sequence named by the split and reduce to a report."""
    empty = [label.short_name for label in Label if split.counts.get(label, 0) == 0]
    if empty:
        raise ConfigurationError(f"split has no sequences for: {', '.join(empty)}")
    return evaluate_entries(
        split.entries, checkpoint, root, config, partition_seed, positive_set, negative_set
    )
