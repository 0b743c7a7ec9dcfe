"""Frame sampling, batch composition, and class-imbalance splits.

Training consumes fixed-length clips: ``frames_per_clip`` frames drawn from a
sequence without replacement when the sequence is long enough, with
replacement otherwise. Batches follow the P x M recipe (P distinct subjects,
M independently sampled clips each) so subject-level triplets always exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import DatasetManifest, Label, ManifestEntry, SilhouetteSequence
from .errors import ArgumentError, ConfigurationError, SchemaError

DEFAULT_FRAMES_PER_CLIP = 30


@dataclass
class SampledClip:
    subject_id: str
    label: Label
    frames: np.ndarray  # [S, H, W] float32
    source_indices: np.ndarray  # [S] original frame indices, ascending


@dataclass
class BatchPlan:
    subjects_per_batch: int = 8
    clips_per_subject: int = 4
    class_stratified: bool = True

    def __post_init__(self) -> None:
        # Two subjects and two clips each is the minimum that guarantees both a
        # positive pair and a negative for subject-identity triplets.
        if self.subjects_per_batch < 2:
            raise ArgumentError("subjects_per_batch must be >= 2")
        if self.clips_per_subject < 2:
            raise ArgumentError("clips_per_subject must be >= 2")

    @property
    def batch_size(self) -> int:
        return self.subjects_per_batch * self.clips_per_subject


def sample_frames(
    seq: SilhouetteSequence,
    n_frames: int = DEFAULT_FRAMES_PER_CLIP,
    rng: np.random.Generator | None = None,
) -> SampledClip:
    """Draw one clip from a sequence, preserving temporal order."""
    if rng is None:
        raise ArgumentError("sample_frames needs an explicit rng")
    if n_frames < 1:
        raise ArgumentError("n_frames must be >= 1")
    total = seq.n_frames
    replace = total < n_frames
    idx = np.sort(rng.choice(total, size=n_frames, replace=replace))
    return SampledClip(seq.subject_id, seq.label, seq.frames[idx], idx)


def _group_by_subject(
    sequences: list[SilhouetteSequence],
) -> tuple[dict[str, list[SilhouetteSequence]], dict[str, Label]]:
    by_subject: dict[str, list[SilhouetteSequence]] = {}
    label_of: dict[str, Label] = {}
    for seq in sequences:
        if seq.subject_id in label_of and label_of[seq.subject_id] != seq.label:
            raise SchemaError(f"subject {seq.subject_id} appears with two different labels")
        label_of[seq.subject_id] = seq.label
        by_subject.setdefault(seq.subject_id, []).append(seq)
    return by_subject, label_of


def make_batch(
    sequences: list[SilhouetteSequence],
    plan: BatchPlan,
    rng: np.random.Generator,
    n_frames: int = DEFAULT_FRAMES_PER_CLIP,
) -> list[SampledClip]:
    """Compose one P x M batch. Stratified plans round-robin over the classes."""
    by_subject, label_of = _group_by_subject(sequences)
    subjects = sorted(by_subject)
    if len(subjects) < plan.subjects_per_batch:
        raise ConfigurationError(
            f"need {plan.subjects_per_batch} distinct subjects, dataset has {len(subjects)}"
        )
    if plan.class_stratified:
        pools = {
            label: [s for s in subjects if label_of[s] == label] for label in Label
        }
        if any(len(pool) == 0 for pool in pools.values()):
            raise ConfigurationError("class-stratified batches need every class present")
        for label in Label:
            perm = rng.permutation(len(pools[label]))
            pools[label] = [pools[label][i] for i in perm]
        chosen: list[str] = []
        cursor = {label: 0 for label in Label}
        while len(chosen) < plan.subjects_per_batch:
            progressed = False
            for label in Label:
                if len(chosen) >= plan.subjects_per_batch:
                    break
                if cursor[label] < len(pools[label]):
                    chosen.append(pools[label][cursor[label]])
                    cursor[label] += 1
                    progressed = True
            if not progressed:  # every pool exhausted inside one round
                raise ConfigurationError("ran out of distinct subjects while filling the batch")
    else:
        perm = rng.permutation(len(subjects))
        chosen = [subjects[i] for i in perm[: plan.subjects_per_batch]]

    clips: list[SampledClip] = []
    for subject_id in chosen:
        pool = by_subject[subject_id]
        for _ in range(plan.clips_per_subject):
            seq = pool[int(rng.integers(len(pool)))]
            clips.append(sample_frames(seq, n_frames, rng))
    return clips


def triplet_labels_for(clips: list[SampledClip], mode: str = "subject") -> np.ndarray:
    """Integer identity labels for the triplet loss.

    "subject" treats each distinct subject as one identity (positives are the
    same person's other clips); "class" collapses identities to the three
    screening classes.
    """
    if mode == "subject":
        ids: dict[str, int] = {}
        return np.array(
            [ids.setdefault(clip.subject_id, len(ids)) for clip in clips], dtype=np.int64
        )
    if mode == "class":
        return np.array([int(clip.label) for clip in clips], dtype=np.int64)
    raise ArgumentError(f"triplet_label must be 'subject' or 'class', got {mode!r}")


@dataclass
class ImbalanceSplit:
    ratio: tuple[int, int, int]  # positive : neutral : negative
    entries: list[ManifestEntry]
    counts: dict[Label, int]

    def __post_init__(self) -> None:
        tally = {label: 0 for label in Label}
        for entry in self.entries:
            tally[entry.label] += 1
        if tally != self.counts:
            raise SchemaError(f"split counts {self.counts} disagree with entries {tally}")


def build_imbalance_split(
    manifest: DatasetManifest,
    ratio: tuple[int, int, int],
    rng: np.random.Generator,
    total_budget: int | None = None,
) -> ImbalanceSplit:
    """Select the largest subset honoring the class ratio.

    The base unit is the largest integer keeping every class within its
    availability (and within ``total_budget`` sequences overall when given).
    The negative class is then topped up with leftovers as long as its floored
    ratio still matches, so |n_neg - r_neg * base| <= r_neg - 1 by construction.
    """
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3 or any(r < 1 for r in ratio):
        raise ArgumentError(f"ratio must be three positive integers, got {ratio}")
    if total_budget is not None and total_budget < 1:
        raise ArgumentError("total_budget must be >= 1")
    pools = {
        label: [e for e in manifest.entries if e.label == label] for label in Label
    }
    empty = [label.short_name for label in Label if not pools[label]]
    if empty:
        raise ConfigurationError(f"cannot split: no sequences for class(es) {', '.join(empty)}")

    r_pos, r_neu, r_neg = ratio
    base = min(
        len(pools[Label.POSITIVE]) // r_pos,
        len(pools[Label.NEUTRAL]) // r_neu,
        len(pools[Label.NEGATIVE]) // r_neg,
    )
    if total_budget is not None:
        base = min(base, total_budget // (r_pos + r_neu + r_neg))
    n_pos, n_neu = r_pos * base, r_neu * base
    n_neg = min(len(pools[Label.NEGATIVE]), r_neg * (base + 1) - 1)
    if total_budget is not None:
        n_neg = min(n_neg, total_budget - n_pos - n_neu)
    counts = {Label.POSITIVE: n_pos, Label.NEUTRAL: n_neu, Label.NEGATIVE: max(n_neg, 0)}

    entries: list[ManifestEntry] = []
    for label in Label:
        pool = pools[label]
        picked = sorted(rng.choice(len(pool), size=counts[label], replace=False).tolist())
        entries.extend(pool[i] for i in picked)
    return ImbalanceSplit(ratio=ratio, entries=entries, counts=counts)
