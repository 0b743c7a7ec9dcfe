"""Silhouette sequence data: on-disk layout, resolution normalization, synthetic generation.

On-disk layout is ``<root>/<subject_id>/<seq_id>/NNNN.png`` with a ``manifest.json``
at the root listing every sequence. Frames are 8-bit grayscale PNGs; in memory a
sequence is a float32 array of shape [T, H, W] with values in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import cv2
import numpy as np

from .errors import ArgumentError, DatasetError, SchemaError

TARGET_HEIGHT = 64
TARGET_WIDTH = 44
MANIFEST_NAME = "manifest.json"


class Label(IntEnum):
    """Screening outcome. Integer values double as class indices everywhere."""

    POSITIVE = 0
    NEUTRAL = 1
    NEGATIVE = 2

    @property
    def short_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "Label":
        try:
            return cls[name.upper()]
        except KeyError:
            raise SchemaError(f"unknown label name: {name!r}") from None


@dataclass
class SilhouetteSequence:
    """One gait clip of a single subject."""

    subject_id: str
    label: Label
    frames: np.ndarray  # [T, H, W] float32 in [0, 1]
    source_fps: float = 15.0

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] == 0:
            raise ArgumentError(
                f"frames must be a nonempty [T, H, W] array, got shape {self.frames.shape}"
            )
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ArgumentError("frame values must lie in [0, 1]")
        self.label = Label(self.label)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ManifestEntry:
    path: str  # sequence directory relative to the dataset root
    subject_id: str
    label: Label


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_counts: dict[Label, int]

    def __post_init__(self) -> None:
        tally: dict[Label, int] = {label: 0 for label in Label}
        seen: set[str] = set()
        for entry in self.entries:
            if entry.path in seen:
                raise SchemaError(f"duplicate sequence path in manifest: {entry.path}")
            seen.add(entry.path)
            tally[entry.label] += 1
        counts = {Label(k): int(v) for k, v in self.class_counts.items()}
        for label in Label:
            if counts.get(label, 0) != tally[label]:
                raise SchemaError(
                    f"class_counts mismatch for {label.short_name}: "
                    f"declared {counts.get(label, 0)}, tallied {tally[label]}"
                )
        self.class_counts = tally

    @classmethod
    def from_entries(cls, entries: list[ManifestEntry]) -> "DatasetManifest":
        tally = {label: 0 for label in Label}
        for entry in entries:
            tally[entry.label] += 1
        return cls(entries=list(entries), class_counts=tally)

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"path": e.path, "subject": e.subject_id, "label": e.label.short_name}
                for e in self.entries
            ],
            "class_counts": {label.short_name: n for label, n in self.class_counts.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DatasetManifest":
        if not isinstance(payload, dict) or "entries" not in payload:
            raise SchemaError("manifest must be an object with an 'entries' list")
        entries = []
        for raw in payload["entries"]:
            try:
                entries.append(
                    ManifestEntry(
                        path=str(raw["path"]),
                        subject_id=str(raw["subject"]),
                        label=Label.from_name(str(raw["label"])),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"malformed manifest entry: {raw!r}") from exc
        counts_raw = payload.get("class_counts")
        if counts_raw is None:
            return cls.from_entries(entries)
        try:
            counts = {Label.from_name(name): int(n) for name, n in counts_raw.items()}
        except (AttributeError, TypeError, ValueError) as exc:
            raise SchemaError("malformed class_counts in manifest") from exc
        return cls(entries=entries, class_counts=counts)


def normalize_frame(image: np.ndarray) -> np.ndarray:
    """Resize one grayscale frame to the model resolution, bilinear.

    Same-size inputs are returned as an exact copy so repeated normalization
    is idempotent bit-for-bit.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ArgumentError(f"expected a nonempty 2-D frame, got shape {image.shape}")
    if image.shape == (TARGET_HEIGHT, TARGET_WIDTH):
        return image.copy()
    out = cv2.resize(image, (TARGET_WIDTH, TARGET_HEIGHT), interpolation=cv2.INTER_LINEAR)
    # Bilinear output is a convex combination of inputs; clip only strips float fuzz.
    return np.clip(out, 0.0, 1.0)


def normalize_sequence(seq: SilhouetteSequence) -> SilhouetteSequence:
    if seq.frames.shape[1:] == (TARGET_HEIGHT, TARGET_WIDTH):
        return seq
    frames = np.stack([normalize_frame(f) for f in seq.frames])
    return SilhouetteSequence(seq.subject_id, seq.label, frames, seq.source_fps)


@dataclass
class SynthSpec:
    """Parameters of the synthetic walking-figure generator."""

    n_subjects_per_class: int = 10
    frames_per_sequence: int = 300
    image_size: tuple[int, int] = (TARGET_HEIGHT, TARGET_WIDTH)  # (H, W)
    # Lateral top-of-torso displacement in pixels per class; the lean that the
    # classifier has to pick up. The negative class must be perfectly upright.
    lean_amplitude: dict[Label, float] = field(
        default_factory=lambda: {Label.POSITIVE: 6.0, Label.NEUTRAL: 3.0, Label.NEGATIVE: 0.0}
    )
    noise_rate: float = 0.0  # per-pixel salt-and-pepper flip probability
    gait_period: int = 20  # frames per full stride cycle
    fps: float = 15.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects_per_class < 1:
            raise ArgumentError("n_subjects_per_class must be >= 1")
        if self.frames_per_sequence < 1:
            raise ArgumentError("frames_per_sequence must be >= 1")
        h, w = self.image_size
        if h < 16 or w < 12:
            raise ArgumentError(f"image_size {self.image_size} too small to draw a figure")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ArgumentError("noise_rate must lie in [0, 0.5)")
        if self.gait_period < 4:
            raise ArgumentError("gait_period must be >= 4")
        amp = {Label(k): float(v) for k, v in self.lean_amplitude.items()}
        for label in Label:
            if label not in amp:
                raise ArgumentError(f"lean_amplitude missing {label.short_name}")
        if amp[Label.NEGATIVE] != 0.0:
            raise ArgumentError("negative-class lean_amplitude must be 0")
        if not amp[Label.POSITIVE] > amp[Label.NEUTRAL] > 0.0:
            raise ArgumentError("lean amplitudes must order positive > neutral > 0")
        self.lean_amplitude = amp


@dataclass
class _FigureGeometry:
    # All lengths in pixels at the render size.
    hip_y: float
    hip_dx: float
    torso_semi_x: float
    torso_semi_y: float
    leg_len: float
    leg_radius: float
    swing_max: float  # radians
    lean_angle: float  # radians, rotation of the torso about the hip anchor


def _draw_figure(geo: _FigureGeometry, phase: float, size: tuple[int, int]) -> np.ndarray:
    """Rasterize one frame as a {0,1} float32 mask.

    The figure is a torso ellipse rotated about the hip midpoint plus two leg
    capsules swinging in anti-phase. Horizontal coordinates are centered so a
    zero-lean figure at mid-stance is exactly mirror-symmetric on the grid.
    """
    h, w = size
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = (np.arange(w, dtype=np.float64) - (w - 1) / 2.0)[None, :]

    swing = math.sin(2.0 * math.pi * phase)
    if abs(swing) < 1e-9:  # snap so mid-stance symmetry is exact, not approximate
        swing = 0.0
    bob = 0.012 * h * (1.0 - math.cos(4.0 * math.pi * phase)) / 2.0
    yy = ys - bob

    # Torso: rotate grid points back by the lean angle about (0, hip_y), then
    # test against the upright ellipse whose bottom touches the hip line.
    cos_t, sin_t = math.cos(geo.lean_angle), math.sin(geo.lean_angle)
    rel_y = yy - geo.hip_y
    tx = cos_t * xs + sin_t * rel_y
    ty = -sin_t * xs + cos_t * rel_y
    center_y = -geo.torso_semi_y  # relative to the hip
    torso = (tx / geo.torso_semi_x) ** 2 + ((ty - center_y) / geo.torso_semi_y) ** 2 <= 1.0

    def leg_mask(hip_x: float, angle: float) -> np.ndarray:
        ax, ay = hip_x, geo.hip_y
        bx = hip_x + geo.leg_len * math.sin(angle)
        by = geo.hip_y + geo.leg_len * math.cos(angle)
        vx, vy = bx - ax, by - ay
        seg_len2 = vx * vx + vy * vy
        t = ((xs - ax) * vx + (yy - ay) * vy) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dx = xs - (ax + t * vx)
        dy = yy - (ay + t * vy)
        return dx * dx + dy * dy <= geo.leg_radius**2

    left = leg_mask(-geo.hip_dx, geo.swing_max * swing)
    right = leg_mask(geo.hip_dx, -geo.swing_max * swing)
    return (torso | left | right).astype(np.float32)


def _subject_geometry(rng: np.random.Generator, spec: SynthSpec, label: Label) -> _FigureGeometry:
    h, w = spec.image_size
    width_fac = rng.uniform(0.85, 1.15)
    height_fac = rng.uniform(0.97, 1.03)
    torso_fac = rng.uniform(0.92, 1.08)
    swing_max = rng.uniform(0.28, 0.38)
    hip_y = 0.56 * h * height_fac
    lean = math.atan2(spec.lean_amplitude[label], hip_y)
    return _FigureGeometry(
        hip_y=hip_y,
        hip_dx=0.10 * w * width_fac,
        torso_semi_x=0.16 * w * width_fac,
        torso_semi_y=0.24 * h * torso_fac,
        leg_len=(h - 2.0) - hip_y,
        leg_radius=0.05 * w * width_fac,
        swing_max=swing_max,
        lean_angle=lean,
    )


def generate_synthetic(spec: SynthSpec) -> tuple[list[SilhouetteSequence], DatasetManifest]:
    """Generate one sequence per synthetic subject, bit-identical under a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    sequences: list[SilhouetteSequence] = []
    entries: list[ManifestEntry] = []
    for label in Label:
        for i in range(spec.n_subjects_per_class):
            subject_id = f"{label.short_name[:3]}{i:03d}"
            geo = _subject_geometry(rng, spec, label)
            frames = np.empty((spec.frames_per_sequence, *spec.image_size), dtype=np.float32)
            for t in range(spec.frames_per_sequence):
                phase = (t % spec.gait_period) / spec.gait_period
                frame = _draw_figure(geo, phase, spec.image_size)
                if spec.noise_rate > 0.0:
                    flips = rng.random(spec.image_size) < spec.noise_rate
                    frame = np.abs(frame - flips.astype(np.float32))
                frames[t] = frame
            sequences.append(SilhouetteSequence(subject_id, label, frames, spec.fps))
            entries.append(ManifestEntry(f"{subject_id}/seq00", subject_id, label))
    return sequences, DatasetManifest.from_entries(entries)


def save_dataset(
    sequences: list[SilhouetteSequence],
    manifest: DatasetManifest,
    root: Path | str,
    force: bool = False,
) -> None:
    """Write sequences as PNG stacks plus the manifest. Refuses a non-empty root."""
    if len(sequences) != len(manifest.entries):
        raise ArgumentError(
            f"{len(sequences)} sequences but {len(manifest.entries)} manifest entries"
        )
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"output directory {root} is not empty (pass force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    for seq, entry in zip(sequences, manifest.entries):
        if seq.subject_id != entry.subject_id or seq.label != entry.label:
            raise ArgumentError(f"sequence/manifest mismatch at {entry.path}")
        seq_dir = root / entry.path
        seq_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            data = np.round(frame * 255.0).astype(np.uint8)
            if not cv2.imwrite(str(seq_dir / f"{t:04d}.png"), data):
                raise DatasetError(f"failed to write {seq_dir / f'{t:04d}.png'}")
    with open(root / MANIFEST_NAME, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")


def load_sequence(root: Path | str, entry: ManifestEntry, normalize: bool = True) -> SilhouetteSequence:
    seq_dir = Path(root) / entry.path
    if not seq_dir.is_dir():
        raise DatasetError(f"sequence directory missing: {seq_dir}")
    frame_paths = sorted(seq_dir.glob("*.png"))
    if not frame_paths:
        raise DatasetError(f"no frames found under {seq_dir}")
    frames = []
    for path in frame_paths:
        raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if raw is None:
            raise DatasetError(f"unreadable frame: {path}")
        frame = raw.astype(np.float32) / 255.0
        frames.append(normalize_frame(frame) if normalize else frame)
    return SilhouetteSequence(entry.subject_id, entry.label, np.stack(frames))


def load_dataset(
    root: Path | str, manifest: DatasetManifest | None = None, normalize: bool = True
) -> tuple[list[SilhouetteSequence], DatasetManifest]:
    """Load every sequence named by the manifest, in manifest order."""
    root = Path(root)
    if manifest is None:
        manifest = read_manifest(root / MANIFEST_NAME)
    sequences = [load_sequence(root, entry, normalize=normalize) for entry in manifest.entries]
    return sequences, manifest


def read_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {path}") from exc
    return DatasetManifest.from_dict(payload)
