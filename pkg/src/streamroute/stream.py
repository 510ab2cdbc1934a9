"""Causal data model for multimodal feature streams.

A stream is a per-second sequence of (visual, text, audio) feature vectors.
Decisions at timestamp i may only look at a bounded past-only window
[i-N, i]; supervision arrives as post-hoc segment annotations that are
propagated to per-timestamp labels. Everything here is immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Sequence

import numpy as np

MODALITIES = ("visual", "text", "audio")

#: Distinguished per-timestamp label for spans with no annotation.
UNLABELED = -1


@dataclass(frozen=True)
class StreamConfig:
    """Windowing hyperparameters shared by training and simulation.

    window_len is the number of past steps N, so every window holds
    N+1 positions. text_agg / audio_agg are the per-modality causal
    aggregation spans in seconds (vision is never aggregated).
    """

    window_len: int = 32
    interval: int = 1
    text_agg: int = 2
    audio_agg: int = 4

    def __post_init__(self) -> None:
        if self.window_len < 1:
            raise ValueError(f"window_len must be >= 1, got {self.window_len}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")
        for name, value in (("text_agg", self.text_agg), ("audio_agg", self.audio_agg)):
            if not 1 <= value <= self.window_len:
                raise ValueError(
                    f"{name} must be in [1, window_len={self.window_len}], got {value}"
                )


@dataclass(frozen=True)
class TimestepFeatures:
    """Feature vectors observed at one timestamp; None marks an absent modality."""

    visual: np.ndarray | None
    text: np.ndarray | None
    audio: np.ndarray | None


@dataclass(frozen=True)
class ModalityTrack:
    """One modality's features over a whole video.

    features is (T, D); present is (T,) and is the only source of truth
    for absence. Rows with present=False hold zeros purely as storage —
    consumers must check the mask, never the values.
    """

    features: np.ndarray
    present: np.ndarray

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float32)
        pres = np.asarray(self.present, dtype=bool)
        if feats.ndim != 2:
            raise ValueError(f"features must be (T, D), got shape {feats.shape}")
        if pres.shape != (feats.shape[0],):
            raise ValueError(
                f"present mask shape {pres.shape} does not match T={feats.shape[0]}"
            )
        if not np.isfinite(feats[pres]).all():
            raise ValueError("present feature rows must be finite")
        feats.flags.writeable = False
        pres.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "present", pres)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> int:
        return self.features.shape[0]

    @staticmethod
    def absent(duration: int, dim: int) -> "ModalityTrack":
        """Track for a modality the video does not carry at all."""
        return ModalityTrack(
            features=np.zeros((duration, dim), dtype=np.float32),
            present=np.zeros(duration, dtype=bool),
        )


@dataclass(frozen=True, order=True)
class SegmentAnnotation:
    """Post-hoc annotation [st, en] (inclusive) with a single class id."""

    st: int
    en: int
    label: int = field(compare=False)
    video_id: str = field(compare=False, default="")

    def __post_init__(self) -> None:
        if self.st < 0 or self.en < self.st:
            raise ValueError(
                f"segment must satisfy 0 <= st <= en, got [{self.st}, {self.en}]"
            )

    @property
    def length(self) -> int:
        return self.en - self.st + 1

    @property
    def interval(self) -> tuple[int, int]:
        return (self.st, self.en)


@dataclass(frozen=True)
class VideoStream:
    """One video's feature tracks plus its segment annotations."""

    video_id: str
    duration: int
    visual: ModalityTrack
    text: ModalityTrack
    audio: ModalityTrack
    segments: tuple[SegmentAnnotation, ...] = ()

    def __post_init__(self) -> None:
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1, got {self.duration}")
        for name in MODALITIES:
            track = self.track(name)
            if track.duration != self.duration:
                raise ValueError(
                    f"video {self.video_id!r}: {name} track has {track.duration} "
                    f"rows, expected duration {self.duration}"
                )
        ordered = tuple(sorted(self.segments))
        for seg in ordered:
            if seg.en > self.duration - 1:
                raise ValueError(
                    f"video {self.video_id!r}: segment [{seg.st}, {seg.en}] exceeds "
                    f"duration {self.duration}"
                )
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.st <= prev.en:
                raise ValueError(
                    f"video {self.video_id!r}: overlapping segments "
                    f"[{prev.st}, {prev.en}] and [{cur.st}, {cur.en}]"
                )
        object.__setattr__(self, "segments", ordered)

    def track(self, modality: str) -> ModalityTrack:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return getattr(self, modality)

    def at(self, i: int) -> TimestepFeatures:
        """Raw features at timestamp i (None where the modality is absent)."""
        if not 0 <= i < self.duration:
            raise IndexError(f"timestamp {i} outside [0, {self.duration})")
        values = {}
        for name in MODALITIES:
            track = self.track(name)
            values[name] = track.features[i] if track.present[i] else None
        return TimestepFeatures(**values)

    @cached_property
    def labels(self) -> np.ndarray:
        """Per-timestamp labels propagated from the segments (UNLABELED in gaps)."""
        return propagate_labels(self.segments, self.duration)

    def segment_containing(self, i: int) -> SegmentAnnotation | None:
        for seg in self.segments:
            if seg.st <= i <= seg.en:
                return seg
        return None


@dataclass(frozen=True)
class StreamDataset:
    """A named collection of videos sharing a label space and feature dims."""

    name: str
    label_space: tuple[str, ...]
    dims: Mapping[str, int]
    videos: tuple[VideoStream, ...]
    sample_rate: int = 1

    def __post_init__(self) -> None:
        if not self.label_space:
            raise ValueError("label_space must be non-empty")
        if len(set(self.label_space)) != len(self.label_space):
            raise ValueError("label_space contains duplicates")
        missing = [m for m in MODALITIES if m not in self.dims]
        if missing:
            raise ValueError(f"dims missing modalities: {missing}")
        object.__setattr__(self, "label_space", tuple(self.label_space))
        object.__setattr__(self, "videos", tuple(self.videos))
        object.__setattr__(self, "dims", dict(self.dims))
        n_classes = len(self.label_space)
        for video in self.videos:
            for name in MODALITIES:
                if video.track(name).dim != self.dims[name]:
                    raise ValueError(
                        f"video {video.video_id!r}: {name} dim "
                        f"{video.track(name).dim} != declared {self.dims[name]}"
                    )
            for seg in video.segments:
                if not 0 <= seg.label < n_classes:
                    raise ValueError(
                        f"video {video.video_id!r}: segment [{seg.st}, {seg.en}] has "
                        f"label id {seg.label} outside label space of {n_classes}"
                    )
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video_id in dataset")

    @property
    def n_classes(self) -> int:
        return len(self.label_space)

    def video(self, video_id: str) -> VideoStream:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(f"no video {video_id!r} in dataset {self.name!r}")

    def label_id(self, name: str) -> int:
        try:
            return self.label_space.index(name)
        except ValueError:
            raise ValueError(
                f"unknown label {name!r}; label space is {list(self.label_space)}"
            ) from None


@dataclass(frozen=True)
class StreamWindow:
    """Past-only slice [max(0, i-N), i] of a stream, padded to N+1 positions.

    Per-modality matrices are (N+1, D); pad_mask flags positions whose
    timestamp would be negative (synthetic zeros), and the per-modality
    present masks additionally exclude absent real timestamps. Causality:
    nothing in the window references any timestamp beyond i.
    """

    video_id: str
    extent: tuple[int, int]
    visual: np.ndarray
    text: np.ndarray
    audio: np.ndarray
    visual_present: np.ndarray
    text_present: np.ndarray
    audio_present: np.ndarray
    pad_mask: np.ndarray

    @property
    def timestamp(self) -> int:
        return self.extent[1]

    @property
    def n_positions(self) -> int:
        return self.pad_mask.shape[0]

    def modality(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(features, present) pair for one modality."""
        if name not in MODALITIES:
            raise ValueError(f"unknown modality {name!r}")
        return getattr(self, name), getattr(self, f"{name}_present")

    @property
    def features(self) -> tuple[TimestepFeatures, ...]:
        """Per-position view; padded/absent entries come back as None."""
        out = []
        for p in range(self.n_positions):
            values = {}
            for name in MODALITIES:
                feats, pres = self.modality(name)
                values[name] = feats[p] if pres[p] else None
            out.append(TimestepFeatures(**values))
        return tuple(out)


def propagate_labels(
    segments: Sequence[SegmentAnnotation], duration: int
) -> np.ndarray:
    """Spread each segment's label over its timestamps; gaps stay UNLABELED.

    Raises on overlapping segments, naming the two offenders.
    """
    if duration < 0:
        raise ValueError(f"duration must be >= 0, got {duration}")
    labels = np.full(duration, UNLABELED, dtype=np.int64)
    ordered = sorted(segments)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.st <= prev.en:
            raise ValueError(
                f"overlapping segments [{prev.st}, {prev.en}] and "
                f"[{cur.st}, {cur.en}]"
                + (f" in video {prev.video_id!r}" if prev.video_id else "")
            )
    for seg in ordered:
        if seg.en > duration - 1:
            raise ValueError(
                f"segment [{seg.st}, {seg.en}] exceeds duration {duration}"
            )
        labels[seg.st : seg.en + 1] = seg.label
    labels.flags.writeable = False
    return labels


def extract_window(
    stream: VideoStream, i: int, config: StreamConfig
) -> StreamWindow:
    """Build the causal window ending at timestamp i.

    Positions that would fall before timestamp 0 are zero-filled with
    pad_mask=True (fixed padding); everything else is a copy of the raw
    per-timestamp features.
    """
    if not 0 <= i < stream.duration:
        raise IndexError(
            f"timestamp {i} outside [0, {stream.duration}) for video "
            f"{stream.video_id!r}"
        )
    n = config.window_len
    start = i - n
    n_pad = max(0, -start)
    lo = max(0, start)
    parts: dict[str, np.ndarray] = {}
    for name in MODALITIES:
        track = stream.track(name)
        feats = track.features[lo : i + 1]
        pres = track.present[lo : i + 1]
        if n_pad:
            feats = np.concatenate(
                [np.zeros((n_pad, track.dim), dtype=np.float32), feats]
            )
            pres = np.concatenate([np.zeros(n_pad, dtype=bool), pres])
        feats.flags.writeable = False
        pres.flags.writeable = False
        parts[name] = feats
        parts[f"{name}_present"] = pres
    pad_mask = np.zeros(n + 1, dtype=bool)
    pad_mask[:n_pad] = True
    pad_mask.flags.writeable = False
    return StreamWindow(
        video_id=stream.video_id,
        extent=(lo, i),
        pad_mask=pad_mask,
        **parts,
    )


def aggregate_modality(
    stream: VideoStream, modality: str, i: int, span: int
) -> np.ndarray | None:
    """Causal mean of one modality over [max(0, i-span+1), i].

    Absent timestamps are ignored; if every timestamp in the span is
    absent the result is None (absent), never a silent zero vector.
    """
    if span < 1:
        raise ValueError(f"aggregation span must be >= 1, got {span}")
    if not 0 <= i < stream.duration:
        raise IndexError(f"timestamp {i} outside [0, {stream.duration})")
    track = stream.track(modality)
    lo = max(0, i - span + 1)
    pres = track.present[lo : i + 1]
    if not pres.any():
        return None
    return track.features[lo : i + 1][pres].mean(axis=0)


def temporal_iou(window: tuple[int, int], segment: tuple[int, int]) -> float:
    """Intersection-over-union of two inclusive integer intervals.

    Counted over discrete timestamps: [0, 1] and [1, 3] intersect in the
    single timestamp 1 and cover {0, 1, 2, 3}, so IoU = 1/4. Disjoint
    intervals give 0.
    """
    w_st, w_en = window
    s_st, s_en = segment
    if w_en < w_st:
        raise ValueError(f"degenerate interval [{w_st}, {w_en}]")
    if s_en < s_st:
        raise ValueError(f"degenerate interval [{s_st}, {s_en}]")
    inter = min(w_en, s_en) - max(w_st, s_st) + 1
    if inter <= 0:
        return 0.0
    union = (w_en - w_st + 1) + (s_en - s_st + 1) - inter
    return inter / union


def split_by_video(
    dataset: StreamDataset, train_fraction: float, seed: int
) -> tuple[StreamDataset, StreamDataset]:
    """Deterministic video-level split; no video appears in both halves.

    The train side gets round(train_fraction * n) videos, clamped so
    neither side is empty.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset.videos)
    if n < 2:
        raise ValueError(f"need at least 2 videos to split, got {n}")
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train_idx = set(order[:n_train].tolist())
    train_videos = tuple(v for k, v in enumerate(dataset.videos) if k in train_idx)
    test_videos = tuple(v for k, v in enumerate(dataset.videos) if k not in train_idx)

    def _subset(videos: tuple[VideoStream, ...], tag: str) -> StreamDataset:
        return StreamDataset(
            name=f"{dataset.name}-{tag}",
            label_space=dataset.label_space,
            dims=dataset.dims,
            videos=videos,
            sample_rate=dataset.sample_rate,
        )

    return _subset(train_videos, "train"), _subset(test_videos, "test")


def decision_timestamps(stream: VideoStream, config: StreamConfig) -> Iterator[int]:
    """Timestamps at which a streaming decision is due (every `interval` s)."""
    return iter(range(0, stream.duration, config.interval))
