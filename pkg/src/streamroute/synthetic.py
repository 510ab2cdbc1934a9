"""Synthetic multimodal streams with late-arriving evidence.

Each video is a run of piecewise-constant labeled segments (optionally
separated by unlabeled gaps). Features are Gaussian noise everywhere;
only the FINAL `informative_fraction` of each segment adds that class's
signature direction, so early windows of a segment look like the previous
segment's tail plus noise. That reproduces the two streaming pathologies
the trainer has to cope with: boundary label interference and evidence
that arrives late within a segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stream import (
    MODALITIES,
    ModalityTrack,
    SegmentAnnotation,
    StreamDataset,
    VideoStream,
)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the generator; informative_fraction is the paper-facing one."""

    n_videos: int = 20
    duration: int = 240
    n_classes: int = 2
    seg_len_min: int = 20
    seg_len_max: int = 60
    informative_fraction: float = 0.5
    signal_scale: float = 1.5
    noise_scale: float = 1.0
    dim_visual: int = 8
    dim_text: int = 8
    dim_audio: int = 8
    unlabeled_gap_prob: float = 0.0
    gap_len_min: int = 2
    gap_len_max: int = 10
    alternate_labels: bool = False
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self) -> None:
        if self.n_videos < 1 or self.duration < 2:
            raise ValueError("need n_videos >= 1 and duration >= 2")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise ValueError("need 1 <= seg_len_min <= seg_len_max")
        if not 0.0 < self.informative_fraction <= 1.0:
            raise ValueError(
                f"informative_fraction must be in (0, 1], got "
                f"{self.informative_fraction}"
            )
        if not 0.0 <= self.unlabeled_gap_prob < 1.0:
            raise ValueError("unlabeled_gap_prob must be in [0, 1)")

    @property
    def dims(self) -> dict[str, int]:
        return {"visual": self.dim_visual, "text": self.dim_text, "audio": self.dim_audio}

    @property
    def label_space(self) -> tuple[str, ...]:
        return tuple(f"class_{c}" for c in range(self.n_classes))


def _segment_plan(
    config: SyntheticConfig, rng: np.random.Generator
) -> list[SegmentAnnotation]:
    """Tile one video with segments.

    Labels are drawn iid per segment by default, so the previous segment's
    decaying evidence says nothing about the next label and boundary
    windows carry genuinely conflicting supervision. alternate_labels
    forces every boundary to change class instead.
    """
    segments = []
    t = 0
    prev_label = None
    while t < config.duration:
        if (
            config.unlabeled_gap_prob > 0
            and segments
            and rng.random() < config.unlabeled_gap_prob
        ):
            t += int(rng.integers(config.gap_len_min, config.gap_len_max + 1))
            if t >= config.duration:
                break
        length = int(rng.integers(config.seg_len_min, config.seg_len_max + 1))
        en = min(t + length - 1, config.duration - 1)
        if config.alternate_labels and prev_label is not None:
            choices = [c for c in range(config.n_classes) if c != prev_label]
            label = choices[0] if len(choices) == 1 else int(rng.choice(choices))
        else:
            label = int(rng.integers(config.n_classes))
        segments.append(SegmentAnnotation(st=t, en=en, label=label))
        prev_label = label
        t = en + 1
    return segments


def generate_dataset(config: SyntheticConfig) -> StreamDataset:
    """Deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    dims = config.dims
    # One signature direction per (modality, class), shared across videos.
    signatures = {
        m: rng.normal(size=(config.n_classes, dims[m])) for m in MODALITIES
    }
    for m in MODALITIES:
        norms = np.linalg.norm(signatures[m], axis=1, keepdims=True)
        signatures[m] = signatures[m] / norms * config.signal_scale

    videos = []
    for v in range(config.n_videos):
        video_id = f"v{v:03d}"
        segments = [
            SegmentAnnotation(st=s.st, en=s.en, label=s.label, video_id=video_id)
            for s in _segment_plan(config, rng)
        ]
        tracks = {}
        for m in MODALITIES:
            feats = rng.normal(scale=config.noise_scale, size=(config.duration, dims[m]))
            for seg in segments:
                n_info = max(1, math.ceil(config.informative_fraction * seg.length))
                info_start = seg.en - n_info + 1
                feats[info_start : seg.en + 1] += signatures[m][seg.label]
            tracks[m] = ModalityTrack(
                features=feats.astype(np.float32),
                present=np.ones(config.duration, dtype=bool),
            )
        videos.append(
            VideoStream(
                video_id=video_id,
                duration=config.duration,
                segments=tuple(segments),
                **tracks,
            )
        )
    return StreamDataset(
        name=config.name,
        label_space=config.label_space,
        dims=dims,
        videos=tuple(videos),
    )
