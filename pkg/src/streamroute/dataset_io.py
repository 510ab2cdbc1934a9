"""On-disk dataset format: manifest + segment JSONL + binary feature matrices.

Layout (one directory per dataset):

    manifest.json                 name, label_space, feature_dims, sample_rate,
                                  and one entry per video
    <video_id>.segments.jsonl     one {"video_id","st","en","label"} per line,
                                  label given as a class NAME
    <video_id>.<modality>.bin     little-endian float32 matrix with an 8-byte
                                  header (u32 rows, u32 cols); row r = timestamp r

A modality a video does not carry is declared as null in the manifest and its
file omitted. Inside a present matrix, a row of all NaN marks that single
timestamp as absent; partially-NaN rows are rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .stream import (
    MODALITIES,
    ModalityTrack,
    SegmentAnnotation,
    StreamDataset,
    VideoStream,
)

_HEADER = struct.Struct("<II")


class DatasetFormatError(ValueError):
    """Raised when on-disk data violates the format or the dataset invariants."""


def write_matrix(path: Path, features: np.ndarray, present: np.ndarray) -> None:
    """Write a (T, D) float32 matrix; absent rows are stored as NaN."""
    feats = np.array(features, dtype="<f4", copy=True)
    feats[~np.asarray(present, dtype=bool)] = np.nan
    rows, cols = feats.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(rows, cols))
        fh.write(feats.tobytes(order="C"))


def read_matrix(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a feature matrix back into (features, present)."""
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    rows, cols = _HEADER.unpack_from(raw)
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        done = (len(raw) - _HEADER.size) // max(cols * 4, 1)
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes for {rows}x{cols}, got "
            f"{len(raw)} (data ends inside row {done})"
        )
    feats = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    nan_mask = np.isnan(feats)
    all_nan = nan_mask.all(axis=1) if cols else np.zeros(rows, dtype=bool)
    any_nan = nan_mask.any(axis=1)
    partial = np.flatnonzero(any_nan & ~all_nan)
    if partial.size:
        raise DatasetFormatError(
            f"{path}: row {int(partial[0])} is partially NaN (an absent "
            f"timestamp must be all-NaN)"
        )
    present = ~all_nan
    feats = np.where(all_nan[:, None], 0.0, feats).astype(np.float32)
    return feats, present


def save_dataset(dataset: StreamDataset, path: str | Path) -> Path:
    """Materialize a dataset directory; returns the directory path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for video in dataset.videos:
        modalities: dict[str, str | None] = {}
        for name in MODALITIES:
            track = video.track(name)
            if not track.present.any():
                modalities[name] = None
                continue
            fname = f"{video.video_id}.{name}.bin"
            write_matrix(root / fname, track.features, track.present)
            modalities[name] = fname
        seg_name = f"{video.video_id}.segments.jsonl"
        with open(root / seg_name, "w") as fh:
            for seg in video.segments:
                fh.write(
                    json.dumps(
                        {
                            "video_id": video.video_id,
                            "st": seg.st,
                            "en": seg.en,
                            "label": dataset.label_space[seg.label],
                        }
                    )
                    + "\n"
                )
        entries.append(
            {
                "video_id": video.video_id,
                "duration": video.duration,
                "segments": seg_name,
                "modalities": modalities,
            }
        )
    manifest = {
        "name": dataset.name,
        "label_space": list(dataset.label_space),
        "feature_dims": {m: int(dataset.dims[m]) for m in MODALITIES},
        "sample_rate": dataset.sample_rate,
        "videos": entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return root


def _load_segments(
    path: Path, video_id: str, duration: int, label_ids: dict[str, int]
) -> list[SegmentAnnotation]:
    segments = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: bad JSON ({exc})") from exc
            try:
                st, en, label = int(obj["st"]), int(obj["en"]), obj["label"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(
                    f"{path}:{lineno}: segment needs integer st/en and a label"
                ) from exc
            if label not in label_ids:
                raise DatasetFormatError(
                    f"{path}:{lineno}: unknown label {label!r} for video "
                    f"{video_id!r}"
                )
            if st < 0 or en < st:
                raise DatasetFormatError(
                    f"{path}:{lineno}: bad segment bounds [{st}, {en}]"
                )
            if en > duration - 1:
                raise DatasetFormatError(
                    f"{path}:{lineno}: segment [{st}, {en}] exceeds duration "
                    f"{duration} of video {video_id!r}"
                )
            segments.append(
                SegmentAnnotation(
                    st=st, en=en, label=label_ids[label], video_id=video_id
                )
            )
    return segments


def load_dataset(path: str | Path) -> StreamDataset:
    """Load and fully validate a dataset directory."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"{manifest_path}: not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest_path}: bad JSON ({exc})") from exc
    for key in ("name", "label_space", "feature_dims", "videos"):
        if key not in manifest:
            raise DatasetFormatError(f"{manifest_path}: missing key {key!r}")
    label_space = tuple(manifest["label_space"])
    label_ids = {name: k for k, name in enumerate(label_space)}
    dims = {m: int(manifest["feature_dims"][m]) for m in MODALITIES}

    videos = []
    for entry in manifest["videos"]:
        video_id = entry["video_id"]
        duration = int(entry["duration"])
        tracks: dict[str, ModalityTrack] = {}
        for name in MODALITIES:
            fname = entry["modalities"].get(name)
            if fname is None:
                tracks[name] = ModalityTrack.absent(duration, dims[name])
                continue
            feats, present = read_matrix(root / fname)
            if feats.shape[1] != dims[name]:
                raise DatasetFormatError(
                    f"{root / fname}: {name} width {feats.shape[1]} != declared "
                    f"{dims[name]}"
                )
            if feats.shape[0] != duration:
                raise DatasetFormatError(
                    f"{root / fname}: {feats.shape[0]} rows != duration "
                    f"{duration} of video {video_id!r}"
                )
            tracks[name] = ModalityTrack(features=feats, present=present)
        segments = _load_segments(
            root / entry["segments"], video_id, duration, label_ids
        )
        try:
            videos.append(
                VideoStream(
                    video_id=video_id,
                    duration=duration,
                    segments=tuple(segments),
                    **tracks,
                )
            )
        except ValueError as exc:
            raise DatasetFormatError(f"{root / entry['segments']}: {exc}") from exc

    try:
        return StreamDataset(
            name=manifest["name"],
            label_space=label_space,
            dims=dims,
            videos=tuple(videos),
            sample_rate=int(manifest.get("sample_rate", 1)),
        )
    except ValueError as exc:
        raise DatasetFormatError(f"{manifest_path}: {exc}") from exc
