"""Window scorers: the trainable streaming encoder and its stand-ins.

A scorer maps a causal StreamWindow to a label plus a confidence
p = max class probability (p is in [0.5, 1.0] for binary label spaces).
Three implementations share that contract:

* TrainableScorer — three per-modality tanh stacks over the window
  positions, mask-aware mean pooling, a fusion stack over the concatenated
  pooled embeddings, and an MLP head. Trained with the combined
  contrastive + IoU-weighted objective by hand-rolled backprop.
* SyntheticOracleScorer — emits the ground truth with a configurable flip
  probability and confidence model; deterministic per (seed, video, t).
* TraceScorer — replays a previously exported CSV trace.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .losses import LossConfig, cross_modal_loss_grad, iou_weighted_ce_from_logits
from .nn import (
    Adam,
    ParamSpec,
    glorot_init,
    masked_mean,
    masked_mean_backward,
    mlp_backward,
    mlp_entries,
    mlp_forward,
)
from .stream import (
    MODALITIES,
    UNLABELED,
    StreamConfig,
    StreamDataset,
    StreamWindow,
    decision_timestamps,
    extract_window,
    temporal_iou,
)

CHECKPOINT_MAGIC = b"SSNC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad data or diverging loss)."""


@dataclass(frozen=True)
class ScorerOutput:
    """One scoring decision: argmax label, its probability, full distribution."""

    label: int
    confidence: float
    class_probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.class_probs, dtype=np.float64)
        probs.flags.writeable = False
        object.__setattr__(self, "class_probs", probs)


class WindowScorer(Protocol):
    n_classes: int

    def score(self, window: StreamWindow) -> ScorerOutput: ...


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and optimizer settings for the trainable scorer."""

    enc_layers: int = 2
    fusion_layers: int = 2
    head_layers: int = 2
    hidden_dim: int = 32
    learning_rate: float = 1e-2
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("enc_layers", "fusion_layers", "head_layers", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass(frozen=True)
class ConfidenceModel:
    """How an oracle reports confidence.

    kinds: "constant" (always `value`), "calibrated" (1 - flip_prob),
    "uniform" (uniform on [low, high]), "banded" (uniform on a correct
    band when right, a wrong band when wrong — a crude stand-in for a
    partially calibrated classifier).
    """

    kind: str = "calibrated"
    value: float = 0.9
    low: float = 0.6
    high: float = 0.95
    wrong_low: float = 0.5
    wrong_high: float = 0.75

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "calibrated", "uniform", "banded"):
            raise ValueError(f"unknown confidence model kind {self.kind!r}")
        for name in ("value", "low", "high", "wrong_low", "wrong_high"):
            p = getattr(self, name)
            if not 0.5 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0.5, 1.0]")
        if self.low > self.high or self.wrong_low > self.wrong_high:
            raise ValueError("confidence bands must have low <= high")

    def sample(self, rng: np.random.Generator, correct: bool, flip_prob: float) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "calibrated":
            return 1.0 - flip_prob
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if correct:
            return float(rng.uniform(self.low, self.high))
        return float(rng.uniform(self.wrong_low, self.wrong_high))

    @staticmethod
    def constant(value: float) -> "ConfidenceModel":
        return ConfidenceModel(kind="constant", value=value)

    @staticmethod
    def calibrated() -> "ConfidenceModel":
        return ConfidenceModel(kind="calibrated")

    @staticmethod
    def uniform(low: float, high: float) -> "ConfidenceModel":
        return ConfidenceModel(kind="uniform", low=low, high=high)

    @staticmethod
    def banded(
        low: float, high: float, wrong_low: float, wrong_high: float
    ) -> "ConfidenceModel":
        return ConfidenceModel(
            kind="banded", low=low, high=high, wrong_low=wrong_low, wrong_high=wrong_high
        )


def stable_hash(text: str) -> int:
    """Deterministic 32-bit hash (Python's hash() is salted per process)."""
    return zlib.crc32(text.encode("utf-8"))


def _distribute_probs(label: int, confidence: float, n_classes: int) -> np.ndarray:
    probs = np.full(n_classes, (1.0 - confidence) / max(n_classes - 1, 1))
    probs[label] = confidence
    return probs


class SyntheticOracleScorer:
    """Ground-truth oracle with a per-timestamp error rate.

    Output at (video, t) depends only on (seed, video_id, t), so replaying
    any subset of timestamps in any order — or concurrently — gives
    identical answers.
    """

    def __init__(
        self,
        labels: Mapping[str, np.ndarray],
        flip_prob: float,
        confidence_model: ConfidenceModel,
        seed: int,
        n_classes: int,
    ):
        if not 0.0 <= flip_prob <= 0.5:
            raise ValueError(f"flip_prob must be in [0, 0.5], got {flip_prob}")
        if n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {n_classes}")
        self.labels = {k: np.asarray(v) for k, v in labels.items()}
        self.flip_prob = flip_prob
        self.confidence_model = confidence_model
        self.seed = seed
        self.n_classes = n_classes

    def score_at(self, video_id: str, t: int) -> ScorerOutput:
        rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, stable_hash(video_id), t))
        )
        truth = int(self.labels[video_id][t])
        if truth == UNLABELED:
            truth = 0
        flipped = bool(rng.random() < self.flip_prob)
        if flipped:
            others = [c for c in range(self.n_classes) if c != truth]
            label = others[0] if len(others) == 1 else int(rng.choice(others))
        else:
            label = truth
        confidence = self.confidence_model.sample(rng, correct=not flipped, flip_prob=self.flip_prob)
        return ScorerOutput(
            label=label,
            confidence=confidence,
            class_probs=_distribute_probs(label, confidence, self.n_classes),
        )

    def score(self, window: StreamWindow) -> ScorerOutput:
        return self.score_at(window.video_id, window.timestamp)


def make_synthetic_oracle(
    labels: Mapping[str, np.ndarray] | np.ndarray,
    flip_prob: float,
    confidence_model: ConfidenceModel,
    seed: int,
    n_classes: int = 2,
    video_id: str = "stream",
) -> SyntheticOracleScorer:
    """Build an oracle scorer from per-timestamp ground truth.

    `labels` is either {video_id: per-timestamp array} or a single array
    (then `video_id` names that one stream).
    """
    if isinstance(labels, np.ndarray) or (
        not isinstance(labels, Mapping) and hasattr(labels, "__len__")
    ):
        labels = {video_id: np.asarray(labels)}
    return SyntheticOracleScorer(labels, flip_prob, confidence_model, seed, n_classes)


def oracle_for_dataset(
    dataset: StreamDataset,
    flip_prob: float,
    confidence_model: ConfidenceModel,
    seed: int,
) -> SyntheticOracleScorer:
    return SyntheticOracleScorer(
        {v.video_id: v.labels for v in dataset.videos},
        flip_prob,
        confidence_model,
        seed,
        dataset.n_classes,
    )


# ---------------------------------------------------------------------------
# Trainable scorer
# ---------------------------------------------------------------------------


def causal_window_mean(
    feats: np.ndarray, present: np.ndarray, span: int
) -> tuple[np.ndarray, np.ndarray]:
    """Causal mean over the trailing `span` positions, inside one window.

    Works purely on the window's own positions (clamped at the window
    start) so a scorer's output is a function of the window alone.
    Positions with no present entry in their span stay absent.
    """
    feats = np.asarray(feats, dtype=np.float64)
    w = present.astype(np.float64)
    if span <= 1:
        return feats * w[:, None], present.copy()
    csum = np.cumsum(feats * w[:, None], axis=0)
    ccnt = np.cumsum(w)
    tail_sum = csum.copy()
    tail_cnt = ccnt.copy()
    tail_sum[span:] -= csum[:-span]
    tail_cnt[span:] -= ccnt[:-span]
    agg_present = tail_cnt > 0
    agg = tail_sum / np.maximum(tail_cnt, 1.0)[:, None]
    agg[~agg_present] = 0.0
    return agg, agg_present


def featurize_window(
    window: StreamWindow, config: StreamConfig
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Model inputs for one window: per-modality (P, D) arrays + valid masks.

    Vision stays raw per-position; text and audio are causally averaged
    over their aggregation spans. Padded positions are never valid.
    """
    spans = {"visual": 1, "text": config.text_agg, "audio": config.audio_agg}
    xs: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for name in MODALITIES:
        feats, present = window.modality(name)
        agg, valid = causal_window_mean(feats, present, spans[name])
        xs[name] = agg
        masks[name] = valid
    return xs, masks


def network_spec(
    config: EncoderConfig, dims: Mapping[str, int], n_classes: int
) -> ParamSpec:
    h = config.hidden_dim
    entries = []
    for name in MODALITIES:
        entries += mlp_entries(f"enc_{name}", [dims[name]] + [h] * config.enc_layers)
    entries += mlp_entries("fusion", [3 * h] + [h] * config.fusion_layers)
    entries += mlp_entries("head", [h] * config.head_layers + [n_classes])
    return ParamSpec(tuple(entries))


def network_forward(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    xs: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
) -> tuple[np.ndarray, dict[str, np.ndarray], dict]:
    """Batched forward pass.

    xs[m] is (B, P, D_m), masks[m] is (B, P). Returns logits (B, C), pooled
    per-modality embeddings (the contrastive surface), and the cache for
    backward.
    """
    cache: dict = {"mlp": {}, "counts": {}, "masks": dict(masks)}
    pooled: dict[str, np.ndarray] = {}
    for name in MODALITIES:
        h, mlp_cache = mlp_forward(params, f"enc_{name}", xs[name], config.enc_layers)
        e, counts = masked_mean(h, masks[name])
        cache["mlp"][name] = mlp_cache
        cache["counts"][name] = counts
        pooled[name] = e
    concat = np.concatenate([pooled[name] for name in MODALITIES], axis=1)
    fused, fusion_cache = mlp_forward(params, "fusion", concat, config.fusion_layers)
    logits, head_cache = mlp_forward(
        params, "head", fused, config.head_layers, final_tanh=False
    )
    cache["fusion"] = fusion_cache
    cache["head"] = head_cache
    return logits, pooled, cache


def network_backward(
    params: dict[str, np.ndarray],
    spec: ParamSpec,
    config: EncoderConfig,
    cache: dict,
    d_logits: np.ndarray,
    d_pooled: Mapping[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Backprop to a flat gradient vector.

    d_pooled carries the contrastive gradients that attach directly to the
    pooled embeddings (before fusion); pass None when alpha = 0.
    """
    grads: dict[str, np.ndarray] = {}
    d_fused = mlp_backward(
        params, "head", cache["head"], d_logits, grads, final_tanh=False
    )
    d_concat = mlp_backward(params, "fusion", cache["fusion"], d_fused, grads)
    h = config.hidden_dim
    for k, name in enumerate(MODALITIES):
        d_e = d_concat[:, k * h : (k + 1) * h]
        if d_pooled is not None and name in d_pooled:
            d_e = d_e + d_pooled[name]
        d_h = masked_mean_backward(d_e, cache["masks"][name], cache["counts"][name])
        mlp_backward(params, f"enc_{name}", cache["mlp"][name], d_h, grads)
    full = {name: grads.get(name, np.zeros(shape)) for name, shape in spec.entries}
    return spec.pack(full)


class TrainableScorer:
    """The trained streaming encoder behind the generic scorer interface."""

    def __init__(
        self,
        theta: np.ndarray,
        encoder_config: EncoderConfig,
        stream_config: StreamConfig,
        dims: Mapping[str, int],
        label_space: tuple[str, ...],
    ):
        self.encoder_config = encoder_config
        self.stream_config = stream_config
        self.dims = dict(dims)
        self.label_space = tuple(label_space)
        self.spec = network_spec(encoder_config, self.dims, len(self.label_space))
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.spec.size,):
            raise ValueError(
                f"parameter vector has {theta.shape}, expected ({self.spec.size},)"
            )
        self.theta = theta
        self.theta.flags.writeable = False

    @property
    def n_classes(self) -> int:
        return len(self.label_space)

    def _check_window(self, window: StreamWindow) -> None:
        p = self.stream_config.window_len + 1
        if window.n_positions != p:
            raise ValueError(
                f"window has {window.n_positions} positions, scorer expects {p}"
            )
        for name in MODALITIES:
            feats, _ = window.modality(name)
            if feats.shape[1] != self.dims[name]:
                raise ValueError(
                    f"window {name} dim {feats.shape[1]} != trained dim "
                    f"{self.dims[name]}"
                )

    def score(self, window: StreamWindow) -> ScorerOutput:
        self._check_window(window)
        xs, masks = featurize_window(window, self.stream_config)
        batch_xs = {m: xs[m][None, :, :] for m in MODALITIES}
        batch_masks = {m: masks[m][None, :] for m in MODALITIES}
        params = self.spec.unpack(self.theta)
        logits, _, _ = network_forward(params, self.encoder_config, batch_xs, batch_masks)
        z = logits[0]
        z = z - z.max()
        probs = np.exp(z)
        probs /= probs.sum()
        label = int(np.argmax(probs))
        return ScorerOutput(label=label, confidence=float(probs[label]), class_probs=probs)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)


@dataclass(frozen=True)
class TrainingExamples:
    """Featurized supervised windows (only labeled decision timestamps)."""

    xs: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    labels: np.ndarray
    iou: np.ndarray
    video_ids: tuple[str, ...]
    timestamps: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def collect_training_windows(
    dataset: StreamDataset, stream_config: StreamConfig
) -> TrainingExamples:
    """Featurize every labeled decision timestamp with its IoU weight.

    Unlabeled timestamps are skipped entirely — they carry no target and
    no segment to overlap with.
    """
    xs_rows: dict[str, list[np.ndarray]] = {m: [] for m in MODALITIES}
    mask_rows: dict[str, list[np.ndarray]] = {m: [] for m in MODALITIES}
    labels: list[int] = []
    weights: list[float] = []
    vids: list[str] = []
    stamps: list[int] = []
    for video in dataset.videos:
        per_ts = video.labels
        for i in decision_timestamps(video, stream_config):
            if per_ts[i] == UNLABELED:
                continue
            seg = video.segment_containing(i)
            window = extract_window(video, i, stream_config)
            xs, masks = featurize_window(window, stream_config)
            for m in MODALITIES:
                xs_rows[m].append(xs[m])
                mask_rows[m].append(masks[m])
            labels.append(int(per_ts[i]))
            weights.append(temporal_iou(window.extent, seg.interval))
            vids.append(video.video_id)
            stamps.append(i)
    if not labels:
        raise TrainingError("dataset has no labeled decision timestamps")
    return TrainingExamples(
        xs={m: np.stack(xs_rows[m]) for m in MODALITIES},
        masks={m: np.stack(mask_rows[m]) for m in MODALITIES},
        labels=np.asarray(labels, dtype=np.int64),
        iou=np.asarray(weights, dtype=np.float64),
        video_ids=tuple(vids),
        timestamps=np.asarray(stamps, dtype=np.int64),
    )


@dataclass
class TrainingLog:
    """Per-epoch curve plus final training-set accuracy."""

    epoch_loss: list[float] = field(default_factory=list)
    epoch_ce: list[float] = field(default_factory=list)
    epoch_contrastive: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    n_examples: int = 0


def batch_loss_and_grad(
    theta: np.ndarray,
    spec: ParamSpec,
    encoder_config: EncoderConfig,
    loss_config: LossConfig,
    xs: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    labels: np.ndarray,
    iou: np.ndarray,
) -> tuple[float, np.ndarray, float, float]:
    """Combined objective and flat gradient for one mini-batch.

    Returns (loss, grad, contrastive_part, ce_part). Rows where any
    modality pooled to a zero vector (e.g. fully absent in the window)
    are left out of the contrastive term; cosine similarity is undefined
    there and those rows still learn through the supervised term.
    """
    params = spec.unpack(theta)
    logits, pooled, cache = network_forward(params, encoder_config, xs, masks)
    ce, d_logits = iou_weighted_ce_from_logits(logits, labels, iou, loss_config.beta)
    cm = 0.0
    d_pooled = None
    if loss_config.alpha > 0:
        norms = {m: np.linalg.norm(pooled[m], axis=1) for m in MODALITIES}
        usable = (norms["text"] > 0) & (norms["visual"] > 0) & (norms["audio"] > 0)
        idx = np.flatnonzero(usable)
        if idx.size >= 1:
            cm, dt, dv, da = cross_modal_loss_grad(
                pooled["text"][idx],
                pooled["visual"][idx],
                pooled["audio"][idx],
                loss_config.alpha,
                loss_config.tau,
            )
            d_pooled = {m: np.zeros_like(pooled[m]) for m in MODALITIES}
            d_pooled["text"][idx] = dt
            d_pooled["visual"][idx] = dv
            d_pooled["audio"][idx] = da
    grad = network_backward(params, spec, encoder_config, cache, d_logits, d_pooled)
    return cm + ce, grad, cm, ce


def train(
    dataset: StreamDataset,
    encoder_config: EncoderConfig | None = None,
    loss_config: LossConfig | None = None,
    stream_config: StreamConfig | None = None,
) -> tuple[TrainableScorer, TrainingLog]:
    """Mini-batch training of the window scorer on labeled timestamps.

    Deterministic given encoder_config.seed: same seed, same data — same
    final parameters bit for bit.
    """
    encoder_config = encoder_config or EncoderConfig()
    loss_config = loss_config or LossConfig()
    stream_config = stream_config or StreamConfig()

    examples = collect_training_windows(dataset, stream_config)
    classes = np.unique(examples.labels)
    if classes.size < 2:
        raise TrainingError(
            f"training data covers only class {classes.tolist()}; need >= 2"
        )

    spec = network_spec(encoder_config, dataset.dims, dataset.n_classes)
    rng = np.random.default_rng(encoder_config.seed)
    theta = glorot_init(spec, rng)
    optimizer = Adam(lr=encoder_config.learning_rate)
    log = TrainingLog(n_examples=examples.size)

    for epoch in range(encoder_config.epochs):
        order = rng.permutation(examples.size)
        epoch_loss = epoch_cm = epoch_ce = 0.0
        n_batches = 0
        for start in range(0, examples.size, encoder_config.batch_size):
            batch = order[start : start + encoder_config.batch_size]
            loss, grad, cm, ce = batch_loss_and_grad(
                theta,
                spec,
                encoder_config,
                loss_config,
                {m: examples.xs[m][batch] for m in MODALITIES},
                {m: examples.masks[m][batch] for m in MODALITIES},
                examples.labels[batch],
                examples.iou[batch],
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {n_batches}: {loss}"
                )
            theta = optimizer.step(theta, grad)
            log.step_loss.append(loss)
            epoch_loss += loss
            epoch_cm += cm
            epoch_ce += ce
            n_batches += 1
        log.epoch_loss.append(epoch_loss / n_batches)
        log.epoch_contrastive.append(epoch_cm / n_batches)
        log.epoch_ce.append(epoch_ce / n_batches)

    scorer = TrainableScorer(
        theta, encoder_config, stream_config, dataset.dims, dataset.label_space
    )
    params = spec.unpack(scorer.theta)
    logits, _, _ = network_forward(params, encoder_config, examples.xs, examples.masks)
    log.train_accuracy = float((logits.argmax(axis=1) == examples.labels).mean())
    return scorer, log


def predict_labels(
    scorer: WindowScorer, dataset: StreamDataset, stream_config: StreamConfig
) -> tuple[np.ndarray, np.ndarray]:
    """(y_true, y_pred) over every labeled decision timestamp of a dataset."""
    y_true: list[int] = []
    y_pred: list[int] = []
    for video in dataset.videos:
        per_ts = video.labels
        for i in decision_timestamps(video, stream_config):
            if per_ts[i] == UNLABELED:
                continue
            out = scorer.score(extract_window(video, i, stream_config))
            y_true.append(int(per_ts[i]))
            y_pred.append(out.label)
    return np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)


# ---------------------------------------------------------------------------
# Trace replay
# ---------------------------------------------------------------------------


class TraceScorer:
    """Replays (label, confidence, probs) recorded per (video, timestamp)."""

    def __init__(self, outputs: dict[tuple[str, int], ScorerOutput], n_classes: int):
        self.outputs = outputs
        self.n_classes = n_classes

    def score_at(self, video_id: str, t: int) -> ScorerOutput:
        try:
            return self.outputs[(video_id, t)]
        except KeyError:
            raise ValueError(
                f"trace has no entry for video {video_id!r} at timestamp {t}"
            ) from None

    def score(self, window: StreamWindow) -> ScorerOutput:
        return self.score_at(window.video_id, window.timestamp)


def export_trace(
    scorer: WindowScorer,
    dataset: StreamDataset,
    path: str | Path,
    stream_config: StreamConfig | None = None,
) -> Path:
    """Record the scorer at every timestamp of every video, one CSV per video."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if stream_config is None:
        stream_config = getattr(scorer, "stream_config", None) or StreamConfig()
    n_classes = dataset.n_classes
    prob_header = ",".join(f"p_{c}" for c in range(n_classes))
    for video in dataset.videos:
        with open(root / f"{video.video_id}.csv", "w") as fh:
            fh.write(f"timestamp,label,confidence,{prob_header}\n")
            for t in range(video.duration):
                if hasattr(scorer, "score_at"):
                    out = scorer.score_at(video.video_id, t)
                else:
                    out = scorer.score(extract_window(video, t, stream_config))
                probs = ",".join(repr(float(p)) for p in out.class_probs)
                fh.write(f"{t},{out.label},{repr(out.confidence)},{probs}\n")
    return root


def _parse_trace_file(path: Path, video_id: str) -> dict[tuple[str, int], ScorerOutput]:
    outputs: dict[tuple[str, int], ScorerOutput] = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["timestamp", "label", "confidence"]:
            raise ValueError(
                f"{path}:1: header must start with timestamp,label,confidence"
            )
        n_probs = len(header) - 3
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}"
                )
            try:
                t = int(cells[0])
                label = int(cells[1])
                confidence = float(cells[2])
                probs = np.array([float(c) for c in cells[3:]], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not 0.5 <= confidence <= 1.0:
                raise ValueError(
                    f"{path}:{lineno}: confidence {confidence} outside [0.5, 1.0]"
                )
            if n_probs and not 0 <= label < n_probs:
                raise ValueError(
                    f"{path}:{lineno}: label {label} outside the {n_probs} "
                    f"probability columns"
                )
            if not n_probs:
                probs = _distribute_probs(label, confidence, max(label + 1, 2))
            outputs[(video_id, t)] = ScorerOutput(
                label=label, confidence=confidence, class_probs=probs
            )
    return outputs


def load_trace(path: str | Path) -> TraceScorer:
    """Load a trace directory (one CSV per video) or a single-video CSV."""
    path = Path(path)
    outputs: dict[tuple[str, int], ScorerOutput] = {}
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise ValueError(f"{path}: no trace CSVs found")
    for fpath in files:
        outputs.update(_parse_trace_file(fpath, fpath.stem))
    n_classes = max(len(out.class_probs) for out in outputs.values())
    return TraceScorer(outputs, n_classes)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(scorer: TrainableScorer, path: str | Path) -> None:
    """Single binary blob: magic, u16 version, length-prefixed JSON, f32 params."""
    config_echo = json.dumps(
        {
            "encoder": {
                "enc_layers": scorer.encoder_config.enc_layers,
                "fusion_layers": scorer.encoder_config.fusion_layers,
                "head_layers": scorer.encoder_config.head_layers,
                "hidden_dim": scorer.encoder_config.hidden_dim,
                "learning_rate": scorer.encoder_config.learning_rate,
                "epochs": scorer.encoder_config.epochs,
                "batch_size": scorer.encoder_config.batch_size,
                "seed": scorer.encoder_config.seed,
            },
            "stream": {
                "window_len": scorer.stream_config.window_len,
                "interval": scorer.stream_config.interval,
                "text_agg": scorer.stream_config.text_agg,
                "audio_agg": scorer.stream_config.audio_agg,
            },
            "dims": scorer.dims,
            "label_space": list(scorer.label_space),
            "n_params": int(scorer.theta.size),
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_echo)))
        fh.write(config_echo)
        fh.write(scorer.theta.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> TrainableScorer:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (json_len,) = struct.unpack_from("<I", raw, 6)
    meta = json.loads(raw[10 : 10 + json_len].decode("utf-8"))
    theta = np.frombuffer(raw, dtype="<f4", offset=10 + json_len).astype(np.float64)
    if theta.size != meta["n_params"]:
        raise ValueError(
            f"{path}: parameter array has {theta.size} entries, header says "
            f"{meta['n_params']}"
        )
    return TrainableScorer(
        theta=theta,
        encoder_config=EncoderConfig(**meta["encoder"]),
        stream_config=StreamConfig(**meta["stream"]),
        dims=meta["dims"],
        label_space=tuple(meta["label_space"]),
    )
