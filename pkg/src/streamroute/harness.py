"""End-to-end simulation: run streams, resolve deferrals, score the system.

The pipeline is run_stream -> resolve_deferrals -> compute_metrics.
Decision logs serialize to JSONL (one record per decided timestamp);
deferred timestamps inherit the label of the NEXT emitted prediction in
their stream and pay the waiting time in the latency accounting. Trailing
defers that never resolve are excluded from accuracy and counted
separately.

Reported rates: vlm_suc counts expert-emitted timestamps, vlm_defer counts
deferred ones, and vlm_invoc is their sum by definition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import ConfidenceModel, WindowScorer, oracle_for_dataset
from .expert import ExpertRequest, LocalOracleExpert
from .metrics import (
    accuracy_from_confusion,
    confusion_matrix,
    macro_f1_from_confusion,
    per_class_prf,
)
from .router import Decision, Router, RouterConfig
from .stream import (
    UNLABELED,
    StreamConfig,
    StreamDataset,
    decision_timestamps,
    extract_window,
)
from .synthetic import SyntheticConfig, generate_dataset


@dataclass(frozen=True)
class LatencyModel:
    """Per-action costs in seconds; defer_delay matches the decision interval."""

    encoder_cost_s: float = 0.1
    expert_cost_s: float = 0.8
    defer_delay_s: float = 1.0

    def __post_init__(self) -> None:
        for name in ("encoder_cost_s", "expert_cost_s", "defer_delay_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class DecisionRecord:
    """One decided timestamp, flattened for the JSONL log."""

    stream_id: str
    t: int
    decision: str  # "emit" | "defer"
    source: str | None
    label: int | None
    enc_p: float
    expert_p: float | None
    escalated: bool
    theta_enc: float | None
    theta_vlm: float | None
    expert_failed: bool

    @staticmethod
    def from_decision(stream_id: str, t: int, d: Decision) -> "DecisionRecord":
        return DecisionRecord(
            stream_id=stream_id,
            t=t,
            decision=d.action,
            source=d.source,
            label=d.label,
            enc_p=d.enc_p,
            expert_p=d.expert_p,
            escalated=d.escalated,
            theta_enc=d.theta_enc,
            theta_vlm=d.theta_vlm,
            expert_failed=d.expert_failed,
        )

    def to_json(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "t": self.t,
            "decision": self.decision,
            "source": self.source,
            "label": self.label,
            "enc_p": self.enc_p,
            "expert_p": self.expert_p,
            "escalated": self.escalated,
            "theta_enc": self.theta_enc,
            "theta_vlm": self.theta_vlm,
            "expert_failed": self.expert_failed,
        }

    @staticmethod
    def from_json(obj: dict) -> "DecisionRecord":
        return DecisionRecord(
            stream_id=str(obj.get("stream_id", "stream")),
            t=int(obj["t"]),
            decision=obj["decision"],
            source=obj.get("source"),
            label=obj.get("label"),
            enc_p=float(obj["enc_p"]),
            expert_p=obj.get("expert_p"),
            escalated=bool(obj.get("escalated", False)),
            theta_enc=obj.get("theta_enc"),
            theta_vlm=obj.get("theta_vlm"),
            expert_failed=bool(obj.get("expert_failed", False)),
        )


@dataclass
class DecisionLog:
    records: list[DecisionRecord] = field(default_factory=list)

    def per_stream(self) -> dict[str, list[DecisionRecord]]:
        out: dict[str, list[DecisionRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.stream_id, []).append(rec)
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json()) + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> "DecisionLog":
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(DecisionRecord.from_json(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
        return DecisionLog(records)


def run_stream(
    dataset: StreamDataset,
    scorer: WindowScorer,
    expert,
    router_config: RouterConfig,
    latency_model: LatencyModel | None = None,  # carried through for callers
    stream_config: StreamConfig | None = None,
    router: Router | None = None,
) -> DecisionLog:
    """Simulate every video: one decision per labeled timestamp.

    `expert` is anything with predict(ExpertRequest) -> output carrying
    label/confidence, or None to disable escalation. Each video runs with
    fresh routing state; unlabeled timestamps are skipped without touching
    that state.
    """
    del latency_model  # latency is pure accounting, applied in compute_metrics
    stream_config = stream_config or StreamConfig()
    router = router or Router(router_config)
    log = DecisionLog()
    for video in dataset.videos:
        labels = video.labels
        state = router.initial_state()
        for i in decision_timestamps(video, stream_config):
            if labels[i] == UNLABELED:
                continue
            window = extract_window(video, i, stream_config)
            enc_out = scorer.score(window)
            expert_fn: Callable | None = None
            if expert is not None:
                request = ExpertRequest(
                    stream_id=video.video_id,
                    timestamp=i,
                    text=(),
                    labels=dataset.label_space,
                )
                expert_fn = lambda req=request: expert.predict(req)
            decision, state = router.step(state, enc_out, expert_fn, i)
            log.records.append(DecisionRecord.from_decision(video.video_id, i, decision))
    return log


@dataclass(frozen=True)
class ResolvedRecord:
    """A decision with its final label and user-visible latency."""

    record: DecisionRecord
    final_label: int | None
    resolved: bool
    wait_steps: int  # timestamps until the resolving emit (0 for emits)
    latency_s: float


@dataclass
class ResolvedLog:
    records: list[ResolvedRecord]
    latency_model: LatencyModel


def _step_cost(record: DecisionRecord, lat: LatencyModel) -> float:
    return lat.encoder_cost_s + (lat.expert_cost_s if record.escalated else 0.0)


def resolve_deferrals(
    log: DecisionLog, latency_model: LatencyModel | None = None
) -> ResolvedLog:
    """Assign each Defer the label of the next Emit in its stream.

    A resolved defer's latency is the waiting time plus the compute cost
    of the step that finally answered; trailing defers with no later emit
    stay unresolved (final_label None).
    """
    lat = latency_model or LatencyModel()
    out: list[ResolvedRecord] = []
    for _, records in log.per_stream().items():
        emit_idx = [k for k, r in enumerate(records) if r.decision == "emit"]
        next_emit: list[int | None] = [None] * len(records)
        ptr = 0
        for k in range(len(records)):
            while ptr < len(emit_idx) and emit_idx[ptr] < k:
                ptr += 1
            next_emit[k] = emit_idx[ptr] if ptr < len(emit_idx) else None
        for k, rec in enumerate(records):
            if rec.decision == "emit":
                out.append(
                    ResolvedRecord(
                        record=rec,
                        final_label=rec.label,
                        resolved=True,
                        wait_steps=0,
                        latency_s=_step_cost(rec, lat),
                    )
                )
                continue
            j = next_emit[k]
            if j is None:
                out.append(
                    ResolvedRecord(
                        record=rec,
                        final_label=None,
                        resolved=False,
                        wait_steps=0,
                        latency_s=_step_cost(rec, lat),
                    )
                )
                continue
            resolver = records[j]
            wait = resolver.t - rec.t
            out.append(
                ResolvedRecord(
                    record=rec,
                    final_label=resolver.label,
                    resolved=True,
                    wait_steps=wait,
                    latency_s=wait * lat.defer_delay_s + _step_cost(resolver, lat),
                )
            )
    return ResolvedLog(records=out, latency_model=lat)


@dataclass(frozen=True)
class Counts:
    n_timestamps: int
    n_emit_encoder: int
    n_emit_expert: int
    n_defer: int
    n_unresolved: int
    n_expert_failed: int
    n_scored: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    vlm_suc_rate: float
    vlm_defer_rate: float
    vlm_invoc_rate: float
    avg_latency_s: float
    per_class_precision: tuple[float, ...]
    per_class_recall: tuple[float, ...]
    per_class_f1: tuple[float, ...]
    counts: Counts

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "vlm_suc_rate": self.vlm_suc_rate,
            "vlm_defer_rate": self.vlm_defer_rate,
            "vlm_invoc_rate": self.vlm_invoc_rate,
            "avg_latency_s": self.avg_latency_s,
            "per_class_precision": list(self.per_class_precision),
            "per_class_recall": list(self.per_class_recall),
            "per_class_f1": list(self.per_class_f1),
            "counts": self.counts.__dict__,
        }


def compute_metrics(
    resolved: ResolvedLog,
    truth: StreamDataset | Mapping[str, np.ndarray],
    n_classes: int | None = None,
) -> MetricsReport:
    """Score a resolved log against per-timestamp ground truth.

    Accuracy / macro-F1 run over labeled, resolved timestamps. The rate
    denominators use ALL decided timestamps. Average latency charges the
    encoder on every step, the expert on escalated steps, and the waiting
    time of every resolved defer.
    """
    if not resolved.records:
        raise ValueError("empty decision log")
    if isinstance(truth, StreamDataset):
        n_classes = truth.n_classes
        truth = {v.video_id: v.labels for v in truth.videos}
    elif n_classes is None:
        raise ValueError("n_classes is required when truth is a plain mapping")

    lat = resolved.latency_model
    y_true: list[int] = []
    y_pred: list[int] = []
    n_emit_enc = n_emit_exp = n_defer = n_unresolved = n_failed = 0
    latency_total = 0.0
    for rr in resolved.records:
        rec = rr.record
        if rec.decision == "emit":
            if rec.source == "expert":
                n_emit_exp += 1
            else:
                n_emit_enc += 1
        else:
            n_defer += 1
            if not rr.resolved:
                n_unresolved += 1
        if rec.expert_failed:
            n_failed += 1
        latency_total += _step_cost(rec, lat) + rr.wait_steps * lat.defer_delay_s
        if rr.final_label is None:
            continue
        stream_truth = truth[rec.stream_id]
        if rec.t >= len(stream_truth):
            raise ValueError(
                f"record at t={rec.t} beyond ground truth for {rec.stream_id!r}"
            )
        true_label = int(stream_truth[rec.t])
        if true_label == UNLABELED:
            continue
        y_true.append(true_label)
        y_pred.append(rr.final_label)

    n = len(resolved.records)
    if not y_true:
        raise ValueError("no scorable timestamps (nothing resolved on labeled truth)")
    cm = confusion_matrix(y_true, y_pred, n_classes)
    precision, recall, f1 = per_class_prf(cm)
    vlm_suc = n_emit_exp / n
    vlm_defer = n_defer / n
    return MetricsReport(
        accuracy=accuracy_from_confusion(cm),
        macro_f1=macro_f1_from_confusion(cm),
        vlm_suc_rate=vlm_suc,
        vlm_defer_rate=vlm_defer,
        vlm_invoc_rate=vlm_suc + vlm_defer,
        avg_latency_s=latency_total / n,
        per_class_precision=tuple(precision.tolist()),
        per_class_recall=tuple(recall.tolist()),
        per_class_f1=tuple(f1.tolist()),
        counts=Counts(
            n_timestamps=n,
            n_emit_encoder=n_emit_enc,
            n_emit_expert=n_emit_exp,
            n_defer=n_defer,
            n_unresolved=n_unresolved,
            n_expert_failed=n_failed,
            n_scored=len(y_true),
        ),
    )


def evaluate(
    dataset: StreamDataset,
    scorer: WindowScorer,
    expert,
    router_config: RouterConfig,
    latency_model: LatencyModel | None = None,
    stream_config: StreamConfig | None = None,
    router: Router | None = None,
) -> tuple[MetricsReport, DecisionLog]:
    """run_stream + resolve_deferrals + compute_metrics in one call."""
    log = run_stream(
        dataset, scorer, expert, router_config,
        stream_config=stream_config, router=router,
    )
    resolved = resolve_deferrals(log, latency_model)
    return compute_metrics(resolved, dataset), log


# ---------------------------------------------------------------------------
# Named configurations (the three ablation presets plus two degenerate ones)
# ---------------------------------------------------------------------------


def preset_allow_both(max_enc: int = 18, max_defer: int = 6) -> RouterConfig:
    """Escalation and deferral both enabled (the full system)."""
    return RouterConfig(max_enc=max_enc, max_defer=max_defer, deferral_source="expert")


def preset_no_defer(max_enc: int = 18) -> RouterConfig:
    """Escalation only; max_defer=0 disables deferral exactly."""
    return RouterConfig(max_enc=max_enc, max_defer=0, deferral_source="expert")


def preset_no_vlm(max_defer: int = 6) -> RouterConfig:
    """Expert disabled; the encoder's own confidence drives deferral."""
    return RouterConfig(max_enc=0, max_defer=max_defer, deferral_source="encoder")


def preset_encoder_only() -> RouterConfig:
    """Every step emits the encoder label (run with expert=None)."""
    return RouterConfig(max_enc=0, max_defer=0, deferral_source="none")


def preset_expert_always() -> RouterConfig:
    """max_enc=0 forces an expert call at every step; no deferral."""
    return RouterConfig(max_enc=0, max_defer=0, deferral_source="expert")


PRESETS: dict[str, RouterConfig] = {
    "allow_both": preset_allow_both(),
    "no_defer": preset_no_defer(),
    "no_vlm": preset_no_vlm(),
    "encoder_only": preset_encoder_only(),
    "expert_always": preset_expert_always(),
}


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    name: str
    max_enc: int
    max_defer: int
    deferral_source: str
    report: MetricsReport


@dataclass
class SweepResult:
    rows: list[SweepRow]

    CSV_FIELDS = (
        "name,max_enc,max_defer,deferral_source,accuracy,macro_f1,"
        "vlm_suc_rate,vlm_defer_rate,vlm_invoc_rate,avg_latency_s,"
        "n_timestamps,n_defer,n_unresolved"
    )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(self.CSV_FIELDS + "\n")
            for row in self.rows:
                r = row.report
                fh.write(
                    f"{row.name},{row.max_enc},{row.max_defer},"
                    f"{row.deferral_source},{r.accuracy:.6f},{r.macro_f1:.6f},"
                    f"{r.vlm_suc_rate:.6f},{r.vlm_defer_rate:.6f},"
                    f"{r.vlm_invoc_rate:.6f},{r.avg_latency_s:.6f},"
                    f"{r.counts.n_timestamps},{r.counts.n_defer},"
                    f"{r.counts.n_unresolved}\n"
                )


def sweep(
    dataset: StreamDataset,
    scorer: WindowScorer,
    expert,
    max_enc_values: Sequence[int],
    max_defer_values: Sequence[int],
    latency_model: LatencyModel | None = None,
    stream_config: StreamConfig | None = None,
    include_presets: bool = True,
) -> SweepResult:
    """Evaluate every (max_enc, max_defer) cell plus the named presets.

    The no_vlm preset runs with the expert disconnected regardless of the
    `expert` argument.
    """
    if not max_enc_values or not max_defer_values:
        raise ValueError("sweep grid must be non-empty")
    rows: list[SweepRow] = []
    for me, md in product(max_enc_values, max_defer_values):
        config = RouterConfig(max_enc=me, max_defer=md, deferral_source="expert")
        report, _ = evaluate(
            dataset, scorer, expert, config, latency_model, stream_config
        )
        rows.append(SweepRow(f"grid_{me}x{md}", me, md, "expert", report))
    if include_presets:
        for name in ("no_vlm", "no_defer", "allow_both"):
            config = PRESETS[name]
            cell_expert = None if name == "no_vlm" else expert
            report, _ = evaluate(
                dataset, scorer, cell_expert, config, latency_model, stream_config
            )
            rows.append(
                SweepRow(name, config.max_enc, config.max_defer,
                         config.deferral_source, report)
            )
    return SweepResult(rows)


# ---------------------------------------------------------------------------
# Bundled synthetic benchmark (cheap scorer vs expert vs hybrid)
# ---------------------------------------------------------------------------


def hybrid_dominance_benchmark(
    seed: int = 7,
    n_videos: int = 50,
    duration: int = 300,
    scorer_flip: float = 0.30,
    expert_flip: float = 0.05,
) -> dict[str, MetricsReport]:
    """Encoder-only vs expert-always vs allow-both on one synthetic corpus.

    The cheap scorer errs at `scorer_flip`, the expert at `expert_flip`;
    both report banded confidences so low confidence actually correlates
    with being wrong, which is what gives the thresholds their grip.
    """
    dataset = generate_dataset(
        SyntheticConfig(
            n_videos=n_videos,
            duration=duration,
            seed=seed,
            name="hybrid-benchmark",
        )
    )
    labels = {v.video_id: v.labels for v in dataset.videos}
    scorer = oracle_for_dataset(
        dataset,
        flip_prob=scorer_flip,
        confidence_model=ConfidenceModel.banded(0.80, 0.99, 0.50, 0.75),
        seed=seed + 1,
    )
    expert = LocalOracleExpert(
        labels,
        flip_prob=expert_flip,
        confidence_model=ConfidenceModel.banded(0.93, 1.0, 0.50, 0.85),
        fixed_latency_ms=800.0,
        seed=seed + 2,
        n_classes=dataset.n_classes,
    )
    reports = {}
    reports["encoder_only"], _ = evaluate(
        dataset, scorer, None, preset_encoder_only()
    )
    reports["expert_always"], _ = evaluate(
        dataset, scorer, expert, preset_expert_always()
    )
    reports["allow_both"], _ = evaluate(dataset, scorer, expert, preset_allow_both())
    return reports
