import numpy as np
import pytest

from streamroute.encoder import ConfidenceModel, oracle_for_dataset
from streamroute.expert import LocalOracleExpert
from streamroute.harness import (
    DecisionLog,
    DecisionRecord,
    LatencyModel,
    compute_metrics,
    evaluate,
    preset_allow_both,
    preset_encoder_only,
    preset_expert_always,
    preset_no_defer,
    preset_no_vlm,
    resolve_deferrals,
    run_stream,
    sweep,
)
from streamroute.router import RouterConfig
from streamroute.stream import UNLABELED
from streamroute.synthetic import SyntheticConfig, generate_dataset

from _helpers import reference_metrics


def small_dataset(seed=3, n_videos=3, duration=80, **kw):
    return generate_dataset(
        SyntheticConfig(n_videos=n_videos, duration=duration, seed=seed, **kw)
    )


def dataset_oracles(dataset, scorer_flip=0.3, expert_flip=0.05, seed=1):
    scorer = oracle_for_dataset(
        dataset, scorer_flip, ConfidenceModel.banded(0.8, 0.99, 0.5, 0.75), seed=seed
    )
    labels = {v.video_id: v.labels for v in dataset.videos}
    expert = LocalOracleExpert(
        labels, expert_flip, ConfidenceModel.banded(0.93, 1.0, 0.5, 0.85),
        seed=seed + 1, n_classes=dataset.n_classes,
    )
    return scorer, expert


def record(stream_id="s", t=0, decision="emit", source="encoder", label=0,
           enc_p=0.9, expert_p=None, escalated=False, expert_failed=False):
    return DecisionRecord(
        stream_id=stream_id, t=t, decision=decision, source=source, label=label,
        enc_p=enc_p, expert_p=expert_p, escalated=escalated, theta_enc=None,
        theta_vlm=None, expert_failed=expert_failed,
    )


class TestRunStream:
    def test_perfect_confident_scorer_emits_encoder_after_first(self):
        ds = small_dataset()
        scorer = oracle_for_dataset(ds, 0.0, ConfidenceModel.constant(1.0), seed=0)
        _, expert = dataset_oracles(ds)
        log = run_stream(ds, scorer, expert, RouterConfig(max_enc=10_000, max_defer=0))
        for stream_records in log.per_stream().values():
            assert stream_records[0].escalated  # cold start escalates once
            for rec in stream_records[1:]:
                assert rec.decision == "emit" and rec.source == "encoder"

    def test_max_enc_zero_invokes_expert_everywhere(self):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        log = run_stream(ds, scorer, expert, preset_expert_always())
        assert all(r.escalated for r in log.records)

    def test_unlabeled_timestamps_skipped(self):
        ds = small_dataset(unlabeled_gap_prob=0.5)
        n_labeled = sum(int((v.labels != UNLABELED).sum()) for v in ds.videos)
        assert n_labeled < sum(v.duration for v in ds.videos)
        scorer, expert = dataset_oracles(ds)
        log = run_stream(ds, scorer, expert, preset_allow_both())
        assert len(log.records) == n_labeled
        for rec in log.records:
            assert ds.video(rec.stream_id).labels[rec.t] != UNLABELED

    def test_fixed_seed_byte_identical_jsonl(self, tmp_path):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        paths = []
        for k in (0, 1):
            log = run_stream(ds, scorer, expert, preset_allow_both())
            path = tmp_path / f"log{k}.jsonl"
            log.write_jsonl(path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_jsonl_round_trip(self, tmp_path):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        log = run_stream(ds, scorer, expert, preset_allow_both())
        path = tmp_path / "log.jsonl"
        log.write_jsonl(path)
        back = DecisionLog.read_jsonl(path)
        assert back.records == log.records


class TestResolveDeferrals:
    def test_defer_takes_next_emit_label_and_waiting_time(self):
        records = [
            record(t=4, decision="emit", label=0),
            record(t=5, decision="defer", source=None, label=None, escalated=True),
            record(t=6, decision="defer", source=None, label=None, escalated=True),
            record(t=7, decision="emit", source="expert", label=1, escalated=True),
        ]
        resolved = resolve_deferrals(DecisionLog(records), LatencyModel())
        by_t = {rr.record.t: rr for rr in resolved.records}
        assert by_t[5].final_label == 1 and by_t[5].wait_steps == 2
        # 2 x defer_delay + cost of the resolving step (encoder + expert)
        assert by_t[5].latency_s == pytest.approx(2 * 1.0 + 0.1 + 0.8)
        assert by_t[6].latency_s == pytest.approx(1 * 1.0 + 0.1 + 0.8)
        assert by_t[4].latency_s == pytest.approx(0.1)

    def test_no_defers_identity(self):
        records = [record(t=t, label=t % 2) for t in range(5)]
        resolved = resolve_deferrals(DecisionLog(records))
        assert all(rr.resolved and rr.wait_steps == 0 for rr in resolved.records)
        assert [rr.final_label for rr in resolved.records] == [0, 1, 0, 1, 0]

    def test_trailing_defers_unresolved(self):
        records = [
            record(t=0, decision="emit", label=1),
            record(t=1, decision="defer", source=None, label=None, escalated=True),
            record(t=2, decision="defer", source=None, label=None, escalated=True),
        ]
        resolved = resolve_deferrals(DecisionLog(records))
        tail = [rr for rr in resolved.records if rr.record.t > 0]
        assert all(not rr.resolved and rr.final_label is None for rr in tail)

    def test_streams_resolved_independently(self):
        records = [
            record(stream_id="a", t=0, decision="defer", source=None, label=None),
            record(stream_id="b", t=1, decision="emit", label=1),
            record(stream_id="a", t=2, decision="emit", label=0),
        ]
        resolved = resolve_deferrals(DecisionLog(records))
        deferred = next(rr for rr in resolved.records if rr.record.decision == "defer")
        assert deferred.final_label == 0  # from stream a, not stream b


class TestComputeMetrics:
    def _truth(self, labels):
        return {"s": np.asarray(labels)}

    def test_all_correct(self):
        records = [record(t=t, label=1) for t in range(4)]
        resolved = resolve_deferrals(DecisionLog(records))
        report = compute_metrics(resolved, self._truth([1, 1, 1, 1]), n_classes=2)
        assert report.accuracy == 1.0 and report.macro_f1 == 1.0

    def test_worked_confusion_example(self):
        preds = [1, 1, 0, 0]
        truth = [1, 0, 0, 0]
        records = [record(t=t, label=p) for t, p in enumerate(preds)]
        resolved = resolve_deferrals(DecisionLog(records))
        report = compute_metrics(resolved, self._truth(truth), n_classes=2)
        assert report.accuracy == pytest.approx(0.75)
        assert report.per_class_f1[1] == pytest.approx(2 / 3)
        assert report.per_class_f1[0] == pytest.approx(0.8)
        assert round(report.macro_f1, 4) == 0.7333

    def test_rate_counting_example(self):
        records = [record(t=t, label=0) for t in range(7)]
        records += [
            record(t=7, decision="emit", source="expert", label=0, escalated=True),
            record(t=8, decision="emit", source="expert", label=0, escalated=True),
            record(t=9, decision="defer", source=None, label=None, escalated=True),
        ]
        resolved = resolve_deferrals(DecisionLog(records))
        report = compute_metrics(resolved, self._truth([0] * 10), n_classes=2)
        assert report.vlm_suc_rate == pytest.approx(0.2)
        assert report.vlm_defer_rate == pytest.approx(0.1)
        assert report.vlm_invoc_rate == pytest.approx(0.3)

    def test_rate_identity_on_random_logs(self):
        rng = np.random.default_rng(8)
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        for _ in range(10):
            config = RouterConfig(
                max_enc=int(rng.integers(0, 25)), max_defer=int(rng.integers(0, 8))
            )
            report, _ = evaluate(ds, scorer, expert, config)
            assert report.vlm_invoc_rate == report.vlm_suc_rate + report.vlm_defer_rate

    def test_latency_floor_and_exact_encoder_only(self):
        ds = small_dataset()
        scorer, _ = dataset_oracles(ds)
        report, _ = evaluate(ds, scorer, None, preset_encoder_only())
        assert report.avg_latency_s == pytest.approx(0.1)
        _, expert = dataset_oracles(ds)
        report2, _ = evaluate(ds, scorer, expert, preset_allow_both())
        assert report2.avg_latency_s >= 0.1

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            c = int(rng.integers(2, 5))
            truth = rng.integers(c, size=n)
            preds = rng.integers(c, size=n)
            records = [record(t=t, label=int(preds[t])) for t in range(n)]
            resolved = resolve_deferrals(DecisionLog(records))
            report = compute_metrics(resolved, self._truth(truth), n_classes=c)
            acc, mf1 = reference_metrics(truth.tolist(), preds.tolist(), c)
            assert report.accuracy == acc
            assert report.macro_f1 == pytest.approx(mf1, abs=1e-12)

    def test_unresolved_excluded_from_accuracy(self):
        records = [
            record(t=0, label=1),
            record(t=1, decision="defer", source=None, label=None),
        ]
        resolved = resolve_deferrals(DecisionLog(records))
        report = compute_metrics(resolved, self._truth([1, 0]), n_classes=2)
        assert report.accuracy == 1.0
        assert report.counts.n_unresolved == 1
        assert report.counts.n_scored == 1

    def test_empty_log_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            compute_metrics(
                resolve_deferrals(DecisionLog([])), self._truth([0]), n_classes=2
            )


class TestSweep:
    def test_degenerate_cell(self):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        result = sweep(ds, scorer, expert, [0], [0], include_presets=False)
        assert len(result.rows) == 1
        row = result.rows[0]
        assert row.report.vlm_invoc_rate == 1.0
        assert row.report.vlm_defer_rate == 0.0

    def test_cell_count_and_presets(self):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        result = sweep(ds, scorer, expert, [0, 18], [0, 6])
        names = [r.name for r in result.rows]
        assert len(result.rows) == 4 + 3
        for preset in ("no_vlm", "no_defer", "allow_both"):
            assert preset in names
        no_vlm = next(r for r in result.rows if r.name == "no_vlm")
        assert no_vlm.report.vlm_suc_rate == 0.0

    def test_monotone_invocation_trend(self):
        ds = small_dataset(n_videos=4, duration=120)
        scorer, expert = dataset_oracles(ds)
        result = sweep(ds, scorer, expert, [0, 30], [0, 6], include_presets=False)
        invoc = {
            (r.max_enc, r.max_defer): r.report.vlm_invoc_rate for r in result.rows
        }
        mean_at_0 = (invoc[(0, 0)] + invoc[(0, 6)]) / 2
        mean_at_30 = (invoc[(30, 0)] + invoc[(30, 6)]) / 2
        assert mean_at_0 >= mean_at_30

    def test_csv_output(self, tmp_path):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        result = sweep(ds, scorer, expert, [18], [6], include_presets=False)
        path = tmp_path / "sweep.csv"
        result.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("name,max_enc,max_defer")
        assert len(lines) == 2

    def test_empty_grid_rejected(self):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        with pytest.raises(ValueError, match="non-empty"):
            sweep(ds, scorer, expert, [], [0])


class TestPresets:
    def test_no_vlm_never_succeeds_expert(self):
        ds = small_dataset()
        scorer, _ = dataset_oracles(ds)
        report, log = evaluate(ds, scorer, None, preset_no_vlm())
        assert report.vlm_suc_rate == 0.0
        assert all(not r.escalated for r in log.records)

    def test_no_defer_has_zero_defer_rate(self):
        ds = small_dataset()
        scorer, expert = dataset_oracles(ds)
        report, _ = evaluate(ds, scorer, expert, preset_no_defer())
        assert report.vlm_defer_rate == 0.0

    def test_expert_failure_keeps_run_alive(self):
        ds = small_dataset()
        scorer, _ = dataset_oracles(ds)

        class FlakyExpert:
            def __init__(self):
                self.n = 0

            def predict(self, request):
                from streamroute.expert import ExpertConnectionError

                self.n += 1
                raise ExpertConnectionError("always down")

        report, log = evaluate(ds, scorer, FlakyExpert(), preset_expert_always())
        assert report.counts.n_expert_failed == len(log.records)
        assert all(r.source == "encoder" for r in log.records)


class TestSyntheticGenerator:
    def test_segments_tile_and_labels_valid(self):
        ds = small_dataset(n_videos=5, duration=100)
        for video in ds.videos:
            assert video.segments[0].st == 0
            for prev, cur in zip(video.segments, video.segments[1:]):
                assert cur.st == prev.en + 1
            assert video.segments[-1].en == 99
            assert set(np.unique(video.labels)) <= {0, 1}

    def test_alternating_mode(self):
        ds = generate_dataset(
            SyntheticConfig(n_videos=3, duration=150, alternate_labels=True, seed=1)
        )
        for video in ds.videos:
            for prev, cur in zip(video.segments, video.segments[1:]):
                assert prev.label != cur.label

    def test_deterministic(self):
        a = small_dataset(seed=42)
        b = small_dataset(seed=42)
        for va, vb in zip(a.videos, b.videos):
            assert np.array_equal(va.visual.features, vb.visual.features)
            assert va.segments == vb.segments

    def test_informative_tail_carries_signal(self):
        cfg = SyntheticConfig(
            n_videos=1, duration=200, seg_len_min=40, seg_len_max=40,
            informative_fraction=0.5, noise_scale=0.1, signal_scale=3.0, seed=0,
        )
        ds = generate_dataset(cfg)
        video = ds.videos[0]
        seg = video.segments[0]
        early = video.visual.features[seg.st : seg.st + 10]
        late = video.visual.features[seg.en - 9 : seg.en + 1]
        assert np.linalg.norm(late.mean(axis=0)) > np.linalg.norm(early.mean(axis=0))
