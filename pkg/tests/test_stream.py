import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamroute.stream import (
    SegmentAnnotation,
    StreamConfig,
    UNLABELED,
    aggregate_modality,
    decision_timestamps,
    extract_window,
    propagate_labels,
    split_by_video,
    temporal_iou,
)

from _helpers import brute_force_iou, make_dataset, make_video


class TestPropagateLabels:
    def test_direct_propagation(self):
        labels = propagate_labels([SegmentAnnotation(3, 5, 1)], 8)
        assert labels.tolist() == [UNLABELED] * 3 + [1, 1, 1] + [UNLABELED] * 2

    def test_empty(self):
        assert propagate_labels([], 4).tolist() == [UNLABELED] * 4

    def test_tiling(self):
        segs = [SegmentAnnotation(0, 1, 0), SegmentAnnotation(2, 3, 1)]
        assert propagate_labels(segs, 4).tolist() == [0, 0, 1, 1]

    def test_overlap_rejected_with_both_segments(self):
        segs = [SegmentAnnotation(0, 5, 0), SegmentAnnotation(4, 8, 1)]
        with pytest.raises(ValueError, match=r"\[0, 5\].*\[4, 8\]"):
            propagate_labels(segs, 10)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="exceeds duration"):
            propagate_labels([SegmentAnnotation(0, 9, 0)], 5)

    def test_round_trip_idempotence(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            duration = int(rng.integers(5, 60))
            segs, t = [], 0
            while t < duration:
                ln = int(rng.integers(1, 8))
                en = min(t + ln - 1, duration - 1)
                segs.append(SegmentAnnotation(t, en, int(rng.integers(3))))
                t = en + 1 + int(rng.integers(0, 3))
            labels = propagate_labels(segs, duration)
            # derive segments back from the label runs
            derived = []
            start = None
            for i in range(duration + 1):
                val = labels[i] if i < duration else UNLABELED
                if start is not None and (i == duration or val != labels[start]):
                    derived.append(SegmentAnnotation(start, i - 1, int(labels[start])))
                    start = None
                if i < duration and val != UNLABELED and start is None:
                    start = i
            assert np.array_equal(propagate_labels(derived, duration), labels)


class TestExtractWindow:
    def test_stream_start_fully_padded(self):
        video = make_video("v", 50)
        w = extract_window(video, 0, StreamConfig(window_len=32))
        assert w.n_positions == 33
        assert int(w.pad_mask.sum()) == 32
        assert w.extent == (0, 0)
        assert not w.visual_present[:32].any()

    def test_no_padding_mid_stream(self):
        video = make_video("v", 60)
        w = extract_window(video, 40, StreamConfig(window_len=32))
        assert int(w.pad_mask.sum()) == 0
        assert w.extent == (8, 40)
        assert np.allclose(w.visual[-1], video.visual.features[40])
        assert np.allclose(w.visual[0], video.visual.features[8])

    def test_single_pad_at_boundary(self):
        video = make_video("v", 50)
        w = extract_window(video, 31, StreamConfig(window_len=32))
        assert int(w.pad_mask.sum()) == 1  # N - i
        assert w.extent == (0, 31)

    def test_out_of_range(self):
        video = make_video("v", 10)
        with pytest.raises(IndexError):
            extract_window(video, 10, StreamConfig())

    def test_causality_never_references_future(self):
        rng = np.random.default_rng(7)
        video = make_video("v", 80, rng=rng)
        cfg = StreamConfig(window_len=16)
        for i in (0, 5, 16, 40, 79):
            w = extract_window(video, i, cfg)
            assert w.extent[1] == i
            lo = max(0, i - 16)
            real = w.visual[~w.pad_mask]
            assert np.allclose(real, video.visual.features[lo : i + 1])

    def test_absent_modality_has_no_present_positions(self):
        video = make_video("v", 40, absent=("audio",))
        w = extract_window(video, 35, StreamConfig())
        assert not w.audio_present.any()
        assert w.visual_present[~w.pad_mask].all()


class TestAggregateModality:
    def test_span_one_is_identity(self):
        video = make_video("v", 20)
        got = aggregate_modality(video, "text", 7, 1)
        assert np.allclose(got, video.text.features[7])

    def test_mean_of_two(self):
        video = make_video("v", 4, dims=(2, 2, 2))
        feats = video.text.features
        got = aggregate_modality(video, "text", 3, 2)
        assert np.allclose(got, (feats[2] + feats[3]) / 2)

    def test_all_absent_returns_none(self):
        video = make_video("v", 10, absent=("audio",))
        assert aggregate_modality(video, "audio", 5, 4) is None

    def test_absent_entries_ignored(self):
        import numpy as np

        from streamroute.stream import ModalityTrack, VideoStream

        feats = np.arange(12, dtype=np.float32).reshape(6, 2)
        present = np.array([True, False, True, True, False, True])
        track = ModalityTrack(features=feats, present=present)
        video = make_video("v", 6, dims=(2, 2, 2))
        video = VideoStream(
            video_id="v", duration=6, visual=video.visual, text=track,
            audio=video.audio,
        )
        got = aggregate_modality(video, "text", 4, 3)  # span {2,3,4}, 4 absent
        assert np.allclose(got, (feats[2] + feats[3]) / 2)

    def test_bad_span(self):
        video = make_video("v", 10)
        with pytest.raises(ValueError):
            aggregate_modality(video, "text", 5, 0)


class TestTemporalIou:
    def test_identical(self):
        assert temporal_iou((0, 31), (0, 31)) == 1.0

    def test_disjoint(self):
        assert temporal_iou((0, 5), (10, 20)) == 0.0

    def test_partial_overlap(self):
        assert temporal_iou((10, 20), (15, 25)) == 0.375  # 6 / 16

    def test_degenerate_interval(self):
        with pytest.raises(ValueError, match="degenerate"):
            temporal_iou((5, 3), (0, 10))
        with pytest.raises(ValueError, match="degenerate"):
            temporal_iou((0, 10), (7, 2))

    interval = st.tuples(st.integers(0, 80), st.integers(0, 80)).map(
        lambda p: (min(p), max(p))
    )

    @given(interval, interval)
    @settings(max_examples=200, deadline=None)
    def test_symmetry_and_bounds(self, a, b):
        ab = temporal_iou(a, b)
        assert ab == temporal_iou(b, a)
        assert 0.0 <= ab <= 1.0
        assert temporal_iou(a, a) == 1.0

    def test_matches_brute_force_sets_small_scale(self):
        intervals = [(st, en) for st in range(16) for en in range(st, 16)]
        for a in intervals:
            for b in intervals:
                assert temporal_iou(a, b) == brute_force_iou(a, b)


class TestSplitByVideo:
    def _dataset(self, n):
        rng = np.random.default_rng(1)
        videos = [
            make_video(f"v{k}", 20, segments=[(0, 19, k % 2)], rng=rng)
            for k in range(n)
        ]
        return make_dataset(videos)

    def test_80_20(self):
        train, test = split_by_video(self._dataset(10), 0.8, seed=7)
        assert len(train.videos) == 8 and len(test.videos) == 2
        train_ids = {v.video_id for v in train.videos}
        test_ids = {v.video_id for v in test.videos}
        assert not train_ids & test_ids

    def test_deterministic(self):
        ds = self._dataset(12)
        a = split_by_video(ds, 0.7, seed=3)
        b = split_by_video(ds, 0.7, seed=3)
        assert [v.video_id for v in a[0].videos] == [v.video_id for v in b[0].videos]

    def test_rounding(self):
        train, test = split_by_video(self._dataset(5), 0.8, seed=0)
        assert len(train.videos) == 4 and len(test.videos) == 1

    def test_too_few_videos(self):
        with pytest.raises(ValueError, match="at least 2"):
            split_by_video(self._dataset(1), 0.5, seed=0)

    def test_partition_property(self):
        ds = self._dataset(9)
        for seed in range(5):
            train, test = split_by_video(ds, 0.6, seed=seed)
            train_ids = {v.video_id for v in train.videos}
            test_ids = {v.video_id for v in test.videos}
            assert train_ids | test_ids == {v.video_id for v in ds.videos}
            assert not train_ids & test_ids


def test_decision_timestamps_interval():
    video = make_video("v", 10)
    assert list(decision_timestamps(video, StreamConfig(interval=3))) == [0, 3, 6, 9]


def test_stream_config_validation():
    with pytest.raises(ValueError):
        StreamConfig(window_len=0)
    with pytest.raises(ValueError):
        StreamConfig(text_agg=40)  # exceeds window_len
