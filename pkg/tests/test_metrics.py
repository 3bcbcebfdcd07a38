"""NMS, average precision, AIC, histograms, refinement gains, scatter."""

import numpy as np
import pytest

from hardet.geom import Box, iou
from hardet.metrics import (
    Detection,
    GroundTruth,
    aic,
    average_precision,
    consistency_scatter,
    detection_from_json,
    ground_truth_from_json,
    iou_histogram,
    nms,
    refinement_gain,
)


def det(x1, y1, x2, y2, cls=1, score=0.5):
    return Detection(box=Box(x1, y1, x2, y2), class_id=cls, score=score)


def gt(x1, y1, x2, y2, cls=1):
    return GroundTruth(box=Box(x1, y1, x2, y2), class_id=cls)


def random_detections(rng, n, num_classes=3):
    dets = []
    for _ in range(n):
        x, y = rng.uniform(0, 8, size=2)
        w, h = rng.uniform(0.5, 4, size=2)
        dets.append(
            Detection(
                box=Box(x, y, x + w, y + h),
                class_id=int(rng.integers(1, num_classes + 1)),
                score=float(rng.uniform(0, 1)),
            )
        )
    return dets


class TestNms:
    def test_single_detection(self):
        d = det(0, 0, 1, 1)
        assert nms([d], 0.5) == [d]

    def test_identical_boxes_keep_highest(self):
        lo = det(0, 0, 1, 1, score=0.8)
        hi = det(0, 0, 1, 1, score=0.9)
        assert nms([lo, hi], 0.5) == [hi]

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            nms([det(0, 0, 1, 1)], 0.0)

    def test_different_classes_do_not_suppress(self):
        a = det(0, 0, 1, 1, cls=1, score=0.9)
        b = det(0, 0, 1, 1, cls=2, score=0.8)
        assert nms([a, b], 0.5) == [a, b]

    def test_high_score_low_iou_box_survives(self):
        # the better-localized but lower-scored candidate gets suppressed
        target = gt(0, 0, 2, 2)
        accurate = det(0.0, 0.0, 2.0, 2.2, score=0.6)
        sloppy = det(0.3, 0.0, 2.3, 2.0, score=0.9)
        assert iou(accurate.box, target.box) > iou(sloppy.box, target.box)
        assert iou(accurate.box, sloppy.box) >= 0.5
        kept = nms([accurate, sloppy], 0.5)
        assert kept == [sloppy]

    def test_tie_breaks_by_input_index(self):
        a = det(0, 0, 1, 1, score=0.5)
        b = det(0, 0, 1, 1, score=0.5)
        kept = nms([a, b], 0.5)
        assert kept == [a]

    def test_random_set_invariants(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            dets = random_detections(rng, int(rng.integers(0, 15)))
            thr = float(rng.uniform(0.2, 0.9))
            kept = nms(dets, thr)
            ids = [id(k) for k in kept]
            assert all(any(k is d for d in dets) for k in kept)
            assert len(set(ids)) == len(ids)
            by_class: dict[int, list[float]] = {}
            for i, a in enumerate(kept):
                by_class.setdefault(a.class_id, []).append(a.score)
                for b in kept[i + 1 :]:
                    if a.class_id == b.class_id:
                        assert iou(a.box, b.box) < thr
            for scores in by_class.values():
                assert scores == sorted(scores, reverse=True)
            assert nms(kept, thr) == kept  # idempotent


class TestAveragePrecision:
    def test_perfect_detector(self):
        gts = [gt(0, 0, 2, 2, cls=1), gt(4, 4, 6, 6, cls=2)]
        dets = [det(0, 0, 2, 2, cls=1, score=0.9), det(4, 4, 6, 6, cls=2, score=0.8)]
        result = average_precision(dets, gts)
        for t in (0.5, 0.6, 0.7, 0.8, 0.9):
            assert result.per_threshold[t] == pytest.approx(1.0)
        assert result.mean == pytest.approx(1.0)

    def test_no_detections(self):
        result = average_precision([], [gt(0, 0, 2, 2)])
        assert result.mean == 0.0

    def test_ranked_pair_gives_half(self):
        # high-scored disjoint box outranks the correct one:
        # flags (FP, TP) -> precision envelope area 0.5
        gts = [gt(0, 0, 2, 2)]
        dets = [det(0, 0, 2, 2, score=0.6), det(5, 5, 6, 6, score=0.9)]
        result = average_precision(dets, gts, [0.5])
        assert result.per_threshold[0.5] == pytest.approx(0.5)

    def test_score_rescaling_invariance(self):
        rng = np.random.default_rng(23)
        gts = [gt(0, 0, 2, 2), gt(3, 3, 5, 5), gt(6, 0, 7.5, 2, cls=2)]
        dets = random_detections(rng, 12)
        base = average_precision(dets, gts)
        scaled = [Detection(box=d.box, class_id=d.class_id, score=d.score * 0.5) for d in dets]
        rescored = average_precision(scaled, gts)
        assert rescored.per_threshold == base.per_threshold

    def test_gt_matched_at_most_once(self):
        gts = [gt(0, 0, 2, 2)]
        dets = [det(0, 0, 2, 2, score=0.9), det(0, 0, 2, 2, score=0.8)]
        result = average_precision(dets, gts, [0.5])
        # second duplicate is a false positive: envelope gives 1.0 up to recall 1
        assert result.per_threshold[0.5] == pytest.approx(1.0)

    def test_class_without_gt_is_absent(self):
        gts = [gt(0, 0, 2, 2, cls=1)]
        dets = [det(0, 0, 2, 2, cls=1, score=0.9), det(4, 4, 5, 5, cls=7, score=0.8)]
        result = average_precision(dets, gts, [0.5])
        assert 7 not in result.per_class
        assert result.per_threshold[0.5] == pytest.approx(1.0)

    def test_ap_in_unit_interval(self):
        rng = np.random.default_rng(29)
        gts = [gt(0, 0, 2, 2), gt(3, 3, 5, 5, cls=2)]
        for _ in range(50):
            result = average_precision(random_detections(rng, 10), gts)
            for v in result.per_threshold.values():
                assert 0.0 <= v <= 1.0

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            average_precision([], [gt(0, 0, 1, 1)], [0.0])


class TestAic:
    def test_perfect_consistency(self):
        assert aic([(0.5, 0.5), (0.9, 0.9)]) == 0.0

    def test_hand_values(self):
        pairs = [(0.9, 0.5), (0.3, 0.6)]
        assert aic(pairs) == pytest.approx(0.35, abs=1e-12)
        assert aic(pairs, mode="sum") == pytest.approx(0.7, abs=1e-12)

    def test_reorder_invariance(self):
        pairs = [(0.9, 0.5), (0.3, 0.6), (0.2, 0.8)]
        assert aic(pairs) == pytest.approx(aic(list(reversed(pairs))), abs=1e-15)

    def test_mean_in_unit_interval(self):
        rng = np.random.default_rng(5)
        pairs = [(float(a), float(b)) for a, b in rng.uniform(0, 1, size=(100, 2))]
        assert 0.0 <= aic(pairs) <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aic([])

    def test_range_checked(self):
        with pytest.raises(ValueError):
            aic([(1.2, 0.5)])


class TestIouHistogram:
    def test_all_ones_land_in_last_bin(self):
        counts = iou_histogram([1.0, 1.0, 1.0])
        np.testing.assert_array_equal(counts, [0, 0, 0, 0, 3])

    def test_hand_binning_with_prefilter(self):
        values = [0.05 + 0.1 * k for k in range(10)]  # 0.05 .. 0.95
        counts = iou_histogram(values)
        np.testing.assert_array_equal(counts, [1, 1, 1, 1, 1])
        assert counts.sum() == sum(1 for v in values if v >= 0.5)

    def test_full_cover_edges_partition_input(self):
        rng = np.random.default_rng(37)
        values = rng.uniform(0, 1, size=500)
        counts = iou_histogram(values, np.linspace(0, 1, 11))
        assert counts.sum() == 500

    def test_out_of_range_value_rejected(self):
        with pytest.raises(ValueError):
            iou_histogram([1.2])

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError):
            iou_histogram([0.5], [0.5, 0.5, 1.0])


class TestRefinementGain:
    def test_identity_refinement(self):
        pairs = [(0.55, 0.55), (0.72, 0.72)]
        result = refinement_gain(pairs)
        for m, c in zip(result.means, result.counts):
            if c > 0:
                assert m == 0.0

    def test_constant_shift(self):
        pairs = [(0.55, 0.65), (0.72, 0.82), (0.31, 0.41)]
        result = refinement_gain(pairs)
        for m, c in zip(result.means, result.counts):
            if c > 0:
                assert m == pytest.approx(0.1, abs=1e-12)

    def test_empty_bins_absent(self):
        result = refinement_gain([(0.55, 0.6)])
        assert result.means[5] is not None
        assert result.means[0] is None

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            refinement_gain([])


class TestJsonIngestion:
    def test_detection_round_trip(self):
        d = detection_from_json({"box": [0, 0, 2, 2], "class_id": 3, "score": 0.7})
        assert d.class_id == 3
        assert d.score == 0.7
        assert d.box == Box(0, 0, 2, 2)

    def test_ground_truth_round_trip(self):
        g = ground_truth_from_json({"box": [1, 1, 4, 3], "class_id": 2})
        assert g.class_id == 2
        assert not g.matched

    def test_missing_fields_rejected(self):
        with pytest.raises(ValueError):
            detection_from_json({"box": [0, 0, 1, 1]})
        with pytest.raises(ValueError):
            ground_truth_from_json({"class_id": 1})


class TestConsistencyScatter:
    def test_perfect_detector(self):
        gts = [gt(0, 0, 2, 2)]
        dets = [det(0, 0, 2, 2, score=1.0)]
        assert consistency_scatter(dets, gts) == [(1.0, 1.0)]

    def test_row_per_detection(self):
        rng = np.random.default_rng(41)
        gts = [gt(0, 0, 2, 2), gt(3, 3, 5, 5, cls=2)]
        dets = random_detections(rng, 9)
        rows = consistency_scatter(dets, gts)
        assert len(rows) == 9

    def test_no_same_class_gt_gives_zero(self):
        rows = consistency_scatter([det(0, 0, 2, 2, cls=3)], [gt(0, 0, 2, 2, cls=1)])
        assert rows == [(0.5, 0.0)]
