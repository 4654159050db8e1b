import numpy as np
import pytest

from avsim.errors import ConfigError
from avsim.evaluation import (ConfusionCounts, Detection, classify,
                              detector_rng, iou, match_detections, precision,
                              recall, sweep_thresholds, synthetic_detect)
from avsim.sensors import BBox2D, SceneryCondition


def box(x0, y0, x1, y1):
    return BBox2D(float(x0), float(y0), float(x1), float(y1))


def det(x0, y0, x1, y1, score=0.9):
    return Detection(box(x0, y0, x1, y1), score)


def box_with_iou(gt: BBox2D, target: float) -> BBox2D:
    """Shift a copy of gt horizontally so that iou(shifted, gt) == target.

    For a pure x-shift delta on a w-wide box, IoU = (w - delta) / (w + delta),
    so delta = w (1 - iou) / (1 + iou).
    """
    w = gt.x_max - gt.x_min
    delta = w * (1.0 - target) / (1.0 + target)
    return BBox2D(gt.x_min + delta, gt.y_min, gt.x_max + delta, gt.y_max)


def grid_count_iou(a: BBox2D, b: BBox2D) -> float:
    """Cell-counting oracle, exact for integer-coordinate boxes."""
    x0 = int(min(a.x_min, b.x_min))
    y0 = int(min(a.y_min, b.y_min))
    x1 = int(max(a.x_max, b.x_max))
    y1 = int(max(a.y_max, b.y_max))
    inter = union = 0
    for i in range(x0, x1):
        for j in range(y0, y1):
            in_a = a.x_min <= i and i + 1 <= a.x_max and \
                a.y_min <= j and j + 1 <= a.y_max
            in_b = b.x_min <= i and i + 1 <= b.x_max and \
                b.y_min <= j and j + 1 <= b.y_max
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


class FakeFrame:
    def __init__(self, frame_id, gt_boxes):
        self.frame_id = frame_id
        self.time = frame_id * 0.1
        self.gt_boxes = gt_boxes


def fig9_frame():
    """Four well-separated gts with matched IoUs ~ {0.95, 0.75, 0.55, 0.30}."""
    gts = [box(0, 0, 40, 30), box(200, 0, 240, 30),
           box(400, 0, 440, 30), box(600, 0, 640, 30)]
    targets = [0.95, 0.75, 0.55, 0.30]
    dets = [Detection(box_with_iou(g, t), 0.9) for g, t in zip(gts, targets)]
    return dets, gts


class TestIou:
    def test_identical(self):
        b = box(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 10, 10), box(20, 20, 30, 30)) == 0.0

    def test_worked_quarter_overlap(self):
        v = iou(box(0, 0, 10, 10), box(5, 5, 15, 15))
        assert v == pytest.approx(1.0 / 7.0, abs=1e-12)
        assert v == pytest.approx(25.0 / 175.0)

    def test_symmetry_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ax = np.sort(rng.integers(0, 50, 2)); ay = np.sort(rng.integers(0, 50, 2))
            bx = np.sort(rng.integers(0, 50, 2)); by = np.sort(rng.integers(0, 50, 2))
            a = box(ax[0], ay[0], ax[1] + 1, ay[1] + 1)
            b = box(bx[0], by[0], bx[1] + 1, by[1] + 1)
            v, w = iou(a, b), iou(b, a)
            assert v == w
            assert 0.0 <= v <= 1.0

    def test_zero_area_convention(self):
        assert iou(box(5, 5, 5, 5), box(5, 5, 5, 5)) == 0.0

    def test_matches_grid_count_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            ax = np.sort(rng.integers(0, 40, 2)); ay = np.sort(rng.integers(0, 40, 2))
            bx = np.sort(rng.integers(0, 40, 2)); by = np.sort(rng.integers(0, 40, 2))
            a = box(ax[0], ay[0], ax[1] + 1, ay[1] + 1)
            b = box(bx[0], by[0], bx[1] + 1, by[1] + 1)
            assert iou(a, b) == pytest.approx(grid_count_iou(a, b), abs=1e-3)


class TestMatching:
    def test_single_exact_match(self):
        gts = [box(0, 0, 10, 10)]
        dets = [det(0, 0, 10, 10)]
        m = match_detections(dets, gts)
        assert m.pairs == ((0, 0, 1.0),)
        assert m.unmatched_dets == () and m.unmatched_gts == ()

    def test_two_dets_one_gt(self):
        gts = [box(0, 0, 10, 10)]
        dets = [det(2, 0, 12, 10), det(1, 0, 11, 10)]  # det 1 overlaps more
        m = match_detections(dets, gts)
        assert len(m.pairs) == 1
        assert m.pairs[0][0] == 1
        assert m.unmatched_dets == (0,)

    def test_pairs_sorted_by_iou_descending(self):
        dets, gts = fig9_frame()
        m = match_detections(dets, gts)
        ious = [v for _, _, v in m.pairs]
        assert ious == sorted(ious, reverse=True)

    def test_matches_independent_argmax_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            gts = []
            dets = []
            for _ in range(10):
                x, y = rng.uniform(0, 150, 2)
                w, h = rng.uniform(5, 40, 2)
                gts.append(box(x, y, x + w, y + h))
                x, y = rng.uniform(0, 150, 2)
                w, h = rng.uniform(5, 40, 2)
                dets.append(det(x, y, x + w, y + h))
            got = match_detections(dets, gts)

            # oracle: repeated scan for the best remaining pair
            matrix = np.array([[iou(d.box, g) for g in gts] for d in dets])
            pairs = []
            free_d = set(range(len(dets)))
            free_g = set(range(len(gts)))
            while True:
                best = (0.0, None, None)
                for di in sorted(free_d):
                    for gi in sorted(free_g):
                        if matrix[di, gi] > best[0]:
                            best = (matrix[di, gi], di, gi)
                if best[1] is None:
                    break
                pairs.append((best[1], best[2], best[0]))
                free_d.discard(best[1])
                free_g.discard(best[2])
            assert [(a, b) for a, b, _ in got.pairs] == \
                [(a, b) for a, b, _ in pairs]


class TestClassify:
    def test_fig9_counts_at_05(self):
        dets, gts = fig9_frame()
        m = match_detections(dets, gts)
        c = classify(m, 0.5)
        assert (c.tp, c.fp) == (3, 1)

    def test_fig9_counts_at_07(self):
        dets, gts = fig9_frame()
        m = match_detections(dets, gts)
        c = classify(m, 0.7)
        assert (c.tp, c.fp) == (2, 2)

    def test_no_detections(self):
        m = match_detections([], [box(0, 0, 1, 1)] * 5)
        c = classify(m, 0.5)
        assert (c.tp, c.fp, c.fn) == (0, 0, 5)

    def test_count_identities_on_random_inputs(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n_d, n_g = int(rng.integers(0, 8)), int(rng.integers(0, 8))
            dets = []
            gts = []
            for _ in range(n_d):
                x, y = rng.uniform(0, 80, 2)
                dets.append(det(x, y, x + rng.uniform(2, 30), y + rng.uniform(2, 30)))
            for _ in range(n_g):
                x, y = rng.uniform(0, 80, 2)
                gts.append(box(x, y, x + rng.uniform(2, 30), y + rng.uniform(2, 30)))
            m = match_detections(dets, gts)
            tau = float(rng.uniform(0.05, 1.0))
            c = classify(m, tau)
            assert c.tp + c.fp == n_d
            assert c.tp + c.fn == n_g
            # brute-force reclassification from the pair list
            tp = sum(1 for _, _, v in m.pairs if v >= tau)
            assert (c.tp, c.fp, c.fn) == (tp, n_d - tp, n_g - tp)

    def test_invalid_tau(self):
        m = match_detections([], [])
        with pytest.raises(ConfigError):
            classify(m, 0.0)
        with pytest.raises(ConfigError):
            classify(m, 1.5)


class TestPrecisionRecall:
    def test_fig9_precision(self):
        assert precision(ConfusionCounts(3, 1, 0)) == 0.75

    def test_recall_direct(self):
        assert recall(ConfusionCounts(3, 0, 7)) == pytest.approx(0.3)

    def test_absent_markers(self):
        assert precision(ConfusionCounts(0, 0, 5)) is None
        assert recall(ConfusionCounts(0, 5, 0)) is None


class TestSweep:
    def test_fig9_sweep(self):
        dets, gts = fig9_frame()
        rows = sweep_thresholds([(dets, gts)], [0.5, 0.7])
        assert rows[0].precision == 0.75
        assert rows[1].precision == 0.5

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(17)
        taus = [0.5, 0.6, 0.7, 0.8]
        for _ in range(50):
            frames = []
            for _ in range(4):
                gts = []
                dets = []
                for _ in range(int(rng.integers(1, 6))):
                    x, y = rng.uniform(0, 200, 2)
                    w, h = rng.uniform(8, 40, 2)
                    gts.append(box(x, y, x + w, y + h))
                    xs = sorted((x + rng.normal(0, 4), x + w + rng.normal(0, 4)))
                    ys = sorted((y + rng.normal(0, 4), y + h + rng.normal(0, 4)))
                    dets.append(det(xs[0], ys[0], xs[1], ys[1]))
                frames.append((dets, gts))
            rows = sweep_thresholds(frames, taus)
            tps = [r.tp for r in rows]
            assert tps == sorted(tps, reverse=True)
            precs = [r.precision for r in rows if r.precision is not None]
            recs = [r.recall for r in rows if r.recall is not None]
            assert precs == sorted(precs, reverse=True)
            assert recs == sorted(recs, reverse=True)

    def test_micro_average_equals_sum_of_frames(self):
        rng = np.random.default_rng(23)
        frames = []
        for _ in range(100):
            gts = []
            dets = []
            for _ in range(int(rng.integers(0, 5))):
                x, y = rng.uniform(0, 100, 2)
                w, h = rng.uniform(5, 25, 2)
                gts.append(box(x, y, x + w, y + h))
                if rng.uniform() < 0.8:
                    dets.append(det(x + rng.normal(0, 3), y, x + w, y + h))
            frames.append((dets, gts))
        rows = sweep_thresholds(frames, [0.5])
        tp = fp = fn = 0
        for dets, gts in frames:
            c = classify(match_detections(dets, gts), 0.5)
            tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
        assert (rows[0].tp, rows[0].fp, rows[0].fn) == (tp, fp, fn)

    def test_rejects_bad_thresholds(self):
        with pytest.raises(ConfigError):
            sweep_thresholds([], [0.8, 0.5])
        with pytest.raises(ConfigError):
            sweep_thresholds([], [0.0, 0.5])


class TestSyntheticDetector:
    def frames_with_boxes(self, n_frames=40, per_frame=16):
        rng = np.random.default_rng(31)
        frames = []
        for k in range(n_frames):
            boxes = []
            for i in range(per_frame):
                h = float(rng.uniform(12, 80))
                w = 1.4 * h
                x = float(rng.uniform(0, 800 - w))
                y = float(rng.uniform(0, 600 - h))
                boxes.append((i + 1, box(x, y, x + w, y + h)))
            frames.append(FakeFrame(k, boxes))
        return frames

    def test_noiseless_reproduces_gt(self):
        cond = SceneryCondition.noiseless()
        frame = self.frames_with_boxes(1)[0]
        dets = synthetic_detect(frame, cond, detector_rng(0, frame.frame_id))
        assert [d.box for d in dets] == [b for _, b in frame.gt_boxes]
        rows = sweep_thresholds([(dets, [b for _, b in frame.gt_boxes])],
                                [0.5, 0.6, 0.7, 0.8])
        assert all(r.precision == 1.0 and r.recall == 1.0 for r in rows)

    def test_total_miss_gives_zero_recall(self):
        cond = SceneryCondition("night", miss_base=1.0, miss_gain=0.0,
                                jitter_px=0.0, fp_rate=0.0)
        frame = self.frames_with_boxes(1)[0]
        dets = synthetic_detect(frame, cond, detector_rng(0, frame.frame_id))
        assert dets == []
        rows = sweep_thresholds([(dets, [b for _, b in frame.gt_boxes])], [0.5])
        assert rows[0].recall == 0.0

    def test_morning_beats_night_recall(self):
        frames = self.frames_with_boxes()
        n_boxes = sum(len(f.gt_boxes) for f in frames)
        assert n_boxes >= 500
        results = {}
        for cond in (SceneryCondition.morning(), SceneryCondition.night()):
            pairs = []
            for f in frames:
                dets = synthetic_detect(f, cond, detector_rng(7, f.frame_id))
                pairs.append((dets, [b for _, b in f.gt_boxes]))
            results[cond.lighting] = sweep_thresholds(pairs, [0.5])[0].recall
        assert results["morning"] > results["night"]

    def test_deterministic_per_frame_and_seed(self):
        cond = SceneryCondition.night()
        frames = self.frames_with_boxes(5)
        one = [synthetic_detect(f, cond, detector_rng(3, f.frame_id))
               for f in frames]
        # processing order must not matter: recompute in reverse
        two = [synthetic_detect(f, cond, detector_rng(3, f.frame_id))
               for f in reversed(frames)][::-1]
        assert one == two
        three = [synthetic_detect(f, cond, detector_rng(4, f.frame_id))
                 for f in frames]
        assert one != three

    def test_detections_clipped_to_image(self):
        cond = SceneryCondition("night", miss_base=0.0, miss_gain=0.0,
                                jitter_px=30.0, fp_rate=2.0)
        for f in self.frames_with_boxes(10):
            for d in synthetic_detect(f, cond, detector_rng(1, f.frame_id)):
                assert 0.0 <= d.box.x_min <= d.box.x_max <= 800.0
                assert 0.0 <= d.box.y_min <= d.box.y_max <= 600.0
                assert 0.0 <= d.score <= 1.0
