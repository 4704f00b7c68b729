import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxseg import metrics
from boxseg.errors import ShapeError


def sweep_oracle(pred, gt):
    """Threshold loop, one binarization at a time."""
    gt = np.asarray(gt) > 0.5
    dices, ious = [], []
    for i in range(256):
        t = i / 255.0
        bp = np.asarray(pred) > t
        inter = int((bp & gt).sum())
        union = int((bp | gt).sum())
        den = int(bp.sum()) + int(gt.sum())
        dices.append(1.0 if den == 0 else 2.0 * inter / den)
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(dices)), float(np.mean(ious))


def greedy_match_oracle(region_boxes, gt_boxes, thr=0.5):
    """Naive greedy matcher: scan for the best remaining pair each round."""
    region_boxes = list(region_boxes)
    gt_boxes = [tuple(b) for b in gt_boxes]
    used_r, used_b, pairs = set(), set(), []
    while True:
        best = None
        for ri, rb in enumerate(region_boxes):
            if ri in used_r:
                continue
            for bi, gb in enumerate(gt_boxes):
                if bi in used_b:
                    continue
                iou = metrics.box_iou(rb, gb)
                if iou <= thr:
                    continue
                key = (-iou, tuple(rb), gb)
                if best is None or key < best[0]:
                    best = (key, ri, bi, iou)
        if best is None:
            break
        _, ri, bi, iou = best
        used_r.add(ri)
        used_b.add(bi)
        pairs.append((ri, bi, iou))
    return pairs


def hausdorff_oracle(a, b):
    def directed(p, q):
        worst = 0.0
        for y1, x1 in p:
            best = min(((y1 - y2) ** 2 + (x1 - x2) ** 2) ** 0.5 for y2, x2 in q)
            worst = max(worst, best)
        return worst

    return max(directed(a, b), directed(b, a))


class TestThresholdSweep:
    def test_identity_case_value(self):
        # pred == gt binary: perfect at t < 1, empty prediction at t = 1
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1.0
        s = metrics.threshold_sweep(gt.copy(), gt)
        assert abs(s.mdice - 255.0 / 256.0) <= 1e-12
        assert abs(s.miou - 255.0 / 256.0) <= 1e-12

    def test_identity_on_empty_gt(self):
        z = np.zeros((3, 3))
        s = metrics.threshold_sweep(z.copy(), z)
        assert s.mdice == 1.0 and s.miou == 1.0

    def test_inverted_prediction_is_zero(self):
        gt = np.zeros((4, 4))
        gt[0:2, 0:2] = 1.0
        s = metrics.threshold_sweep(1.0 - gt, gt)
        assert s.mdice == 0.0 and s.miou == 0.0

    def test_uniform_half_hand_value(self):
        gt = np.zeros((2, 2))
        gt[0, :] = 1.0
        s = metrics.threshold_sweep(np.full((2, 2), 0.5), gt)
        # 0.5 > i/255 for i <= 127: dice 2*2/(4+2); then empty: 0
        assert abs(s.mdice - 128.0 / 256.0 * (2.0 / 3.0)) <= 1e-12

    def test_curves_shape_and_dominance(self, rng):
        pred = rng.uniform(size=(8, 8))
        gt = rng.uniform(size=(8, 8)) > 0.5
        s = metrics.threshold_sweep(pred, gt)
        assert len(s.dice_curve) == 256 and len(s.iou_curve) == 256
        assert np.all(s.dice_curve >= s.iou_curve - 1e-15)
        assert s.mdice >= s.miou

    def test_matches_oracle_random(self, rng):
        for _ in range(40):
            pred = np.round(rng.uniform(size=(6, 6)), 3)
            gt = rng.uniform(size=(6, 6)) > 0.6
            s = metrics.threshold_sweep(pred, gt)
            want_d, want_i = sweep_oracle(pred, gt)
            assert abs(s.mdice - want_d) <= 1e-12
            assert abs(s.miou - want_i) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.threshold_sweep(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDetection:
    def test_perfect_prediction(self):
        pred = np.zeros((8, 8))
        pred[1:4, 1:4] = 1.0
        pred[5:8, 5:8] = 1.0
        regions = metrics.detect_regions(pred)
        det = metrics.match_detections(regions, [(1, 1, 3, 3), (5, 5, 7, 7)])
        assert det.precision == det.recall == det.f1 == 1.0

    def test_empty_prediction(self):
        det = metrics.match_detections([], [(0, 0, 2, 2)])
        assert det.precision == 0.0 and det.recall == 0.0 and det.f1 == 0.0

    def test_one_region_two_boxes_single_tp(self):
        pred = np.zeros((6, 10))
        pred[1:5, 0:10] = 1.0  # one wide region overlapping two gt boxes
        regions = metrics.detect_regions(pred)
        assert len(regions) == 1
        det = metrics.match_detections(regions, [(0, 1, 4, 4), (5, 1, 9, 4)])
        assert len(det.pairs) <= 1

    def test_strict_threshold(self):
        # IoU exactly 0.5 must not match
        region = metrics.Region(points=np.zeros((2, 2)), box=(0, 0, 0, 1))
        det = metrics.match_detections([region], [(0, 0, 0, 3)])
        assert len(det.pairs) == 0

    def test_matches_naive_greedy_oracle(self, rng):
        for _ in range(100):
            regions = []
            for _k in range(int(rng.integers(0, 5))):
                x0, y0 = rng.integers(0, 12, size=2)
                w, h = rng.integers(1, 6, size=2)
                box = (int(x0), int(y0), int(min(x0 + w, 15)), int(min(y0 + h, 15)))
                regions.append(metrics.Region(points=np.zeros((1, 2)), box=box))
            gt = []
            for _k in range(int(rng.integers(0, 4))):
                x0, y0 = rng.integers(0, 12, size=2)
                w, h = rng.integers(1, 6, size=2)
                gt.append((int(x0), int(y0), int(min(x0 + w, 15)), int(min(y0 + h, 15))))
            det = metrics.match_detections(regions, gt)
            want = greedy_match_oracle([r.box for r in regions], gt)
            assert sorted(p[:2] for p in det.pairs) == sorted(p[:2] for p in want)

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(range(4)), st.permutations(range(3)))
    def test_permutation_invariance(self, rperm, bperm):
        boxes = [(0, 0, 3, 3), (2, 2, 6, 6), (8, 8, 11, 11), (0, 8, 3, 11)]
        gts = [(0, 0, 3, 4), (8, 8, 11, 12), (1, 1, 6, 6)]
        regions = [metrics.Region(points=np.zeros((1, 2)), box=boxes[i]) for i in rperm]
        det = metrics.match_detections(regions, [gts[i] for i in bperm])
        base = metrics.match_detections(
            [metrics.Region(points=np.zeros((1, 2)), box=b) for b in boxes], gts)
        assert det.precision == base.precision
        assert det.recall == base.recall
        assert len(det.pairs) == len(base.pairs)

    def test_f1_definition(self):
        pred = np.zeros((8, 8))
        pred[0:2, 0:2] = 1.0
        pred[5:7, 5:7] = 1.0
        regions = metrics.detect_regions(pred)
        det = metrics.match_detections(regions, [(0, 0, 1, 1)])
        assert det.precision == 0.5 and det.recall == 1.0
        assert abs(det.f1 - 2 * 0.5 * 1.0 / 1.5) <= 1e-12


class TestHausdorff:
    def test_identical_sets(self, rng):
        pts = rng.integers(0, 10, size=(12, 2))
        assert metrics.hausdorff(pts, pts.copy()) == 0.0

    def test_three_four_five(self):
        assert metrics.hausdorff([(0, 0)], [(3, 4)]) == 5.0

    def test_symmetry(self, rng):
        a = rng.integers(0, 20, size=(8, 2))
        b = rng.integers(0, 20, size=(15, 2))
        assert metrics.hausdorff(a, b) == metrics.hausdorff(b, a)

    def test_against_loop_oracle(self, rng):
        for _ in range(30):
            a = rng.integers(0, 25, size=(int(rng.integers(1, 30)), 2))
            b = rng.integers(0, 25, size=(int(rng.integers(1, 30)), 2))
            assert abs(metrics.hausdorff(a, b) - hausdorff_oracle(a, b)) <= 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            metrics.hausdorff(np.zeros((0, 2)), [(0, 0)])


class TestRegionHelpers:
    def test_rectangularity_of_rectangle(self):
        pred = np.zeros((6, 6))
        pred[1:4, 2:5] = 1.0
        region = metrics.detect_regions(pred)[0]
        assert metrics.rectangularity(region) == 1.0

    def test_rectangularity_of_cross(self):
        pred = np.zeros((5, 5))
        pred[2, :] = 1.0
        pred[:, 2] = 1.0
        region = metrics.detect_regions(pred)[0]
        assert metrics.rectangularity(region) == 9.0 / 25.0

    def test_detect_regions_8_connectivity(self):
        pred = np.zeros((4, 4))
        pred[0, 0] = pred[1, 1] = 1.0  # diagonal touch -> one region
        assert len(metrics.detect_regions(pred)) == 1


class TestEvaluateSample:
    def test_perfect_prediction_scores(self):
        gt = np.zeros((16, 16))
        gt[2:7, 3:8] = 1.0
        boxes = [(3, 2, 7, 6)]
        scores = metrics.evaluate_sample(gt.copy(), gt, boxes)
        assert scores["f1"] == 1.0
        assert scores["hausdorff"] == 0.0
        assert scores["dice_mask"] == 1.0
        assert scores["mdice"] > 0.99

    def test_boxfill_vs_mask_dice_gap(self):
        gt = np.zeros((16, 16))
        gt[4:12, 4:12] = 1.0
        gt[4, 4] = gt[4, 11] = gt[11, 4] = gt[11, 11] = 0.0  # clipped corners
        boxes = [(4, 4, 11, 11)]
        boxfill = np.zeros((16, 16))
        boxfill[4:12, 4:12] = 1.0
        scores = metrics.evaluate_sample(boxfill, gt, boxes)
        assert scores["dice_boxfill"] == 1.0
        assert scores["dice_mask"] < 1.0
        assert scores["rectangularity"] == 1.0

    def test_no_detections_nan_hausdorff(self):
        gt = np.zeros((8, 8))
        gt[2:5, 2:5] = 1.0
        scores = metrics.evaluate_sample(np.zeros((8, 8)), gt, [(2, 2, 4, 4)])
        assert np.isnan(scores["hausdorff"])
        assert np.isnan(scores["rectangularity"])
        assert scores["recall"] == 0.0
