import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelmatch.distribution import ClassDistribution
from labelmatch.errors import EmptyDataset
from labelmatch.geometry import BBox, Detection, GroundTruthObject
from labelmatch.labeling import Proposal
from labelmatch.metrics import (
    ap50,
    average_precision,
    boxes_per_image,
    class_kl_report,
    greedy_match,
    prediction_quality_ce,
    pseudo_precision_recall,
)
from oracles import reference_ap, reference_match

BOX = BBox(0, 0, 10, 10)


def shifted(target_iou):
    d = 10 * (1 - target_iou) / (1 + target_iou)
    return BBox(d, 0, 10 + d, 10)


def random_scene(rng, n_det=20, n_gt=8, classes=2):
    def box():
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(5, 20, 2)
        return BBox(x, y, x + w, y + h)

    gts = [GroundTruthObject(box(), int(rng.integers(1, classes + 1))) for _ in range(int(rng.integers(0, n_gt + 1)))]
    dets = []
    for _ in range(int(rng.integers(0, n_det + 1))):
        if gts and rng.uniform() < 0.6:
            g = gts[int(rng.integers(len(gts)))]
            b = g.box.translate(*rng.normal(0, 2, 2))
            c = g.class_id if rng.uniform() < 0.8 else int(rng.integers(1, classes + 1))
        else:
            b, c = box(), int(rng.integers(1, classes + 1))
        dets.append(Detection(b, c, float(np.round(rng.uniform(), 2))))
    return dets, gts


class TestPrecisionRecall:
    def test_exact(self):
        gt = [GroundTruthObject(BOX, 1), GroundTruthObject(BBox(20, 20, 30, 30), 2)]
        pseudo = [Detection(g.box, g.class_id, 0.9) for g in gt]
        assert pseudo_precision_recall(pseudo, gt) == (1.0, 1.0)

    def test_one_match_one_miss(self):
        gt = [GroundTruthObject(BOX, 1)]
        pseudo = [Detection(shifted(0.6), 1, 0.9), Detection(shifted(0.3), 1, 0.8)]
        assert pseudo_precision_recall(pseudo, gt) == (0.5, 1.0)

    def test_empty_pseudo(self):
        assert pseudo_precision_recall([], [GroundTruthObject(BOX, 1)]) == (1.0, 0.0)

    def test_strict_threshold(self):
        gt = [GroundTruthObject(BOX, 1)]
        d = Detection(BBox(0, 0, 10, 20), 1, 0.9)  # IoU exactly 0.5
        assert pseudo_precision_recall([d], gt) == (0.0, 0.0)

    def test_wrong_class(self):
        assert pseudo_precision_recall([Detection(BOX, 2, 0.9)], [GroundTruthObject(BOX, 1)]) == (0.0, 0.0)

    def test_no_double_claim(self):
        gt = [GroundTruthObject(BOX, 1)]
        flags = greedy_match([Detection(BOX, 1, 0.8), Detection(BOX, 1, 0.9)], gt)
        assert flags.tolist() == [False, True]

    def test_against_reference(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            dets, gts = random_scene(rng)
            got = greedy_match(dets, gts).tolist()
            ref = reference_match([(tuple(d.box), d.class_id, d.score) for d in dets], [(tuple(g.box), g.class_id) for g in gts])
            assert got == ref

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_scene(rng)
        p, r = pseudo_precision_recall(dets, gts)
        assert 0 <= p <= 1 and 0 <= r <= 1
        far = Detection(BBox(500, 500, 510, 510), 1, 0.99)
        p2, _ = pseudo_precision_recall(dets + [far], gts)
        assert p2 <= p
        if gts:
            g = gts[0]
            _, r3 = pseudo_precision_recall(dets + [Detection(g.box, g.class_id, 0.0)], gts)
            assert r3 >= r


class TestCounts:
    def test_ratio(self):
        assert boxes_per_image([[1, 2], [3, 4], [5, 6], [7, 8], [9, 10]]) == 2.0

    def test_zero(self):
        assert boxes_per_image([[], []]) == 0.0

    def test_three_images(self):
        assert boxes_per_image([[0] * 3, [0], [0] * 2]) == 2.0

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            boxes_per_image([])


class TestKLReport:
    def test_identity(self):
        d = ClassDistribution([0.5, 0.5], 3.0)
        assert class_kl_report(d, d, d) == (0.0, 0.0)

    def test_example(self):
        ref = ClassDistribution([0.5, 0.5], 100.0)
        pseudo = ClassDistribution([0.25, 0.75], 100.0)
        to_gt, to_lab = class_kl_report(pseudo, ref, ref)
        assert to_gt == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-15)
        assert to_gt == pytest.approx(0.143841, abs=1e-6) and to_lab == to_gt

    def test_disjoint(self):
        to_gt, _ = class_kl_report(ClassDistribution([0, 1], 1.0), ClassDistribution([1, 0], 1.0), ClassDistribution([0, 1], 1.0))
        assert to_gt == math.inf


class TestPredictionQuality:
    def test_background_target(self):
        gt = [GroundTruthObject(BOX, 1)]
        v = prediction_quality_ce([(Proposal(shifted(0.4), 0), [0.5, 0.5])], gt)
        assert v == pytest.approx(math.log(2), abs=1e-15)

    def test_perfect(self):
        gt = [GroundTruthObject(BOX, 2)]
        pp = [(Proposal(BOX, 0), [0, 0, 1]), (Proposal(BBox(50, 50, 60, 60), 1), [1, 0, 0])]
        assert prediction_quality_ce(pp, gt) == 0.0

    def test_empty(self):
        assert prediction_quality_ce([], []) == 0.0

    def test_no_gt(self):
        assert prediction_quality_ce([(Proposal(BOX, 0), [0.25, 0.75])], []) == pytest.approx(math.log(4))


class TestAP:
    def test_single(self):
        assert ap50([[Detection(shifted(0.7), 1, 0.9)]], [[GroundTruthObject(BOX, 1)]]) == 1.0

    def test_lower_scored_match(self):
        dets = [Detection(BBox(50, 50, 60, 60), 1, 0.9), Detection(BOX, 1, 0.5)]
        assert ap50([dets], [[GroundTruthObject(BOX, 1)]]) == 0.5

    def test_no_detections(self):
        assert ap50([[]], [[GroundTruthObject(BOX, 1)]]) == 0.0

    def test_class_without_gt_ignored(self):
        dets = [Detection(BOX, 1, 0.9), Detection(BOX, 2, 0.9)]
        assert ap50([dets], [[GroundTruthObject(BOX, 1)]]) == 1.0

    def test_against_reference(self):
        rng = np.random.default_rng(21)
        for _ in range(300):
            dets, gts = random_scene(rng, n_det=20, n_gt=8)
            if not gts:
                continue
            classes = sorted({g.class_id for g in gts})
            flags = greedy_match(dets, gts)
            aps = []
            for c in classes:
                idx = [i for i, d in enumerate(dets) if d.class_id == c]
                n = sum(g.class_id == c for g in gts)
                aps.append(reference_ap([dets[i].score for i in idx], [bool(flags[i]) for i in idx], n) if idx else 0.0)
            assert ap50([dets], [gts]) == pytest.approx(float(np.mean(aps)), abs=1e-9)

    def test_average_precision_hand_curve(self):
        # ranks: TP, FP, TP with 3 GT -> recall steps 1/3 at P=1, 2/3 at P=2/3
        assert average_precision(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1]), 3) == pytest.approx(1 / 3 + 2 / 9)
