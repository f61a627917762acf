import json

import numpy as np
import pytest

from conftest import FIXTURES
from labelmatch import cocoio
from labelmatch.distribution import ABOVE_ALL, ThresholdSet
from labelmatch.errors import DanglingReference, NonPositiveBox, ParseError, ScoreOutOfRange
from labelmatch.geometry import BBox, Detection
from labelmatch.labeling import PseudoLabel
from labelmatch.suppression import ClusterStats


def write(tmp_path, obj, name="f.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


def doc(annotations, categories=({"id": 1, "name": "a"},)):
    return {"images": [{"id": 1, "width": 10, "height": 10}], "annotations": list(annotations), "categories": list(categories)}


class TestLoadAnnotations:
    def test_fixture_counts(self):
        ann, stats = cocoio.load_annotations(FIXTURES / "labeled.json")
        assert stats.counts.tolist() == [2, 1] and stats.n_images == 2
        assert ann.category_ids == (1, 2)

    def test_empty_annotations(self, tmp_path):
        _, stats = cocoio.load_annotations(write(tmp_path, doc([])))
        assert stats.counts.tolist() == [0] and stats.n_images == 1

    def test_missing_image(self, tmp_path):
        with pytest.raises(DanglingReference):
            cocoio.load_annotations(write(tmp_path, doc([{"id": 1, "image_id": 5, "category_id": 1, "bbox": [0, 0, 1, 1]}])))

    def test_missing_category(self, tmp_path):
        with pytest.raises(DanglingReference):
            cocoio.load_annotations(write(tmp_path, doc([{"id": 1, "image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1]}])))

    def test_non_positive_box(self, tmp_path):
        with pytest.raises(NonPositiveBox):
            cocoio.load_annotations(write(tmp_path, doc([{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 0, 1]}])))

    def test_syntax_error_position(self, tmp_path):
        with pytest.raises(ParseError) as info:
            cocoio.load_annotations(write(tmp_path, '{\n  "images": [\n    oops\n]}'))
        assert info.value.line == 3 and info.value.column == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            cocoio.load_annotations(tmp_path / "nope.json")

    def test_bad_id_type(self, tmp_path):
        with pytest.raises(ParseError):
            cocoio.load_annotations(write(tmp_path, {"images": [{"id": "x"}], "categories": []}))

    def test_remap_is_bijection(self, tmp_path):
        cats = [{"id": 17, "name": "b"}, {"id": 3, "name": "a"}, {"id": 90, "name": "c"}]
        anns = [{"id": i, "image_id": 1, "category_id": c, "bbox": [0, 0, 1, 1]} for i, c in enumerate([17, 17, 90])]
        ann, stats = cocoio.load_annotations(write(tmp_path, doc(anns, cats)))
        assert ann.category_ids == (3, 17, 90)
        assert ann.to_contiguous == {3: 1, 17: 2, 90: 3}
        assert {ann.category_ids[v - 1]: v for v in ann.to_contiguous.values()} == ann.to_contiguous
        assert stats.counts.tolist() == [0, 2, 1]


class TestLoadDetections:
    def test_conversion(self, tmp_path):
        ann, _ = cocoio.load_annotations(FIXTURES / "labeled.json")
        p = write(tmp_path, [{"image_id": 1, "category_id": 1, "bbox": [5, 5, 10, 10], "score": 0.5}])
        assert cocoio.load_detections(p, ann)[1][0].box == BBox(5, 5, 15, 15)

    def test_score_range(self, tmp_path):
        ann, _ = cocoio.load_annotations(FIXTURES / "labeled.json")
        p = write(tmp_path, [{"image_id": 1, "category_id": 1, "bbox": [5, 5, 10, 10], "score": 1.2}])
        with pytest.raises(ScoreOutOfRange):
            cocoio.load_detections(p, ann)

    def test_fixture_groups(self):
        ann, _ = cocoio.load_annotations(FIXTURES / "labeled.json")
        groups = cocoio.load_detections(FIXTURES / "detections_small.json", ann)
        assert sorted(groups) == [1, 2] and [len(groups[1]), len(groups[2])] == [2, 2]

    def test_unknown_image(self):
        ann, _ = cocoio.load_annotations(FIXTURES / "labeled.json")
        with pytest.raises(DanglingReference):
            cocoio.load_detections(FIXTURES / "detections.json", ann)
        assert len(cocoio.load_detections(FIXTURES / "detections.json", ann, require_known_images=False)) == 4

    def test_unknown_category(self, tmp_path):
        p = write(tmp_path, [{"image_id": 1, "category_id": 4, "bbox": [5, 5, 10, 10], "score": 0.5}])
        with pytest.raises(DanglingReference):
            cocoio.load_detections(p, category_ids=(1, 2))

    def test_not_array(self, tmp_path):
        with pytest.raises(ParseError):
            cocoio.load_detections(write(tmp_path, {"a": 1}), category_ids=(1,))


def labels():
    rng = np.random.default_rng(0)
    out = {}
    for img in (4, 9):
        labs = []
        for _ in range(3):
            x, y = rng.uniform(0, 100, 2)
            w, h = rng.uniform(1, 50, 2)
            rel = bool(rng.integers(0, 2))
            labs.append(PseudoLabel(Detection(BBox(x, y, x + w, y + h), int(rng.integers(1, 3)), float(rng.uniform())),
                                    rel, ClusterStats(float(rng.uniform()), float(rng.uniform()), 2), rel and bool(rng.integers(0, 2))))
        out[img] = labs
    return out


class TestPseudoAnnotations:
    def test_round_trip(self, tmp_path):
        src = labels()
        p = tmp_path / "pseudo.json"
        cocoio.write_pseudo_annotations(p, src, (5, 8))
        ann, back = cocoio.load_pseudo_labels(p)
        assert ann.category_ids == (5, 8)
        for img in src:
            for a, b in zip(src[img], back[img]):
                assert a.detection.score == b.detection.score
                assert a.detection.class_id == b.detection.class_id
                assert (a.reliable, a.promoted_by_rplm) == (b.reliable, b.promoted_by_rplm)
                assert a.cluster.mean_score == b.cluster.mean_score and a.cluster.mean_iou == b.cluster.mean_iou
                # corners pass through x + w, so they may move by one ulp
                assert np.allclose(tuple(a.detection.box), tuple(b.detection.box), rtol=1e-15, atol=0)

    def test_bbox_floats_bit_exact(self, tmp_path):
        src = labels()
        p = tmp_path / "pseudo.json"
        cocoio.write_pseudo_annotations(p, src, (5, 8))
        written = [a["bbox"] for a in json.loads(p.read_text())["annotations"]]
        expect = [l.detection.box.to_xywh() for img in sorted(src) for l in src[img]]
        assert written == expect

    def test_loads_as_plain_annotations(self, tmp_path):
        p = tmp_path / "pseudo.json"
        cocoio.write_pseudo_annotations(p, labels(), (5, 8))
        _, stats = cocoio.load_annotations(p)
        assert stats.total == 6 and stats.n_images == 2

    def test_empty(self, tmp_path):
        p = tmp_path / "pseudo.json"
        cocoio.write_pseudo_annotations(p, {}, (1, 2))
        obj = json.loads(p.read_text())
        assert obj["annotations"] == [] and len(obj["categories"]) == 2
        assert cocoio.load_pseudo_labels(p)[1] == {}


class TestThresholdFiles:
    def test_round_trip(self, tmp_path):
        ts = ThresholdSet([0.1 + 0.2, ABOVE_ALL], [0.7, ABOVE_ALL], 3, 12, (2, 7))
        p = tmp_path / "t.json"
        cocoio.write_thresholds(p, ts)
        assert json.loads(p.read_text())["classes"][1]["t"] is None
        assert cocoio.load_thresholds(p).equals(ts)

    def test_bad(self, tmp_path):
        with pytest.raises(ParseError):
            cocoio.load_thresholds(write(tmp_path, {"classes": [{"id": 1}]}))


class TestReferenceDistribution:
    def test_ratio_file(self, tmp_path):
        p = write(tmp_path, {"boxes_per_image": 2.0, "classes": [{"id": 2, "ratio": 3}, {"id": 1, "ratio": 1}]})
        d = cocoio.load_reference_distribution(p, (1, 2))
        assert d.fg_ratios.tolist() == [0.25, 0.75] and d.fb_ratio == 2.0

    def test_coco_file(self):
        d = cocoio.load_reference_distribution(FIXTURES / "gt_unlabeled.json", (1, 2))
        assert d.fg_ratios.tolist() == [4 / 7, 3 / 7] and d.fb_ratio == 7 / 4

    def test_unknown(self, tmp_path):
        p = write(tmp_path, {"boxes_per_image": 2.0, "classes": [{"id": 3, "ratio": 1}]})
        with pytest.raises(DanglingReference):
            cocoio.load_reference_distribution(p, (1, 2))


class TestCsv:
    def test_format(self, tmp_path):
        p = tmp_path / "r.csv"
        cocoio.write_csv(p, ["a", "b", "c"], [[1, 0.1 + 0.2, float("inf")]])
        assert p.read_text() == "a,b,c\n1,0.30000000000000004,inf\n"
