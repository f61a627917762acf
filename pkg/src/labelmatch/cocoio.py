"""COCO-format annotation, detection and pseudo-label files.

Category ids are remapped to the contiguous range ``1..C`` (sorted by
original id) on load; :attr:`AnnotationFile.category_ids` maps back.
Floats are written with Python's shortest round-trip repr, so values read
back bit-exactly.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

from .distribution import ClassDistribution, LabeledStats, ThresholdSet, estimate_labeled_stats
from .errors import DanglingReference, NonPositiveBox, ParseError, ScoreOutOfRange
from .geometry import BBox, Detection, GroundTruthObject
from .labeling import PseudoLabel
from .suppression import ClusterStats


@dataclass(frozen=True)
class AnnotationFile:
    images: tuple[dict, ...]
    annotations: tuple[dict, ...]
    categories: tuple[dict, ...]

    @property
    def category_ids(self) -> tuple[int, ...]:
        """Original category id for each contiguous class ``1..C``."""
        return tuple(sorted(int(c["id"]) for c in self.categories))

    @property
    def to_contiguous(self) -> dict[int, int]:
        return {cid: i for i, cid in enumerate(self.category_ids, start=1)}

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def image_ids(self) -> tuple[int, ...]:
        return tuple(int(im["id"]) for im in self.images)

    def objects_by_image(self) -> dict[int, list[GroundTruthObject]]:
        remap = self.to_contiguous
        out: dict[int, list[GroundTruthObject]] = {i: [] for i in self.image_ids}
        for a in self.annotations:
            out[int(a["image_id"])].append(GroundTruthObject(BBox.from_xywh(*a["bbox"]), remap[int(a["category_id"])]))
        return out


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=path) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno, column=exc.colno) from exc


def _require(obj, key, path, what):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{what} is missing {key!r}", path=path)
    return obj[key]


def _int(obj, key, path, what) -> int:
    v = _require(obj, key, path, what)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise ParseError(f"{what}: {key!r} must be an integer, got {v!r}", path=path)
    return int(v)


def _check_bbox(bbox, path, what) -> None:
    if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
        raise ParseError(f"{what}: bbox must be [x, y, w, h]", path=path)
    if not all(math.isfinite(v) for v in bbox):
        raise NonPositiveBox(f"{path}: {what}: non-finite bbox {bbox}")
    if bbox[2] <= 0 or bbox[3] <= 0:
        raise NonPositiveBox(f"{path}: {what}: bbox width and height must be positive, got {bbox}")


def parse_annotations(obj, path="<annotations>") -> AnnotationFile:
    images = _require(obj, "images", path, "annotation file")
    annotations = obj.get("annotations", [])
    categories = _require(obj, "categories", path, "annotation file")
    if not all(isinstance(x, list) for x in (images, annotations, categories)):
        raise ParseError("images, annotations and categories must be arrays", path=path)
    image_ids = set()
    for im in images:
        image_ids.add(_int(im, "id", path, "image"))
    cat_ids = set()
    for c in categories:
        cid = _int(c, "id", path, "category")
        if cid in cat_ids:
            raise ParseError(f"duplicate category id {cid}", path=path)
        cat_ids.add(cid)
    for i, a in enumerate(annotations):
        what = f"annotation #{i}"
        img = _int(a, "image_id", path, what)
        cat = _int(a, "category_id", path, what)
        _check_bbox(_require(a, "bbox", path, what), path, what)
        if img not in image_ids:
            raise DanglingReference(f"{path}: {what} references missing image {img}")
        if cat not in cat_ids:
            raise DanglingReference(f"{path}: {what} references missing category {cat}")
    return AnnotationFile(tuple(images), tuple(annotations), tuple(categories))


def load_annotations(path) -> tuple[AnnotationFile, LabeledStats]:
    """Parse a COCO annotation file and count its boxes per (remapped) class."""
    ann = parse_annotations(_read_json(path), str(path))
    stats = estimate_labeled_stats(list(ann.objects_by_image().items()), ann.num_classes)
    return ann, stats


def parse_detections(records, category_ids: Sequence[int], image_ids=None, path="<detections>") -> dict[int, list[Detection]]:
    if not isinstance(records, list):
        raise ParseError("detection file must be a JSON array", path=path)
    remap = {cid: i for i, cid in enumerate(category_ids, start=1)}
    known = None if image_ids is None else set(image_ids)
    out: dict[int, list[Detection]] = {} if known is None else {i: [] for i in image_ids}
    for i, r in enumerate(records):
        what = f"detection #{i}"
        img = _int(r, "image_id", path, what)
        cat = _int(r, "category_id", path, what)
        bbox = _require(r, "bbox", path, what)
        score = _require(r, "score", path, what)
        _check_bbox(bbox, path, what)
        if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ScoreOutOfRange(f"{path}: {what}: score {score} outside [0, 1]")
        if known is not None and img not in known:
            raise DanglingReference(f"{path}: {what} references unknown image {img}")
        if cat not in remap:
            raise DanglingReference(f"{path}: {what} references unknown category {cat}")
        out.setdefault(img, []).append(Detection(BBox.from_xywh(*bbox), remap[cat], float(score)))
    return out


def load_detections(path, ann: AnnotationFile | None = None, *, category_ids=None, require_known_images=True) -> dict[int, list[Detection]]:
    """Group a COCO results file by image, converting boxes to corners.

    Category ids resolve against ``ann`` (or an explicit ``category_ids``
    list).  Image ids must appear in ``ann`` unless ``require_known_images``
    is false, which is the case for detections on unlabeled images.
    """
    if category_ids is None:
        if ann is None:
            raise ValueError("need an annotation file or explicit category ids")
        category_ids = ann.category_ids
    image_ids = ann.image_ids if (ann is not None and require_known_images) else None
    return parse_detections(_read_json(path), category_ids, image_ids, str(path))


def pseudo_annotations(pseudo_by_image: Mapping[int, Sequence[PseudoLabel]], category_ids: Sequence[int], images=None, category_names=None) -> dict:
    """COCO document for pseudo labels, with the extended per-label fields."""
    if images is None:
        images = [{"id": int(i)} for i in sorted(pseudo_by_image)]
    names = category_names or {}
    anns = []
    next_id = 1
    for img in sorted(pseudo_by_image):
        for lab in pseudo_by_image[img]:
            d = lab.detection
            x, y, w, h = d.box.to_xywh()
            anns.append(
                {
                    "id": next_id,
                    "image_id": int(img),
                    "category_id": int(category_ids[d.class_id - 1]),
                    "bbox": [x, y, w, h],
                    "area": w * h,
                    "iscrowd": 0,
                    "score": d.score,
                    "reliable": bool(lab.reliable),
                    "mean_score": lab.cluster.mean_score,
                    "mean_iou": lab.cluster.mean_iou,
                    "promoted": bool(lab.promoted_by_rplm),
                }
            )
            next_id += 1
    cats = [{"id": int(c), "name": names.get(int(c), str(c))} for c in category_ids]
    return {"images": list(images), "annotations": anns, "categories": cats}


def write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def write_pseudo_annotations(path, pseudo_by_image, category_ids, images=None, category_names=None) -> None:
    write_json(path, pseudo_annotations(pseudo_by_image, category_ids, images, category_names))


def load_pseudo_labels(path) -> tuple[AnnotationFile, dict[int, list[PseudoLabel]]]:
    """Read a pseudo-label file written by :func:`write_pseudo_annotations`."""
    obj = _read_json(path)
    ann = parse_annotations(obj, str(path))
    remap = ann.to_contiguous
    out: dict[int, list[PseudoLabel]] = {i: [] for i in ann.image_ids}
    for a in ann.annotations:
        det = Detection(BBox.from_xywh(*a["bbox"]), remap[int(a["category_id"])], float(a.get("score", 1.0)))
        cluster = ClusterStats(float(a.get("mean_score", det.score)), float(a.get("mean_iou", 0.0)), 1)
        promoted = bool(a.get("promoted", False))
        out[int(a["image_id"])].append(PseudoLabel(det, bool(a.get("reliable", True)) or promoted, cluster, promoted))
    return ann, out


def load_thresholds(path) -> ThresholdSet:
    obj = _read_json(path)
    try:
        return ThresholdSet.from_json(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad threshold file: {exc}", path=str(path)) from exc


def write_thresholds(path, ts: ThresholdSet) -> None:
    write_json(path, ts.to_json())


def load_reference_distribution(path, category_ids: Sequence[int]) -> ClassDistribution:
    """External reference class distribution.

    Either a COCO annotation file (class distribution of its boxes) or
    ``{"boxes_per_image": float, "classes": [{"id": int, "ratio": float}]}``.
    Classes absent from the file get ratio 0.
    """
    obj = _read_json(path)
    if isinstance(obj, dict) and "annotations" in obj:
        ann = parse_annotations(obj, str(path))
        remap = {cid: i for i, cid in enumerate(category_ids)}
        counts = [0] * len(category_ids)
        for a in ann.annotations:
            cid = int(a["category_id"])
            if cid not in remap:
                raise DanglingReference(f"{path}: category {cid} not among the labeled categories")
            counts[remap[cid]] += 1
        total = sum(counts)
        n_img = max(len(ann.images), 1)
        if total == 0:
            return ClassDistribution([0.0] * len(counts), 0.0)
        return ClassDistribution([c / total for c in counts], total / n_img)
    try:
        fb = float(obj["boxes_per_image"])
        ratios = {int(c["id"]): float(c["ratio"]) for c in obj["classes"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad reference distribution: {exc}", path=str(path)) from exc
    unknown = set(ratios) - set(category_ids)
    if unknown:
        raise DanglingReference(f"{path}: unknown categories {sorted(unknown)}")
    total = sum(ratios.values())
    if total <= 0 or fb < 0:
        raise ParseError("ratios must sum to a positive value and boxes_per_image be >= 0", path=str(path))
    return ClassDistribution([ratios.get(c, 0.0) / total for c in category_ids], fb)


def format_float(v: float) -> str:
    if v == math.inf:
        return "inf"
    return repr(float(v))


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, float) else v for v in row])
