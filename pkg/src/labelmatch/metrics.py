"""Pseudo-label diagnostics: precision/recall, counts, KL drift, prediction CE and AP50.

Conventions: a pseudo label is a true positive when its IoU with an unclaimed
ground-truth box of the same class is strictly greater than the threshold.
With no predictions precision is 1.0; with no ground truth recall is 1.0.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .distribution import ClassDistribution, kl_divergence
from .errors import EmptyDataset
from .geometry import boxes_to_array, iou_matrix
from .losses import cross_entropy

DEFAULT_MATCH_IOU = 0.5


def _det(x):
    return getattr(x, "detection", x)


def greedy_match(dets: Sequence, gt: Sequence, iou_thresh: float = DEFAULT_MATCH_IOU) -> np.ndarray:
    """True-positive flags for ``dets`` (Detection, PseudoLabel or KeptDetection).

    Detections are visited by descending score (stable); each claims the
    unclaimed same-class ground truth with the highest IoU, if that IoU
    exceeds ``iou_thresh``.  Flags come back in input order.
    """
    dets = [_det(d) for d in dets]
    tp = np.zeros(len(dets), dtype=bool)
    if not dets or not gt:
        return tp
    ious = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array([g.box for g in gt]))
    det_cls = np.array([d.class_id for d in dets])
    gt_cls = np.array([g.class_id for g in gt])
    ious = np.where(det_cls[:, None] == gt_cls[None, :], ious, -1.0)
    claimed = np.zeros(len(gt), dtype=bool)
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    for i in order:
        row = np.where(claimed, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] > iou_thresh:
            claimed[j] = True
            tp[i] = True
    return tp


def precision_recall_from_counts(tp: int, n_pred: int, n_gt: int) -> tuple[float, float]:
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gt if n_gt else 1.0
    return precision, recall


def pseudo_precision_recall(pseudo: Sequence, gt: Sequence, iou_thresh: float = DEFAULT_MATCH_IOU) -> tuple[float, float]:
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    tp = int(greedy_match(pseudo, gt, iou_thresh).sum())
    return precision_recall_from_counts(tp, len(pseudo), len(gt))


def boxes_per_image(pseudo_by_image: Sequence[Sequence]) -> float:
    if len(pseudo_by_image) == 0:
        raise EmptyDataset("boxes_per_image needs at least one image")
    return sum(len(p) for p in pseudo_by_image) / len(pseudo_by_image)


def class_kl_report(
    pseudo_dist: ClassDistribution, gt_dist: ClassDistribution, labeled_dist: ClassDistribution
) -> tuple[float, float]:
    """``(KL(gt || pseudo), KL(labeled || pseudo))``; either may be ``inf``."""
    return kl_divergence(gt_dist, pseudo_dist), kl_divergence(labeled_dist, pseudo_dist)


def prediction_quality_ce(proposal_probs: Sequence, gt: Sequence) -> float:
    """Mean CE of each proposal's prediction against its nearest ground truth.

    The target is the nearest box's class when IoU >= 0.5, else background.
    """
    if not proposal_probs:
        return 0.0
    boxes = boxes_to_array([p.box for p, _ in proposal_probs])
    if gt:
        ious = iou_matrix(boxes, boxes_to_array([g.box for g in gt]))
        nearest = np.argmax(ious, axis=1)
        best = ious[np.arange(len(boxes)), nearest]
    else:
        nearest = np.zeros(len(boxes), dtype=int)
        best = np.zeros(len(boxes))
    total = 0.0
    for (_, probs), j, v in zip(proposal_probs, nearest, best):
        target = gt[j].class_id if v >= 0.5 else 0
        total += cross_entropy(probs, target)
    return total / len(proposal_probs)


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from per-detection scores and TP flags."""
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    precision = ctp / np.arange(1, len(hits) + 1)
    recall = ctp / n_gt
    # precision envelope, then integrate over recall steps
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap50(dets_by_image: Sequence[Sequence], gt_by_image: Sequence[Sequence], num_classes: int | None = None) -> float:
    """VOC-style AP at IoU 0.5 averaged over classes that have ground truth."""
    if len(dets_by_image) != len(gt_by_image):
        raise ValueError("detections and ground truth must cover the same images")
    per_class: dict[int, list] = {}
    n_gt: dict[int, int] = {}
    for dets, gt in zip(dets_by_image, gt_by_image):
        for g in gt:
            n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
        flags = greedy_match(dets, gt, DEFAULT_MATCH_IOU)
        for d, f in zip(dets, flags):
            d = _det(d)
            per_class.setdefault(d.class_id, []).append((d.score, f))
    return ap50_from_records(per_class, n_gt)


def ap50_from_records(per_class: dict, n_gt: dict) -> float:
    """Mean AP from pooled ``{class: [(score, tp), ...]}`` and ``{class: n_gt}``."""
    classes = [c for c, n in n_gt.items() if n > 0]
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        recs = per_class.get(c, [])
        if not recs:
            aps.append(0.0)
            continue
        s = np.array([r[0] for r in recs], dtype=float)
        f = np.array([r[1] for r in recs], dtype=bool)
        aps.append(average_precision(s, f, n_gt[c]))
    return float(np.mean(aps))
