"""Per-class greedy NMS that remembers what each kept box suppressed."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidThreshold
from .geometry import Detection, boxes_to_array, iou_matrix

DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True)
class ClusterStats:
    """Statistics of one NMS cluster (the kept box plus the boxes it suppressed).

    ``mean_score`` averages over every member including the kept box;
    ``mean_iou`` averages the IoU of each suppressed box with the kept box,
    so a singleton cluster has ``mean_iou == 0``.
    """

    mean_score: float
    mean_iou: float
    member_count: int


@dataclass(frozen=True)
class KeptDetection:
    detection: Detection
    cluster: ClusterStats
    members: tuple[int, ...] = ()  # input indices of suppressed detections


def nms_with_clusters(dets: list[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> list[KeptDetection]:
    """Greedy NMS run independently per class.

    A remaining detection is suppressed by the current pick when their IoU is
    ``>= iou_thresh``.  Score ties resolve to the earlier input index.  The
    result is ordered by class id, then descending score, then input order.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise InvalidThreshold(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    classes = np.array([d.class_id for d in dets])
    scores = np.array([d.score for d in dets], dtype=float)
    boxes = boxes_to_array([d.box for d in dets])

    out: list[KeptDetection] = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        # stable sort on -score keeps input order among ties
        idx = idx[np.argsort(-scores[idx], kind="stable")]
        ious = iou_matrix(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            alive[i] = False
            hit = np.flatnonzero(alive & (ious[i] >= iou_thresh))
            alive[hit] = False
            members = idx[hit]
            n = 1 + len(hit)
            # min() guards against the float sum drifting past the max
            mean_score = min(float((scores[idx[i]] + scores[members].sum()) / n), float(scores[idx[i]]))
            mean_iou = float(ious[i, hit].mean()) if len(hit) else 0.0
            out.append(
                KeptDetection(
                    detection=dets[idx[i]],
                    cluster=ClusterStats(mean_score, mean_iou, n),
                    members=tuple(int(m) for m in members),
                )
            )
    return out
