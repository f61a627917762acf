"""Reliable/uncertain pseudo labels, cluster-based promotion, and label assignment.

Three assignment strategies map student proposals to training targets:

* :func:`iou_assign` treats every pseudo label as a hard target (the
  conventional baseline),
* :func:`ignore_assign` hides proposals that land on uncertain labels,
* :func:`self_assign` asks the teacher head for a soft target per proposal.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .distribution import ThresholdSet
from .errors import MissingClassThreshold, OracleFailure
from .geometry import BBox, Detection, boxes_to_array, iou_matrix
from .suppression import ClusterStats, KeptDetection

DEFAULT_FG_THRESH = 0.5
DEFAULT_BG_THRESH = 0.5
DEFAULT_T_SCORE = 0.8
DEFAULT_T_IOU = 0.8


@dataclass(frozen=True)
class PseudoLabel:
    detection: Detection
    reliable: bool
    cluster: ClusterStats
    promoted_by_rplm: bool = False

    def __post_init__(self):
        if self.promoted_by_rplm and not self.reliable:
            raise ValueError("a promoted label must be reliable")


@dataclass(frozen=True)
class Proposal:
    box: BBox
    id: int


def soft_label(probs) -> np.ndarray:
    """Validate a ``C + 1`` probability vector (index 0 is background)."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("soft label needs at least background plus one class")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("soft label must be non-negative and sum to 1")
    return p


@dataclass(frozen=True)
class Hard:
    class_id: int
    regression_target: BBox


@dataclass(frozen=True)
class Soft:
    probs: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Soft) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


class _Marker:
    def __init__(self, name):
        self._name = name

    def __repr__(self):
        return self._name


BACKGROUND = _Marker("Background")
IGNORE = _Marker("Ignore")

Target = Union[Hard, Soft, _Marker]


@dataclass
class AssignmentResult:
    """One target per proposal, in input order.

    ``matched[i]`` is the index of the pseudo label proposal ``i`` was matched
    to (position in reliable-then-uncertain order) or ``None``.
    """

    targets: list
    matched: list

    def __len__(self):
        return len(self.targets)

    def __iter__(self):
        return iter(self.targets)

    def __getitem__(self, i):
        return self.targets[i]


def partition_pseudo_labels(kept: Sequence[KeptDetection], ts: ThresholdSet) -> list[PseudoLabel]:
    """Split post-NMS detections: above ``t_reliable`` reliable, above ``t`` uncertain, else dropped."""
    out = []
    for k in kept:
        c = k.detection.class_id
        if c < 1 or c > ts.num_classes:
            raise MissingClassThreshold(f"no threshold for class {c}")
        s = k.detection.score
        if s > ts.t_reliable[c - 1]:
            out.append(PseudoLabel(k.detection, True, k.cluster))
        elif s > ts.t[c - 1]:
            out.append(PseudoLabel(k.detection, False, k.cluster))
    return out


def rplm_promote(
    labels: Sequence[PseudoLabel], t_score: float = DEFAULT_T_SCORE, t_iou: float = DEFAULT_T_IOU
) -> tuple[list[PseudoLabel], int]:
    """Promote uncertain labels whose cluster has mean score > t_score and mean IoU > t_iou.

    Returns the updated labels and the number promoted.
    """
    if not (0.0 <= t_score <= 1.0 and 0.0 <= t_iou <= 1.0):
        raise ValueError("t_score and t_iou must lie in [0, 1]")
    out, promoted = [], 0
    for lab in labels:
        if not lab.reliable and lab.cluster.mean_score > t_score and lab.cluster.mean_iou > t_iou:
            out.append(replace(lab, reliable=True, promoted_by_rplm=True))
            promoted += 1
        else:
            out.append(lab)
    return out, promoted


def split_reliable(labels: Sequence[PseudoLabel]) -> tuple[list[PseudoLabel], list[PseudoLabel]]:
    rel = [l for l in labels if l.reliable]
    unc = [l for l in labels if not l.reliable]
    return rel, unc


def _best_match(proposals: Sequence[Proposal], labels: Sequence[PseudoLabel]):
    """Per-proposal (argmax label index, max IoU); first index wins ties."""
    if not labels or not proposals:
        return np.full(len(proposals), -1), np.zeros(len(proposals))
    ious = iou_matrix(boxes_to_array([p.box for p in proposals]), boxes_to_array([l.detection.box for l in labels]))
    best = np.argmax(ious, axis=1)
    return best, ious[np.arange(len(proposals)), best]


def _check_thresh(fg_thresh, bg_thresh):
    if fg_thresh < bg_thresh:
        raise ValueError("fg_thresh must be >= bg_thresh")


def _hard(label: PseudoLabel) -> Hard:
    return Hard(label.detection.class_id, label.detection.box)


def iou_assign(
    proposals: Sequence[Proposal],
    labels: Sequence[PseudoLabel],
    fg_thresh: float = DEFAULT_FG_THRESH,
    bg_thresh: float = DEFAULT_BG_THRESH,
) -> AssignmentResult:
    """Max-IoU assignment treating every label as a hard target."""
    _check_thresh(fg_thresh, bg_thresh)
    best, best_iou = _best_match(proposals, labels)
    targets, matched = [], []
    for b, v in zip(best, best_iou):
        if b >= 0 and v >= fg_thresh:
            targets.append(_hard(labels[b]))
            matched.append(int(b))
        elif v < bg_thresh:
            targets.append(BACKGROUND)
            matched.append(None)
        else:
            targets.append(IGNORE)
            matched.append(None)
    return AssignmentResult(targets, matched)


def _split_assign(proposals, reliable, uncertain, fg_thresh, bg_thresh, on_uncertain):
    _check_thresh(fg_thresh, bg_thresh)
    labels = list(reliable) + list(uncertain)
    n_rel = len(reliable)
    best, best_iou = _best_match(proposals, labels)
    targets, matched = [], []
    for p, b, v in zip(proposals, best, best_iou):
        if b >= 0 and v >= fg_thresh:
            targets.append(_hard(labels[b]) if b < n_rel else on_uncertain(p))
            matched.append(int(b))
        elif v < bg_thresh:
            targets.append(BACKGROUND)
            matched.append(None)
        else:
            targets.append(IGNORE)
            matched.append(None)
    return AssignmentResult(targets, matched)


def ignore_assign(
    proposals: Sequence[Proposal],
    reliable_labels: Sequence[PseudoLabel],
    uncertain_labels: Sequence[PseudoLabel],
    fg_thresh: float = DEFAULT_FG_THRESH,
    bg_thresh: float = DEFAULT_BG_THRESH,
) -> AssignmentResult:
    """Hard targets from reliable labels; proposals matched to uncertain ones are ignored."""
    return _split_assign(proposals, reliable_labels, uncertain_labels, fg_thresh, bg_thresh, lambda p: IGNORE)


TeacherHead = Callable[[Proposal], np.ndarray]


def self_assign(
    proposals: Sequence[Proposal],
    reliable_labels: Sequence[PseudoLabel],
    uncertain_labels: Sequence[PseudoLabel],
    head: TeacherHead,
    fg_thresh: float = DEFAULT_FG_THRESH,
    bg_thresh: float = DEFAULT_BG_THRESH,
) -> AssignmentResult:
    """Proposal self-assignment.

    Proposals matched to an uncertain label get the teacher head's own
    prediction on that proposal as a soft target; the head is never
    consulted for other proposals.
    """

    def soft(p):
        try:
            probs = head(p)
        except OracleFailure:
            raise
        except Exception as exc:  # noqa: BLE001 - surfaced as an oracle error
            raise OracleFailure(f"teacher head failed on proposal {p.id}: {exc}") from exc
        return Soft(soft_label(probs))

    return _split_assign(proposals, reliable_labels, uncertain_labels, fg_thresh, bg_thresh, soft)


class RecordedHead:
    """Teacher head backed by a table of recorded predictions keyed by proposal id."""

    def __init__(self, table: Mapping[int, Sequence[float]]):
        self._table = {int(k): np.asarray(v, dtype=float) for k, v in table.items()}

    def __call__(self, proposal: Proposal) -> np.ndarray:
        try:
            return self._table[proposal.id]
        except KeyError:
            raise OracleFailure(f"no recorded prediction for proposal {proposal.id}") from None
