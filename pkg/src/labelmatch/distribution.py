"""Class-distribution statistics and adaptive distribution-aware thresholds.

The thresholds pick, for every class, the score below which pseudo labels are
discarded so that the per-class pseudo-label counts reproduce the labeled
class counts scaled to the number of scored images.  With class ``c`` holding
``n_c`` boxes over ``N_l`` labeled images and a score sample drawn from ``M``
unlabeled images, the class keeps ``floor(n_c * M / N_l)`` predictions: the
threshold is the score at that 0-based position of the descending score list
and selection uses the strict predicate ``score > t``.
"""
from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    EmptyQueue,
    InvalidAlpha,
    UnsortedScores,
)

ABOVE_ALL = math.inf  # threshold that selects nothing
SELECT_ALL_EPS = 1e-9
FB_RATIO_CAP = 100.0  # boxes/img at which the foreground block takes all the mass
DEFAULT_QUEUE_CAPACITY = 10_000


@dataclass(frozen=True)
class LabeledStats:
    counts: np.ndarray  # counts[c - 1] = boxes of class c
    n_images: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or np.any(counts < 0):
            raise ValueError("counts must be a 1-d array of non-negative integers")
        if self.n_images < 1:
            raise EmptyDataset("labeled statistics need at least one image")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassDistribution:
    fg_ratios: np.ndarray
    fb_ratio: float

    def __post_init__(self):
        object.__setattr__(self, "fg_ratios", np.asarray(self.fg_ratios, dtype=float))

    def augmented(self) -> np.ndarray:
        """Concatenated foreground/background vector compared by the KL objective.

        ``[r_1 s, ..., r_C s, 1 - s]`` with ``s = min(fb, cap) / cap``, which is
        a proper distribution whenever the class ratios sum to one.
        """
        s = min(self.fb_ratio, FB_RATIO_CAP) / FB_RATIO_CAP
        return np.append(self.fg_ratios * s, 1.0 - s)


def estimate_labeled_stats(gt: Iterable, num_classes: int | None = None) -> LabeledStats:
    """Count boxes per class over ``(image, objects)`` pairs."""
    per_image = [list(objs) for _, objs in gt]
    if not per_image:
        raise EmptyDataset("no labeled images")
    ids = [o.class_id for objs in per_image for o in objs]
    if num_classes is None:
        num_classes = max(ids, default=0)
    if any(c < 1 or c > num_classes for c in ids):
        raise ValueError(f"class ids must lie in [1, {num_classes}]")
    counts = np.bincount(np.asarray(ids, dtype=np.int64) - 1, minlength=num_classes) if ids else np.zeros(num_classes, np.int64)
    return LabeledStats(counts, len(per_image))


def to_distribution(stats: LabeledStats) -> ClassDistribution:
    total = stats.total
    if total == 0:
        return ClassDistribution(np.zeros(stats.num_classes), 0.0)
    return ClassDistribution(stats.counts / total, total / stats.n_images)


def counts_distribution(counts, n_images: int) -> ClassDistribution:
    """Distribution of raw per-class counts (pseudo labels, hidden GT, ...)."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0 or n_images == 0:
        return ClassDistribution(np.zeros(len(counts)), 0.0)
    return ClassDistribution(counts / total, float(total / n_images))


def kl_divergence(p: ClassDistribution, q: ClassDistribution) -> float:
    """``KL(p || q)`` on the augmented vectors; ``inf`` when q misses p's support."""
    if len(p.fg_ratios) != len(q.fg_ratios):
        raise DimensionMismatch(f"{len(p.fg_ratios)} vs {len(q.fg_ratios)} classes")
    pa, qa = p.augmented(), q.augmented()
    mask = pa > 0
    if np.any(qa[mask] <= 0):
        return math.inf
    return max(float(np.sum(pa[mask] * np.log(pa[mask] / qa[mask]))), 0.0)


@dataclass(frozen=True)
class ThresholdSet:
    """Per-class selection thresholds ``t`` and reliable thresholds ``t_reliable``.

    Entries equal to :data:`ABOVE_ALL` select nothing.  ``class_ids`` carries
    the external id of each position (``1..C`` unless loaded from a file that
    uses other ids).
    """

    t: np.ndarray
    t_reliable: np.ndarray
    iteration_stamp: int = 0
    source_images: int = 0
    class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "t_reliable", np.asarray(self.t_reliable, dtype=float))
        if not self.class_ids:
            object.__setattr__(self, "class_ids", tuple(range(1, len(self.t) + 1)))

    @property
    def num_classes(self) -> int:
        return len(self.t)

    @classmethod
    def fixed(cls, tau: float, num_classes: int, iteration: int = 0) -> "ThresholdSet":
        t = np.full(num_classes, float(tau))
        return cls(t, t.copy(), iteration, 0)

    def to_json(self) -> dict:
        def enc(v):
            return None if v == ABOVE_ALL else float(v)

        return {
            "iteration": int(self.iteration_stamp),
            "source_images": int(self.source_images),
            "classes": [
                {"id": int(cid), "t": enc(t), "t_reliable": enc(tr)}
                for cid, t, tr in zip(self.class_ids, self.t, self.t_reliable)
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ThresholdSet":
        def dec(v):
            return ABOVE_ALL if v is None else float(v)

        classes = obj["classes"]
        return cls(
            np.array([dec(c["t"]) for c in classes], dtype=float),
            np.array([dec(c["t_reliable"]) for c in classes], dtype=float),
            int(obj.get("iteration", 0)),
            int(obj.get("source_images", 0)),
            tuple(int(c["id"]) for c in classes),
        )

    def equals(self, other: "ThresholdSet") -> bool:
        """Bit-exact comparison of both threshold arrays and metadata."""
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.t_reliable, other.t_reliable)
            and self.source_images == other.source_images
            and self.class_ids == other.class_ids
        )


def _per_class(scores, num_classes: int) -> list[np.ndarray]:
    if isinstance(scores, Mapping):
        out = [np.asarray(scores.get(c, ()), dtype=float) for c in range(1, num_classes + 1)]
    else:
        if len(scores) != num_classes:
            raise DimensionMismatch(f"expected {num_classes} score lists, got {len(scores)}")
        out = [np.asarray(s, dtype=float) for s in scores]
    return out


def _check_descending(lists: Sequence[np.ndarray]) -> None:
    for c, s in enumerate(lists, start=1):
        if s.size > 1 and np.any(s[1:] > s[:-1]):
            raise UnsortedScores(f"scores of class {c} are not sorted descending")


def _pick(s: np.ndarray, k: int) -> float:
    if k >= len(s):
        return float(s[-1]) - SELECT_ALL_EPS
    return float(s[k])


def _solve(targets: Sequence[Fraction], lists, alpha_percent: float, m: int, iteration: int) -> ThresholdSet:
    if not 0.0 <= alpha_percent <= 100.0 or not math.isfinite(alpha_percent):
        raise InvalidAlpha(f"alpha_percent must lie in [0, 100], got {alpha_percent}")
    alpha = Fraction(alpha_percent) / 100
    t = np.empty(len(targets))
    tr = np.empty(len(targets))
    for c, (target, s) in enumerate(zip(targets, lists)):
        if target <= 0 or s.size == 0:
            t[c] = tr[c] = ABOVE_ALL
            continue
        t[c] = _pick(s, math.floor(target))
        tr[c] = _pick(s, math.floor(alpha * target))
    return ThresholdSet(t, tr, iteration, m)


def solve_act(
    ref_stats: LabeledStats,
    scores,
    images_represented: int,
    alpha_percent: float,
    iteration: int = 0,
) -> ThresholdSet:
    """Thresholds matching ``ref_stats`` on a score sample from ``images_represented`` images.

    ``scores`` is either a sequence of per-class descending score arrays
    (position ``c - 1`` for class ``c``) or a mapping ``class_id -> scores``.
    """
    if images_represented < 1:
        raise EmptyDataset("score sample must represent at least one image")
    lists = _per_class(scores, ref_stats.num_classes)
    _check_descending(lists)
    targets = [Fraction(int(n) * images_represented, ref_stats.n_images) for n in ref_stats.counts]
    return _solve(targets, lists, alpha_percent, images_represented, iteration)


def solve_act_from_distribution(
    dist: ClassDistribution,
    scores,
    images_represented: int,
    alpha_percent: float,
    iteration: int = 0,
) -> ThresholdSet:
    """Same as :func:`solve_act` with an explicit reference distribution.

    The per-class target becomes ``r_c * fb_ratio * M``.
    """
    if images_represented < 1:
        raise EmptyDataset("score sample must represent at least one image")
    lists = _per_class(scores, len(dist.fg_ratios))
    _check_descending(lists)
    # recover the rationals behind float ratios so integer targets stay integers
    fb = Fraction(float(dist.fb_ratio)).limit_denominator(10**6)
    targets = [Fraction(float(r)).limit_denominator(10**6) * fb * images_represented for r in dist.fg_ratios]
    return _solve(targets, lists, alpha_percent, images_represented, iteration)


def selected_counts(scores, ts: ThresholdSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-class counts of scores strictly above ``t`` and ``t_reliable``."""
    lists = _per_class(scores, ts.num_classes)
    n_all = np.array([int(np.count_nonzero(s > t)) for s, t in zip(lists, ts.t)], dtype=np.int64)
    n_rel = np.array([int(np.count_nonzero(s > t)) for s, t in zip(lists, ts.t_reliable)], dtype=np.int64)
    return n_all, n_rel


def _score_of(item) -> tuple[int, float]:
    det = getattr(item, "detection", item)
    return det.class_id, det.score


@dataclass
class ScoresQueue:
    """FIFO window of post-NMS scores from the most recent ``capacity_images`` images.

    Per-class scores are kept sorted, so :meth:`snapshot` is cheap.  The queue
    has a single writer; take a snapshot before handing data to other threads.
    """

    num_classes: int
    capacity_images: int = DEFAULT_QUEUE_CAPACITY
    _neg: list[list[float]] = field(init=False, repr=False)
    _images: deque = field(init=False, repr=False)

    def __post_init__(self):
        if self.capacity_images < 1:
            raise ValueError("capacity_images must be >= 1")
        self._neg = [[] for _ in range(self.num_classes)]
        self._images = deque()

    @property
    def images_represented(self) -> int:
        return len(self._images)

    def push(self, detections) -> "ScoresQueue":
        """Add one image worth of post-NMS detections (or kept detections)."""
        contrib = [_score_of(d) for d in detections]
        for c, s in contrib:
            bisect.insort(self._neg[c - 1], -s)
        self._images.append(contrib)
        while len(self._images) > self.capacity_images:
            for c, s in self._images.popleft():
                lst = self._neg[c - 1]
                del lst[bisect.bisect_left(lst, -s)]
        return self

    def snapshot(self) -> list[np.ndarray]:
        """Per-class descending score arrays (copies)."""
        return [-np.array(lst, dtype=float) for lst in self._neg]


def queue_push(q: ScoresQueue, detections) -> ScoresQueue:
    return q.push(detections)


def queue_thresholds(
    q: ScoresQueue, ref_stats: LabeledStats, alpha_percent: float, iteration: int = 0
) -> ThresholdSet:
    if q.images_represented < 1:
        raise EmptyQueue("scores queue holds no images")
    return solve_act(ref_stats, q.snapshot(), q.images_represented, alpha_percent, iteration)


def sorted_scores(detections, num_classes: int) -> list[np.ndarray]:
    """Collect per-class descending score arrays from a flat iterable of detections."""
    buckets: list[list[float]] = [[] for _ in range(num_classes)]
    for d in detections:
        c, s = _score_of(d)
        buckets[c - 1].append(s)
    return [np.sort(np.array(b, dtype=float))[::-1] for b in buckets]
