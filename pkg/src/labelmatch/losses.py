"""Scalar loss algebra for the mean-teacher objective, with analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, InvalidBeta, MisalignedBatch
from .labeling import AssignmentResult, BACKGROUND, IGNORE, Hard, Soft

PROB_FLOOR = 1e-12
DEFAULT_BETA = 1.0
DEFAULT_LAMBDA = 2.0


def _clamp(p):
    return np.clip(np.asarray(p, dtype=float), PROB_FLOOR, 1.0)


def cross_entropy(probs, hard_class: int) -> float:
    p = np.asarray(probs, dtype=float)
    if not 0 <= hard_class < p.size:
        raise IndexOutOfRange(f"class {hard_class} outside [0, {p.size - 1}]")
    return float(-np.log(_clamp(p[hard_class])))


def soft_cross_entropy(p_teacher, p_student) -> float:
    """``-sum_c p_t[c] log p_s[c]`` over all entries, background included."""
    pt = np.asarray(p_teacher, dtype=float)
    ps = np.asarray(p_student, dtype=float)
    if pt.shape != ps.shape:
        raise DimensionMismatch(f"{pt.shape} vs {ps.shape}")
    return float(-np.sum(pt * np.log(_clamp(ps))))


def soft_cross_entropy_grad(p_teacher, p_student) -> np.ndarray:
    """Partial derivatives w.r.t. each student probability (inside the clamp)."""
    pt = np.asarray(p_teacher, dtype=float)
    return -pt / _clamp(p_student)


def one_hot(c: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[c] = 1.0
    return v


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def smooth_l1(residual, beta: float = DEFAULT_BETA):
    if not beta > 0:
        raise InvalidBeta(f"beta must be positive, got {beta}")
    r = np.abs(np.asarray(residual, dtype=float))
    out = np.where(r < beta, 0.5 * r * r / beta, r - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(residual, beta: float = DEFAULT_BETA):
    if not beta > 0:
        raise InvalidBeta(f"beta must be positive, got {beta}")
    r = np.asarray(residual, dtype=float)
    out = np.where(np.abs(r) < beta, r / beta, np.sign(r))
    return float(out) if out.ndim == 0 else out


def box_deltas(pred, target) -> np.ndarray:
    """Center/log-size residuals of ``pred`` relative to ``target``; zero iff equal."""
    px1, py1, px2, py2 = (float(v) for v in pred)
    tx1, ty1, tx2, ty2 = (float(v) for v in target)
    pw, ph, tw, th = px2 - px1, py2 - py1, tx2 - tx1, ty2 - ty1
    return np.array(
        [
            ((px1 + px2) - (tx1 + tx2)) / (2.0 * tw),
            ((py1 + py2) - (ty1 + ty2)) / (2.0 * th),
            math.log(pw / tw),
            math.log(ph / th),
        ]
    )


@dataclass(frozen=True)
class LossBreakdown:
    cls_labeled: float = 0.0
    reg_labeled: float = 0.0
    cls_reliable: float = 0.0
    reg_reliable: float = 0.0
    soft_cls: float = 0.0
    total: float = 0.0

    @property
    def unsupervised(self) -> float:
        return self.cls_reliable + self.reg_reliable + self.soft_cls


def unsupervised_loss(
    assignments: AssignmentResult,
    student_probs: Sequence,
    student_boxes: Sequence,
    beta: float = DEFAULT_BETA,
) -> LossBreakdown:
    """Unlabeled-data loss terms, each averaged over the proposals feeding it.

    Hard and Background targets feed the classification term, Hard targets
    the regression term, Soft targets the soft classification term.
    """
    targets = list(assignments)
    if not (len(targets) == len(student_probs) == len(student_boxes)):
        raise MisalignedBatch(
            f"{len(targets)} targets, {len(student_probs)} probability rows, {len(student_boxes)} boxes"
        )
    cls, reg, soft = [], [], []
    for tgt, probs, box in zip(targets, student_probs, student_boxes):
        if isinstance(tgt, Hard):
            cls.append(cross_entropy(probs, tgt.class_id))
            reg.append(float(np.sum(smooth_l1(box_deltas(box, tgt.regression_target), beta))))
        elif isinstance(tgt, Soft):
            soft.append(soft_cross_entropy(tgt.probs, probs))
        elif tgt is BACKGROUND:
            cls.append(cross_entropy(probs, 0))
        elif tgt is IGNORE:
            continue
        else:
            raise TypeError(f"unknown assignment target {tgt!r}")

    def mean(v):
        return float(np.mean(v)) if v else 0.0

    return LossBreakdown(cls_reliable=mean(cls), reg_reliable=mean(reg), soft_cls=mean(soft))


def total_loss(labeled: tuple[float, float], unlabeled: LossBreakdown, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    cls_l, reg_l = labeled
    return LossBreakdown(
        cls_labeled=cls_l,
        reg_labeled=reg_l,
        cls_reliable=unlabeled.cls_reliable,
        reg_reliable=unlabeled.reg_reliable,
        soft_cls=unlabeled.soft_cls,
        total=cls_l + reg_l + lam * (unlabeled.cls_reliable + unlabeled.reg_reliable + unlabeled.soft_cls),
    )
