"""A synthetic detection world with a formula-driven teacher/student pair.

The world and detectors are explicit generative formulas, not trained
networks, so the whole mean-teacher loop runs in seconds and is bit-exactly
reproducible.  Every random draw comes from a generator seeded by a counter
tuple ``(seed, stream, ...)``; per-image work can therefore run in any order
or in parallel without changing results.
"""
from __future__ import annotations

import configparser
import math
import re
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .distribution import (
    LabeledStats,
    ScoresQueue,
    ThresholdSet,
    counts_distribution,
    estimate_labeled_stats,
    kl_divergence,
    queue_thresholds,
    solve_act,
    sorted_scores,
    to_distribution,
)
from .errors import ConfigInvalid, ParseError
from .geometry import BBox, Detection, GroundTruthObject, boxes_to_array, iou_matrix
from .labeling import (
    BACKGROUND,
    Hard,
    Proposal,
    Soft,
    ignore_assign,
    iou_assign,
    partition_pseudo_labels,
    rplm_promote,
    self_assign,
    split_reliable,
)
from .losses import cross_entropy, box_deltas, smooth_l1, total_loss, unsupervised_loss
from .metrics import ap50_from_records, greedy_match
from .suppression import nms_with_clusters

CANVAS = 1000.0
# uncertain labels only provide soft class targets, a weaker learning signal
SOFT_SIGNAL_WEIGHT = 0.5
MIN_SIDE = 1.0

# stream tags for counter-based seeding
_WORLD, _PREDICT_BATCH, _PREDICT_SUBSET, _BATCH, _SUBSET, _PROPOSALS, _LABELED = range(7)

CSV_HEADER = (
    "iteration",
    "pseudo_precision",
    "pseudo_recall",
    "boxes_per_image",
    "kl_to_gt",
    "kl_to_labeled",
    "promoted_per_image",
    "mean_student_quality",
    "ap50",
)


def rng_for(seed: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(c) for c in counters)])


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SimConfig:
    num_classes: int = 10
    class_distribution: tuple[float, ...] | None = None
    zipf_exponent: float = 1.5
    labeled_images: int = 200
    unlabeled_images: int = 2000
    objects_per_image_mean: float = 4.0
    iterations: int = 500
    refresh_interval: int = 50
    subset_size: int = 500
    resample_subset: bool = False
    alpha_percent: float = 20.0
    lam: float = 2.0
    ema_rate: float = 0.996
    t_score: float = 0.8
    t_iou: float = 0.8
    rplm_enabled: bool = True
    assignment_strategy: str = "self"
    act_mode: str = "offline"
    learning_rate: float = 0.01
    seed: int = 0
    batch_size: int = 8
    initial_quality: float = 0.5
    burn_in_gain: float = 0.45
    queue_capacity: int | None = None
    metrics_window: int = 50
    nms_iou: float = 0.5
    sigma: float = 0.5
    fp_rate: float = 2.0
    candidates_per_object: int = 6
    score_noise: float = 0.05

    def __post_init__(self):
        self.validate()

    @property
    def probabilities(self) -> np.ndarray:
        if self.class_distribution is not None:
            return np.asarray(self.class_distribution, dtype=float)
        w = np.arange(1, self.num_classes + 1, dtype=float) ** -self.zipf_exponent
        return w / w.sum()

    @property
    def fixed_threshold(self) -> float | None:
        m = re.fullmatch(r"fixed[(:]\s*([0-9.eE+-]+)\s*\)?", self.act_mode)
        return float(m.group(1)) if m else None

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigInvalid("num_classes must be >= 1")
        if self.class_distribution is not None:
            p = np.asarray(self.class_distribution, dtype=float)
            if len(p) != self.num_classes or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ConfigInvalid("class_distribution must hold num_classes probabilities summing to 1")
        if self.refresh_interval < 1:
            raise ConfigInvalid("refresh_interval (K) must be >= 1")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ConfigInvalid("ema_rate must lie in [0, 1]")
        if self.labeled_images < 1 or self.unlabeled_images < 1:
            raise ConfigInvalid("both splits need at least one image")
        if not 1 <= self.subset_size <= self.unlabeled_images:
            raise ConfigInvalid("subset_size must lie in [1, unlabeled_images]")
        if not 1 <= self.batch_size <= self.unlabeled_images:
            raise ConfigInvalid("batch_size must lie in [1, unlabeled_images]")
        if self.assignment_strategy not in ("iou", "ignore", "self"):
            raise ConfigInvalid(f"unknown assignment_strategy {self.assignment_strategy!r}")
        if self.act_mode not in ("offline", "online") and self.fixed_threshold is None:
            raise ConfigInvalid(f"act_mode must be offline, online or fixed(tau), got {self.act_mode!r}")
        if not 0.0 <= self.alpha_percent <= 100.0:
            raise ConfigInvalid("alpha_percent must lie in [0, 100]")
        if self.lam < 0 or self.learning_rate < 0 or self.objects_per_image_mean < 0:
            raise ConfigInvalid("lambda, learning_rate and objects_per_image_mean must be non-negative")
        if not 0.0 <= self.initial_quality <= 1.0 or not 0.0 <= self.initial_quality + self.burn_in_gain <= 1.0:
            raise ConfigInvalid("initial_quality and initial_quality + burn_in_gain must lie in [0, 1]")
        if self.candidates_per_object < 1 or min(self.sigma, self.fp_rate, self.score_noise) < 0:
            raise ConfigInvalid("detector parameters out of range")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise ConfigInvalid("queue_capacity must be >= 1")
        if self.iterations < 0 or self.metrics_window < 1:
            raise ConfigInvalid("iterations must be >= 0 and metrics_window >= 1")


_CONFIG_KEYS = {f.name: f for f in fields(SimConfig)}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name == "class_distribution":
        if raw.lower() in ("", "none", "zipf"):
            return None
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if name == "queue_capacity":
        return None if raw.lower() in ("", "none") else int(raw)
    default = _CONFIG_KEYS[name].default
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>", **overrides) -> SimConfig:
    """Parse the ``[simulation]`` section of an INI-style config file.

    One ``key = value`` line per :class:`SimConfig` field; ``lambda`` is
    accepted as an alias for ``lam``.  Unknown keys are rejected.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(str(exc), path=source, line=getattr(exc, "lineno", None), column=1) from exc
    if not cp.has_section("simulation"):
        raise ConfigInvalid(f"{source}: missing [simulation] section")
    values = {}
    for key, raw in cp.items("simulation"):
        name = "lam" if key == "lambda" else key
        if name not in _CONFIG_KEYS:
            raise ConfigInvalid(f"{source}: unknown key {key!r}")
        try:
            values[name] = _parse_value(name, raw)
        except ValueError as exc:
            raise ConfigInvalid(f"{source}: bad value for {key!r}: {exc}") from None
    values.update(overrides)
    return SimConfig(**values)


def load_config(path, **overrides) -> SimConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=str(path)) from exc
    return parse_config(text, source=str(path), **overrides)


def format_config(cfg: SimConfig) -> str:
    lines = ["[simulation]"]
    for f in fields(SimConfig):
        v = getattr(cfg, f.name)
        key = "lambda" if f.name == "lam" else f.name
        if v is None:
            v = "none"
        elif isinstance(v, tuple):
            v = " ".join(repr(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# world


@dataclass(frozen=True)
class Scene:
    id: int
    objects: tuple[GroundTruthObject, ...]

    def gt_array(self) -> np.ndarray:
        return boxes_to_array([o.box for o in self.objects])

    def gt_classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)


@dataclass(frozen=True)
class World:
    labeled: tuple[Scene, ...]
    unlabeled: tuple[Scene, ...]

    @property
    def scenes(self):
        return self.labeled + self.unlabeled


def _random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    size = rng.uniform(40.0, 200.0, n)
    aspect = np.exp(rng.normal(0.0, 0.25, n))
    w = np.minimum(size * aspect, CANVAS)
    h = np.minimum(size / aspect, CANVAS)
    x1 = rng.uniform(0.0, 1.0, n) * (CANVAS - w)
    y1 = rng.uniform(0.0, 1.0, n) * (CANVAS - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _scene(cfg: SimConfig, scene_id: int, split: int, index: int) -> Scene:
    rng = rng_for(cfg.seed, _WORLD, split, index)
    n = int(rng.poisson(cfg.objects_per_image_mean)) if cfg.objects_per_image_mean > 0 else 0
    classes = rng.choice(cfg.num_classes, size=n, p=cfg.probabilities) + 1
    boxes = _random_boxes(rng, n)
    objs = tuple(GroundTruthObject(BBox(*map(float, b)), int(c)) for b, c in zip(boxes, classes))
    return Scene(scene_id, objs)


def generate_world(cfg: SimConfig) -> World:
    """Labeled and unlabeled scenes drawn from one generator.

    Object counts are Poisson, classes i.i.d. from the configured
    distribution, boxes uniform on a 1000x1000 canvas with size and aspect
    jitter.  Unlabeled scene ids follow the labeled ones.
    """
    labeled = tuple(_scene(cfg, i, 0, i) for i in range(cfg.labeled_images))
    unlabeled = tuple(
        _scene(cfg, cfg.labeled_images + i, 1, i) for i in range(cfg.unlabeled_images)
    )
    return World(labeled, unlabeled)


# ---------------------------------------------------------------------------
# detectors


@dataclass(frozen=True)
class DetectorParams:
    quality: np.ndarray  # q_c per class, index c - 1
    sigma: float = 0.5
    fp_rate: float = 2.0
    candidates: int = 6
    score_noise: float = 0.05

    def __post_init__(self):
        q = np.asarray(self.quality, dtype=float)
        if np.any(q < 0) or np.any(q > 1):
            raise ValueError("quality must lie in [0, 1]")
        if min(self.sigma, self.fp_rate, self.score_noise) < 0 or self.candidates < 1:
            raise ValueError("detector parameters out of range")
        object.__setattr__(self, "quality", q)

    @classmethod
    def initial(cls, cfg: SimConfig, labeled_counts=None) -> "DetectorParams":
        """Detector after supervised burn-in.

        ``q_c = initial_quality + burn_in_gain * log(1 + n_c) / log(1 + n_max)``
        so classes with more labeled boxes start better.
        """
        q = np.full(cfg.num_classes, cfg.initial_quality)
        if labeled_counts is not None and cfg.burn_in_gain:
            n = np.asarray(labeled_counts, dtype=float)
            if n.max() > 0:
                q = q + cfg.burn_in_gain * np.log1p(n) / np.log1p(n.max())
        return cls(
            q,
            cfg.sigma,
            cfg.fp_rate,
            cfg.candidates_per_object,
            cfg.score_noise,
        )


def _paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return inter / union


def _fix_boxes(b: np.ndarray) -> np.ndarray:
    x1 = np.minimum(b[:, 0], b[:, 2])
    x2 = np.maximum(b[:, 0], b[:, 2])
    y1 = np.minimum(b[:, 1], b[:, 3])
    y2 = np.maximum(b[:, 1], b[:, 3])
    x2 = np.maximum(x2, x1 + MIN_SIDE)
    y2 = np.maximum(y2, y1 + MIN_SIDE)
    return np.stack([x1, y1, x2, y2], axis=1)


def jitter_boxes(rng: np.random.Generator, boxes: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Add independent Gaussian noise of per-row ``scale`` to every corner coordinate."""
    noise = rng.normal(0.0, 1.0, boxes.shape) * np.asarray(scale, dtype=float).reshape(-1, 1)
    return _fix_boxes(boxes + noise)


def _box_size(boxes: np.ndarray) -> np.ndarray:
    return np.sqrt((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]))


def teacher_predict(params: DetectorParams, scene: Scene, seed: int, key: tuple = ()) -> list[Detection]:
    """Raw (pre-NMS) detections of the surrogate detector on ``scene``.

    Each object of class ``c`` yields ``candidates`` boxes jittered with
    Gaussian noise of scale ``sigma * (1 - q_c) * size``; a candidate scores
    ``clip(q_c * IoU(candidate, object) + N(0, score_noise), 0, 1)`` and keeps
    class ``c`` with probability ``0.5 + 0.5 q_c`` (otherwise a uniformly
    drawn other class); that draw is made per object, so all candidates of
    one object share a class.  ``Poisson(fp_rate * (1 - mean q))`` false positives
    with ``Uniform(0, 0.6)`` scores are added.  Draws depend only on
    ``(seed, scene.id, *key)``.
    """
    rng = rng_for(seed, _PREDICT_BATCH, scene.id, *key)
    C = len(params.quality)
    q = params.quality
    out: list[Detection] = []
    if scene.objects:
        gt = scene.gt_array()
        gcls = scene.gt_classes()
        m = params.candidates
        src = np.repeat(gt, m, axis=0)
        cls = np.repeat(gcls, m)
        qc = q[cls - 1]
        scale = params.sigma * (1.0 - qc) * _box_size(src)
        cand = jitter_boxes(rng, src, scale)
        score = np.clip(qc * _paired_iou(cand, src) + rng.normal(0.0, 1.0, len(cand)) * params.score_noise, 0.0, 1.0)
        # the class decision is made once per object and shared by its candidates
        n_obj = len(gcls)
        keep_cls = rng.uniform(size=n_obj) < 0.5 + 0.5 * q[gcls - 1]
        if C > 1:
            other = rng.integers(1, C, size=n_obj)  # offset in 1..C-1
            pred = np.repeat(np.where(keep_cls, gcls, (gcls - 1 + other) % C + 1), m)
        else:
            pred = cls
        out.extend(Detection(BBox(*map(float, b)), int(c), float(s)) for b, c, s in zip(cand, pred, score))
    n_fp = int(rng.poisson(params.fp_rate * (1.0 - float(q.mean()))))
    if n_fp:
        boxes = _random_boxes(rng, n_fp)
        cls = rng.integers(1, C + 1, size=n_fp)
        score = rng.uniform(0.0, 0.6, n_fp)
        out.extend(Detection(BBox(*map(float, b)), int(c), float(s)) for b, c, s in zip(boxes, cls, score))
    return out


#: amplitude of the location-dependent texture term in :func:`teacher_head`
HEAD_TEXTURE = 0.04


def head_texture(boxes) -> np.ndarray:
    """Smooth deterministic stand-in for image content under each box, in [0, 1]."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    cx, cy = 0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])
    w, h = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    return 0.5 + 0.25 * np.sin(cx / 23.0 + w / 11.0) + 0.25 * np.cos(cy / 19.0 + h / 13.0)


def head_probs(params: DetectorParams, boxes: np.ndarray, scene: Scene, texture: float | None = None) -> np.ndarray:
    """Vectorized :func:`teacher_head` over an ``(n, 4)`` array of proposal boxes."""
    amp = HEAD_TEXTURE if texture is None else texture
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n, C = len(boxes), len(params.quality)
    tex = (head_texture(boxes) - 0.5) * (2.0 * amp)
    if scene.objects and n:
        ious = iou_matrix(boxes, scene.gt_array())
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(n), best]
        cls = scene.gt_classes()[best]
    else:
        best_iou = np.zeros(n)
        cls = np.ones(n, dtype=np.int64)
    fg = best_iou >= 0.5
    p_true = np.clip(params.quality[cls - 1] * best_iou, 0.05, 0.95)
    rest = 1.0 - p_true
    probs = np.empty((n, C + 1))
    if C > 1:
        bg_fg = rest * (0.8 + tex)
        other = (rest - bg_fg) / (C - 1)
    else:
        bg_fg = rest
        other = np.zeros(n)
    bg_bg = 0.9 + tex
    probs[:, 0] = np.where(fg, bg_fg, bg_bg)
    probs[:, 1:] = np.where(fg, other, (1.0 - bg_bg) / C)[:, None]
    rows = np.flatnonzero(fg)
    probs[rows, cls[rows]] = p_true[rows]
    return probs / probs.sum(axis=1, keepdims=True)


def teacher_head(params: DetectorParams, proposal: Proposal, scene: Scene, texture: float | None = None) -> np.ndarray:
    """Class posterior (background first) the detector head emits for a proposal.

    Near an object (IoU >= 0.5) the true class gets ``clip(q_c * IoU, 0.05,
    0.95)``, about 0.8 of the remainder goes to background and the rest is
    shared by the other classes.  Elsewhere background gets about 0.9 and the
    classes share the rest.  ``texture`` scales a small location-dependent
    shift of the background share; 0 gives the plain formula.
    """
    return head_probs(params, np.array([tuple(proposal.box)]), scene, texture)[0]


def ema_update(teacher: DetectorParams, student: DetectorParams, rate: float) -> DetectorParams:
    """``f_t <- rate * f_t + (1 - rate) * f_s`` for every scalar field."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")

    def mix(a, b):
        return rate * a + (1.0 - rate) * b

    return DetectorParams(
        quality=np.clip(mix(teacher.quality, student.quality), 0.0, 1.0),
        sigma=mix(teacher.sigma, student.sigma),
        fp_rate=mix(teacher.fp_rate, student.fp_rate),
        candidates=int(round(mix(teacher.candidates, student.candidates))),
        score_noise=mix(teacher.score_noise, student.score_noise),
    )


def student_step(student: DetectorParams, quality_signal, eta: float, regression_signal=None) -> DetectorParams:
    """Surrogate gradient step driven by pseudo-label quality.

    ``q_c <- q_c + eta * F1_c * (1 - q_c)`` and
    ``sigma <- sigma * (1 - 0.5 * eta * mean F1)``.  ``quality_signal`` is a
    scalar or per-class F1 (NaN for classes with no evidence, treated as 0).
    ``regression_signal`` drives ``sigma`` and defaults to ``quality_signal``;
    the loop passes the F1 of the regression (hard) targets only.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    f1 = np.broadcast_to(np.asarray(quality_signal, dtype=float), student.quality.shape)
    f1 = np.nan_to_num(f1, nan=0.0)
    q = student.quality + eta * f1 * (1.0 - student.quality)
    reg = f1 if regression_signal is None else np.asarray(regression_signal, dtype=float)
    reg = reg[~np.isnan(reg)] if reg.ndim else (reg if not np.isnan(reg) else np.float64(0.0))
    mean_reg = float(np.mean(reg)) if np.size(reg) else 0.0
    sigma = student.sigma * max(0.0, 1.0 - 0.5 * eta * mean_reg)
    return replace(student, quality=np.clip(q, 0.0, 1.0), sigma=sigma)


# ---------------------------------------------------------------------------
# self-training loop


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    pseudo_precision: float
    pseudo_recall: float
    boxes_per_image: float
    kl_to_gt: float
    kl_to_labeled: float
    promoted_per_image: float
    mean_student_quality: float
    ap50: float

    def as_tuple(self):
        return tuple(getattr(self, k) for k in CSV_HEADER)


@dataclass
class Trace:
    """Optional diagnostics collected by :func:`run_self_training`.

    ``uncertain`` rows are ``(iteration, mean_score, mean_iou, iou_with_gt)``
    for every uncertain pseudo label, where ``iou_with_gt`` is the best IoU
    with any ground-truth object.  ``groups`` accumulates, over proposal
    groups matched to one uncertain label, how many groups carry identical
    targets and how many within-group pairs are identical.
    """

    uncertain: list = field(default_factory=list)
    groups_total: int = 0
    groups_identical: int = 0
    pairs_total: int = 0
    pairs_identical: int = 0
    losses: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    teacher_quality: list = field(default_factory=list)
    student_quality: list = field(default_factory=list)
    gt_boxes_per_image: float = 0.0


@dataclass
class _IterRecord:
    n_images: int
    pseudo_counts: np.ndarray
    gt_counts: np.ndarray
    tp: int
    n_pseudo: int
    n_gt: int
    promoted: int
    ap_records: dict
    ap_gt: dict


def _class_f1(tp_c, pred_c, gt_c) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = 2.0 * tp_c / (pred_c + gt_c)
    return np.where(pred_c + gt_c > 0, f1, np.nan)


def _iou_with_gt(labels, scene: Scene) -> list[float]:
    """Best IoU of each label with any ground-truth object (localization quality)."""
    if not scene.objects:
        return [0.0] * len(labels)
    ious = iou_matrix(boxes_to_array([l.detection.box for l in labels]), scene.gt_array())
    return [float(v) for v in ious.max(axis=1)]


def _make_proposals(rng: np.random.Generator, labels, n_random: int = 20, copies: int = 4) -> list[Proposal]:
    boxes = [np.zeros((0, 4))]
    if labels:
        src = np.repeat(boxes_to_array([l.detection.box for l in labels]), copies, axis=0)
        boxes.append(jitter_boxes(rng, src, 0.1 * _box_size(src)))
    boxes.append(_random_boxes(rng, n_random))
    arr = np.concatenate(boxes)
    return [Proposal(BBox(*map(float, b)), i) for i, b in enumerate(arr)]


def _group_stats(trace: Trace, result, n_reliable: int) -> None:
    groups: dict[int, list] = {}
    for tgt, m in zip(result.targets, result.matched):
        if m is not None and m >= n_reliable:
            groups.setdefault(m, []).append(tgt)
    for members in groups.values():
        if len(members) < 2:
            continue
        trace.groups_total += 1
        if all(t == members[0] for t in members[1:]):
            trace.groups_identical += 1
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                trace.pairs_total += 1
                trace.pairs_identical += members[i] == members[j]


def _labeled_loss(student: DetectorParams, scene: Scene, rng: np.random.Generator) -> tuple[float, float]:
    if not scene.objects:
        return 0.0, 0.0
    gt = scene.gt_array()
    boxes = jitter_boxes(rng, gt, student.sigma * 0.2 * _box_size(gt))
    cls_terms, reg_terms = [], []
    for i, (b, obj) in enumerate(zip(boxes, scene.objects)):
        p = Proposal(BBox(*map(float, b)), i)
        cls_terms.append(cross_entropy(teacher_head(student, p, scene), obj.class_id))
        reg_terms.append(float(np.sum(smooth_l1(box_deltas(p.box, obj.box)))))
    return float(np.mean(cls_terms)), float(np.mean(reg_terms))


def run_self_training(cfg: SimConfig, threads: int = 1, trace: Trace | None = None) -> list[MetricsRow]:
    """Run the mean-teacher loop and return one :class:`MetricsRow` per iteration.

    Each row aggregates the last ``metrics_window`` iterations.  ``threads``
    parallelizes the per-image predict/NMS step only; results do not depend
    on it.
    """
    world = generate_world(cfg)
    C = cfg.num_classes
    stats = estimate_labeled_stats([(s.id, s.objects) for s in world.labeled], C)
    labeled_dist = to_distribution(stats)
    student = DetectorParams.initial(cfg, stats.counts)
    teacher = student
    unl = world.unlabeled
    fixed_tau = cfg.fixed_threshold
    queue = ScoresQueue(C, cfg.queue_capacity or cfg.subset_size) if cfg.act_mode == "online" else None
    subset_idx = rng_for(cfg.seed, _SUBSET, 0).choice(len(unl), cfg.subset_size, replace=False)
    window: deque[_IterRecord] = deque(maxlen=cfg.metrics_window)
    rows: list[MetricsRow] = []
    ts: ThresholdSet | None = None
    if trace is not None:
        trace.gt_boxes_per_image = sum(len(s.objects) for s in unl) / len(unl)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def predict_all(params, scenes, key):
        def one(sc):
            return nms_with_clusters(teacher_predict(params, sc, cfg.seed, key), cfg.nms_iou)

        if pool is None:
            return [one(sc) for sc in scenes]
        return list(pool.map(one, scenes))

    try:
        for it in range(cfg.iterations):
            if cfg.act_mode == "offline" and it % cfg.refresh_interval == 0:
                if cfg.resample_subset and it > 0:
                    subset_idx = rng_for(cfg.seed, _SUBSET, it).choice(len(unl), cfg.subset_size, replace=False)
                kept_sub = predict_all(teacher, [unl[i] for i in subset_idx], (_PREDICT_SUBSET, it))
                flat = [k for img in kept_sub for k in img]
                ts = solve_act(stats, sorted_scores(flat, C), cfg.subset_size, cfg.alpha_percent, it)

            batch_idx = rng_for(cfg.seed, _BATCH, it).choice(len(unl), cfg.batch_size, replace=False)
            batch = [unl[i] for i in batch_idx]
            kept = predict_all(teacher, batch, (_PREDICT_BATCH, it))

            if queue is not None:
                for img in kept:
                    queue.push(img)
                ts = queue_thresholds(queue, stats, cfg.alpha_percent, it)
            elif fixed_tau is not None:
                ts = ThresholdSet.fixed(fixed_tau, C, it)
            if trace is not None:
                trace.thresholds.append(ts)

            pseudo_counts = np.zeros(C, dtype=np.int64)
            gt_counts = np.zeros(C, dtype=np.int64)
            tp_c = np.zeros(C)
            tp_rel_c = np.zeros(C)
            rel_counts = np.zeros(C)
            tp_total = n_pseudo = n_gt = promoted = 0
            ap_records: dict = {}
            ap_gt: dict = {}
            unsup = []
            for scene, kept_img in zip(batch, kept):
                labels = partition_pseudo_labels(kept_img, ts)
                if cfg.rplm_enabled:
                    labels, n_prom = rplm_promote(labels, cfg.t_score, cfg.t_iou)
                    promoted += n_prom
                gt = list(scene.objects)
                flags = greedy_match(labels, gt)
                for lab, f in zip(labels, flags):
                    c = lab.detection.class_id - 1
                    pseudo_counts[c] += 1
                    tp_c[c] += f
                    if lab.reliable:
                        rel_counts[c] += 1
                        tp_rel_c[c] += f
                for g in gt:
                    gt_counts[g.class_id - 1] += 1
                    ap_gt[g.class_id] = ap_gt.get(g.class_id, 0) + 1
                tp_total += int(flags.sum())
                n_pseudo += len(labels)
                n_gt += len(gt)
                for k, f in zip(kept_img, greedy_match(kept_img, gt)):
                    ap_records.setdefault(k.detection.class_id, []).append((k.detection.score, bool(f)))

                reliable, uncertain = split_reliable(labels)
                if trace is not None and uncertain:
                    trace.uncertain.extend(
                        (it, u.cluster.mean_score, u.cluster.mean_iou, v)
                        for u, v in zip(uncertain, _iou_with_gt(uncertain, scene))
                    )

                prng = rng_for(cfg.seed, _PROPOSALS, it, scene.id)
                proposals = _make_proposals(prng, reliable + uncertain)
                pboxes = boxes_to_array([p.box for p in proposals])
                if cfg.assignment_strategy == "iou":
                    result = iou_assign(proposals, reliable + uncertain)
                elif cfg.assignment_strategy == "ignore":
                    result = ignore_assign(proposals, reliable, uncertain)
                else:
                    t_probs = head_probs(teacher, pboxes, scene)
                    result = self_assign(proposals, reliable, uncertain, lambda p: t_probs[p.id])
                if trace is not None:
                    _group_stats(trace, result, len(reliable))
                s_probs = head_probs(student, pboxes, scene)
                unsup.append(unsupervised_loss(result, s_probs, [p.box for p in proposals]))

            if trace is not None:
                lscene = world.labeled[int(rng_for(cfg.seed, _LABELED, it).integers(len(world.labeled)))]
                lab_loss = _labeled_loss(student, lscene, rng_for(cfg.seed, _LABELED, it, 1))
                u = unsup[0].__class__(
                    cls_reliable=float(np.mean([x.cls_reliable for x in unsup])),
                    reg_reliable=float(np.mean([x.reg_reliable for x in unsup])),
                    soft_cls=float(np.mean([x.soft_cls for x in unsup])),
                )
                trace.losses.append(total_loss(lab_loss, u, cfg.lam))

            window.append(
                _IterRecord(len(batch), pseudo_counts, gt_counts, tp_total, n_pseudo, n_gt, promoted, ap_records, ap_gt)
            )
            rows.append(_window_row(it, window, labeled_dist, student))

            w = SOFT_SIGNAL_WEIGHT
            f1 = _class_f1(
                tp_rel_c + w * (tp_c - tp_rel_c),
                rel_counts + w * (pseudo_counts - rel_counts),
                gt_counts.astype(float),
            )
            f1_reg = _class_f1(tp_rel_c, rel_counts, gt_counts.astype(float))
            # regression only learns from classes that produced hard targets
            f1_reg = np.where(rel_counts > 0, f1_reg, np.nan) if np.any(rel_counts > 0) else np.zeros(1)
            student = student_step(student, f1, cfg.learning_rate, f1_reg)
            teacher = ema_update(teacher, student, cfg.ema_rate)
            if trace is not None:
                trace.teacher_quality.append(teacher.quality.copy())
                trace.student_quality.append(student.quality.copy())
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def _window_row(it: int, window, labeled_dist, student: DetectorParams) -> MetricsRow:
    n_images = sum(r.n_images for r in window)
    pseudo = sum(r.pseudo_counts for r in window)
    gtc = sum(r.gt_counts for r in window)
    tp = sum(r.tp for r in window)
    n_pseudo = sum(r.n_pseudo for r in window)
    n_gt = sum(r.n_gt for r in window)
    promoted = sum(r.promoted for r in window)
    precision = tp / n_pseudo if n_pseudo else 1.0
    recall = tp / n_gt if n_gt else 1.0
    pseudo_dist = counts_distribution(pseudo, n_images)
    gt_dist = counts_distribution(gtc, n_images)
    recs: dict = {}
    ngt: dict = {}
    for r in window:
        for c, lst in r.ap_records.items():
            recs.setdefault(c, []).extend(lst)
        for c, n in r.ap_gt.items():
            ngt[c] = ngt.get(c, 0) + n
    return MetricsRow(
        iteration=it,
        pseudo_precision=precision,
        pseudo_recall=recall,
        boxes_per_image=n_pseudo / n_images,
        kl_to_gt=kl_divergence(gt_dist, pseudo_dist),
        kl_to_labeled=kl_divergence(labeled_dist, pseudo_dist),
        promoted_per_image=promoted / n_images,
        mean_student_quality=float(student.quality.mean()),
        ap50=ap50_from_records(recs, ngt),
    )
