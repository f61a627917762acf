"""Command-line interface: ``labelmatch {act-fit,pseudo-label,diagnose,simulate}``.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import cocoio
from .distribution import (
    counts_distribution,
    kl_divergence,
    selected_counts,
    solve_act,
    solve_act_from_distribution,
    sorted_scores,
    to_distribution,
)
from .errors import InputFormatError, InvariantViolation, LabelMatchError
from .labeling import DEFAULT_T_IOU, DEFAULT_T_SCORE, partition_pseudo_labels, rplm_promote
from .metrics import greedy_match, precision_recall_from_counts
from .simworld import CSV_HEADER, load_config, run_self_training
from .suppression import DEFAULT_NMS_IOU, nms_with_clusters

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4


def thread_count(env=None) -> int:
    """Worker count from ``LM_THREADS`` (unset or 0 means one per CPU)."""
    raw = (os.environ if env is None else env).get("LM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InputFormatError(f"LM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InputFormatError("LM_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _nms_all(dets_by_image, iou_thresh):
    return {img: nms_with_clusters(d, iou_thresh) for img, d in dets_by_image.items()}


def cmd_act_fit(args) -> int:
    ann, stats = cocoio.load_annotations(args.labeled)
    dets = cocoio.load_detections(args.detections, ann, require_known_images=False)
    if not dets:
        raise InputFormatError(f"{args.detections}: no detections, cannot estimate thresholds")
    kept = _nms_all(dets, DEFAULT_NMS_IOU)
    scores = sorted_scores([k for img in sorted(kept) for k in kept[img]], ann.num_classes)
    m = len(kept)
    if args.reference_dist:
        dist = cocoio.load_reference_distribution(args.reference_dist, ann.category_ids)
        ts = solve_act_from_distribution(dist, scores, m, args.alpha)
    else:
        ts = solve_act(stats, scores, m, args.alpha)
    ts = type(ts)(ts.t, ts.t_reliable, ts.iteration_stamp, ts.source_images, ann.category_ids)
    if np.any(ts.t_reliable < ts.t):
        raise InvariantViolation("reliable threshold below selection threshold")
    cocoio.write_thresholds(args.out, ts)
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    ts = cocoio.load_thresholds(args.thresholds)
    dets = cocoio.load_detections(args.detections, category_ids=ts.class_ids)
    kept = _nms_all(dets, args.nms_iou)
    pseudo = {}
    for img in sorted(kept):
        labels = partition_pseudo_labels(kept[img], ts)
        if args.rplm:
            labels, _ = rplm_promote(labels, args.t_score, args.t_iou)
        pseudo[img] = labels
    n_all, _ = selected_counts(sorted_scores([k for v in kept.values() for k in v], ts.num_classes), ts)
    if int(n_all.sum()) != sum(len(v) for v in pseudo.values()):
        raise InvariantViolation("pseudo-label count disagrees with threshold selection count")
    cocoio.write_pseudo_annotations(args.out, pseudo, ts.class_ids)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    ann, stats = cocoio.load_annotations(args.labeled)
    pseudo_ann, pseudo = cocoio.load_pseudo_labels(args.pseudo)
    lab_index = ann.to_contiguous
    # pseudo-file class index -> labeled class index
    to_lab = {}
    for i, cid in enumerate(pseudo_ann.category_ids, start=1):
        if cid not in lab_index:
            raise InputFormatError(f"{args.pseudo}: category {cid} absent from {args.labeled}")
        to_lab[i] = lab_index[cid]
    C = ann.num_classes
    gt_objs = None
    if args.gt:
        gt_ann, _ = cocoio.load_annotations(args.gt)
        gt_index = gt_ann.to_contiguous
        gt_objs = {}
        for img, objs in gt_ann.objects_by_image().items():
            gt_objs[img] = [type(o)(o.box, lab_index[gt_ann.category_ids[o.class_id - 1]]) for o in objs]
        images = sorted(gt_objs)
        unknown = set(pseudo) - set(gt_objs)
        if unknown:
            raise InputFormatError(f"{args.pseudo}: images {sorted(unknown)[:5]} absent from {args.gt}")
        del gt_index
    else:
        images = sorted(pseudo)
    if not images:
        raise InputFormatError("no images to diagnose")

    counts = np.zeros(C, dtype=np.int64)
    n_rel = n_prom = 0
    remapped = {}
    for img in images:
        labs = []
        for lab in pseudo.get(img, []):
            d = lab.detection
            labs.append(type(lab)(type(d)(d.box, to_lab[d.class_id], d.score), lab.reliable, lab.cluster, lab.promoted_by_rplm))
        remapped[img] = labs
        for lab in labs:
            counts[lab.detection.class_id - 1] += 1
            n_rel += lab.reliable
            n_prom += lab.promoted_by_rplm
    n_pseudo = int(counts.sum())
    pseudo_dist = counts_distribution(counts, len(images))
    header = ["n_images", "n_pseudo", "n_reliable", "n_uncertain", "n_promoted", "boxes_per_image", "kl_to_labeled"]
    row = [len(images), n_pseudo, n_rel, n_pseudo - n_rel, n_prom, n_pseudo / len(images),
           kl_divergence(to_distribution(stats), pseudo_dist)]
    if gt_objs is not None:
        gt_counts = np.zeros(C, dtype=np.int64)
        tp = n_gt = 0
        for img in images:
            gts = gt_objs[img]
            for g in gts:
                gt_counts[g.class_id - 1] += 1
            tp += int(greedy_match(remapped[img], gts).sum())
            n_gt += len(gts)
        precision, recall = precision_recall_from_counts(tp, n_pseudo, n_gt)
        header += ["kl_to_gt", "pseudo_precision", "pseudo_recall"]
        row += [kl_divergence(counts_distribution(gt_counts, len(images)), pseudo_dist), precision, recall]
    cocoio.write_csv(args.out, header, [row])
    return EXIT_OK


def cmd_simulate(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = load_config(args.config, **overrides)
    rows = run_self_training(cfg, threads=thread_count())
    cocoio.write_csv(args.out, CSV_HEADER, (r.as_tuple() for r in rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labelmatch", description="Adaptive pseudo-label thresholds and self-training simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("act-fit", help="fit per-class thresholds from labeled stats and detections")
    a.add_argument("--labeled", required=True)
    a.add_argument("--detections", required=True)
    a.add_argument("--alpha", type=float, default=20.0, help="reliable share in percent (default 20)")
    a.add_argument("--out", required=True)
    a.add_argument("--reference-dist", help="external class distribution (COCO file or ratio JSON)")
    a.set_defaults(func=cmd_act_fit)

    s = sub.add_parser("pseudo-label", help="turn detections into reliable/uncertain pseudo labels")
    s.add_argument("--detections", required=True)
    s.add_argument("--thresholds", required=True)
    s.add_argument("--rplm", action="store_true", help="promote uncertain labels with strong NMS clusters")
    s.add_argument("--t-score", type=float, default=DEFAULT_T_SCORE)
    s.add_argument("--t-iou", type=float, default=DEFAULT_T_IOU)
    s.add_argument("--nms-iou", type=float, default=DEFAULT_NMS_IOU)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudo_label)

    d = sub.add_parser("diagnose", help="report KL drift, boxes/img and precision/recall of pseudo labels")
    d.add_argument("--labeled", required=True)
    d.add_argument("--pseudo", required=True)
    d.add_argument("--gt")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("simulate", help="run the synthetic self-training loop")
    m.add_argument("--config", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputFormatError as exc:
        print(f"labelmatch: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (LabelMatchError, AssertionError) as exc:
        print(f"labelmatch: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
