"""Independent slow reference implementations used to freeze expected values."""
from __future__ import annotations

import itertools
import math

import numpy as np


def raster_iou(a, b, scale=1):
    """IoU by counting unit cells of a rasterized grid (integer corner boxes)."""
    lo = int(min(a[0], b[0], a[1], b[1])) * scale
    hi = int(max(a[2], b[2], a[3], b[3])) * scale
    n = hi - lo
    ga = np.zeros((n, n), bool)
    gb = np.zeros((n, n), bool)
    ga[int(a[1] * scale) - lo:int(a[3] * scale) - lo, int(a[0] * scale) - lo:int(a[2] * scale) - lo] = True
    gb[int(b[1] * scale) - lo:int(b[3] * scale) - lo, int(b[0] * scale) - lo:int(b[2] * scale) - lo] = True
    union = np.logical_or(ga, gb).sum()
    return np.logical_and(ga, gb).sum() / union


def plain_iou(a, b):
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = w * h
    if inter == 0:
        return 0.0
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def reference_nms(items, thresh):
    """Quadratic greedy NMS on (box, class, score) tuples.

    Returns a list of (kept_index, [suppressed indices]) in no particular order.
    """
    out = []
    for c in sorted({it[1] for it in items}):
        idx = [i for i, it in enumerate(items) if it[1] == c]
        alive = list(idx)
        while alive:
            best = alive[0]
            for i in alive:
                if items[i][2] > items[best][2]:
                    best = i
            sup = [i for i in alive if i != best and plain_iou(items[best][0], items[i][0]) >= thresh]
            out.append((best, sup))
            alive = [i for i in alive if i != best and i not in sup]
    return out


def kl(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            if qi == 0:
                return math.inf
            total += pi * math.log(pi / qi)
    return total


def augmented(counts, n_images, cap=100.0):
    counts = [float(c) for c in counts]
    tot = sum(counts)
    s = min(tot / n_images, cap) / cap
    if tot == 0:
        return [0.0] * len(counts) + [1.0]
    return [c / tot * s for c in counts] + [1.0 - s]


def brute_force_thresholds(ref_counts, ref_images, lists, m):
    """Exhaustive search over per-class selection counts minimizing the augmented KL.

    Returns the first minimizing count vector and its objective value.
    """
    ref = augmented(ref_counts, ref_images)
    best, best_val = None, math.inf
    ranges = [range(len(l) + 1) for l in lists]
    for ks in itertools.product(*ranges):
        val = kl(ref, augmented(ks, m))
        if val < best_val - 1e-15:
            best, best_val = ks, val
    return (list(best) if best is not None else None), best_val


def reference_ap(scores, tp, n_gt):
    """All-points AP: area under the monotone precision envelope, summed over recall steps."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits = 0
    points = []
    for k, i in enumerate(order, start=1):
        hits += tp[i]
        points.append((hits / n_gt, hits / k))
    ap, prev_r = 0.0, 0.0
    for j, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[j:])
            prev_r = r
    return ap


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at vector ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def reference_match(dets, gts, thresh=0.5):
    """Greedy score-ordered matching on (box, class, score) / (box, class) tuples."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])
    claimed = set()
    tp = [False] * len(dets)
    for i in order:
        best, best_v = None, thresh
        for j, g in enumerate(gts):
            if j in claimed or g[1] != dets[i][1]:
                continue
            v = plain_iou(dets[i][0], g[0])
            if v > best_v:
                best, best_v = j, v
        if best is not None:
            claimed.add(best)
            tp[i] = True
    return tp


def grid_min_kl(ref_counts, ref_images, lengths, m, cap=100.0):
    """Minimum augmented KL over every per-class selection count ``0..len_c``.

    Loops over all but the last two classes and evaluates those two as a
    dense grid, so instances up to a few million count vectors stay fast.
    """
    ref = np.asarray(augmented(ref_counts, ref_images, cap))
    lens = list(lengths)
    best = math.inf
    head, tail = lens[:-2], lens[-2:]
    if len(lens) == 1:
        head, tail = [], [lens[0], 0]
    a = np.arange(tail[0] + 1, dtype=float)[:, None]
    b = np.arange(tail[1] + 1, dtype=float)[None, :]
    single = len(lens) == 1
    for ks in itertools.product(*[range(n + 1) for n in head]):
        fixed = np.array(ks, dtype=float)
        tot = fixed.sum() + a + (0.0 if single else b)
        s = np.minimum(tot / m, cap) / cap
        with np.errstate(divide="ignore", invalid="ignore"):
            vec = [fixed[i] / tot * s for i in range(len(fixed))] + [a / tot * s]
            if not single:
                vec.append(b / tot * s)
        vec.append(1.0 - s)
        val = np.zeros_like(tot + 0.0)
        for r, q in zip(ref, vec):
            q = np.broadcast_to(q, val.shape)
            if r > 0:
                with np.errstate(divide="ignore", invalid="ignore"):
                    term = np.where(q > 0, r * np.log(r / q), np.inf)
                val = val + term
        best = min(best, float(np.nanmin(np.where(np.isnan(val), np.inf, val))))
    return best
