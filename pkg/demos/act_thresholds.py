"""Fit per-class thresholds on a toy long-tailed detector and compare with a fixed cut.

Run: python demos/act_thresholds.py
"""
import numpy as np

from labelmatch import BBox, Detection, LabeledStats, nms_with_clusters, partition_pseudo_labels, rplm_promote
from labelmatch import selected_counts, solve_act, sorted_scores

rng = np.random.default_rng(0)
num_classes, n_images = 3, 400
# labeled set: 100 images with 300 / 60 / 15 objects per class
labeled = LabeledStats(np.array([300, 60, 15]), 100)

# rare classes get systematically lower scores, as a biased teacher would give
scale = np.array([0.9, 0.6, 0.4])
dets_by_image = []
for _ in range(n_images):
    img = []
    for c in range(num_classes):
        for _ in range(rng.poisson(4 * labeled.counts[c] / 100 + 1)):
            xy = rng.uniform(0, 200, 2)
            img.append(Detection(BBox(*xy, *(xy + 30)), c + 1, float(scale[c] * rng.beta(2, 2))))
    dets_by_image.append(img)

kept_by_image = [nms_with_clusters(img, 0.5) for img in dets_by_image]
flat = [k.detection for kept in kept_by_image for k in kept]
lists = sorted_scores(flat, num_classes)

ts = solve_act(labeled, lists, n_images, alpha_percent=20)
act_counts, _ = selected_counts(lists, ts)
fixed = np.array([sum(s > 0.7) for s in lists])

print("class  labeled/img  act t    act/img  fixed(0.7)/img")
for c in range(num_classes):
    print(f"{c + 1:>5}  {labeled.counts[c] / 100:>11.2f}  {ts.t[c]:.4f}  {act_counts[c] / n_images:>7.2f}  "
          f"{fixed[c] / n_images:>14.2f}")

labels = [lab for kept in kept_by_image for lab in partition_pseudo_labels(kept, ts)]
labels, promoted = rplm_promote(labels)
print(f"{len(labels)} pseudo labels, {sum(l.reliable for l in labels)} reliable, {promoted} promoted by cluster stats")
