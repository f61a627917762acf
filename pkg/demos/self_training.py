"""Short simulator run: fitted thresholds vs fixed thresholds.

Run: python demos/self_training.py
"""
from labelmatch import SimConfig, run_self_training

base = dict(iterations=150, unlabeled_images=600, subset_size=200)
for mode in ("offline", "online", "fixed(0.7)", "fixed(0.9)"):
    row = run_self_training(SimConfig(act_mode=mode, **base))[-1]
    print(f"{mode:>11}: kl_to_gt {row.kl_to_gt:.2e}  boxes/img {row.boxes_per_image:.2f}  "
          f"precision {row.pseudo_precision:.3f}  recall {row.pseudo_recall:.3f}  ap50 {row.ap50:.3f}")
