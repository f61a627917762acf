"""LabelMatch: class-distribution-aware pseudo-label thresholds for detection.

Core pieces: box geometry, cluster-tracking NMS, per-class threshold fitting
(offline and online), reliable/uncertain pseudo-label partitioning with
cluster-based promotion, label assignment, losses, evaluation metrics and a
synthetic mean-teacher self-training simulator.
"""
from .distribution import (
    ABOVE_ALL,
    ClassDistribution,
    LabeledStats,
    ScoresQueue,
    ThresholdSet,
    counts_distribution,
    estimate_labeled_stats,
    kl_divergence,
    queue_push,
    queue_thresholds,
    selected_counts,
    solve_act,
    solve_act_from_distribution,
    sorted_scores,
    to_distribution,
)
from .errors import InputFormatError, InvariantViolation, LabelMatchError
from .geometry import BBox, Detection, GroundTruthObject, iou, iou_matrix
from .labeling import (
    BACKGROUND,
    IGNORE,
    Hard,
    Proposal,
    PseudoLabel,
    RecordedHead,
    Soft,
    ignore_assign,
    iou_assign,
    partition_pseudo_labels,
    rplm_promote,
    self_assign,
)
from .losses import LossBreakdown, cross_entropy, smooth_l1, soft_cross_entropy, total_loss, unsupervised_loss
from .metrics import ap50, average_precision, greedy_match, pseudo_precision_recall
from .simworld import SimConfig, load_config, parse_config, run_self_training
from .suppression import ClusterStats, KeptDetection, nms_with_clusters

__version__ = "0.1.0"
