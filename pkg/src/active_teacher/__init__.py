"""Teacher-student semi-supervised detection with metric-driven label selection.

The library pieces work on plain detection outputs (``detection``,
``sampling``, ``coco_io``); the training loop and label-budget driver
(``ssod``) run on a small synthetic grid detector (``toy``).
"""

from .detection import BBox, Detection, ImagePredictions, evaluate_ap, filter_by_confidence, iou, nms, smooth_l1
from .sampling import (
    METRICS,
    STRATEGIES,
    SampleScore,
    ScoreBatch,
    combine_lp,
    difficulty_score,
    diversity_score,
    information_score,
    normalize_batch,
    rank_and_select,
    score_image,
)
from .ssod import (
    BudgetError,
    DataPool,
    PseudoLabel,
    PseudoLabelSet,
    TrainConfig,
    ema_update,
    generate_pseudo_labels,
    run_active_teacher,
    supervised_loss,
    train_semi_supervised,
    unsupervised_loss,
)
from .toy import SyntheticDataset, ToyConfig, ToyDetector, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Detection",
    "ImagePredictions",
    "evaluate_ap",
    "filter_by_confidence",
    "iou",
    "nms",
    "smooth_l1",
    "METRICS",
    "STRATEGIES",
    "SampleScore",
    "ScoreBatch",
    "combine_lp",
    "difficulty_score",
    "diversity_score",
    "information_score",
    "normalize_batch",
    "rank_and_select",
    "score_image",
    "BudgetError",
    "DataPool",
    "PseudoLabel",
    "PseudoLabelSet",
    "TrainConfig",
    "ema_update",
    "generate_pseudo_labels",
    "run_active_teacher",
    "supervised_loss",
    "train_semi_supervised",
    "unsupervised_loss",
    "SyntheticDataset",
    "ToyConfig",
    "ToyDetector",
    "generate_dataset",
]
