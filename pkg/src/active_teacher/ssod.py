"""Teacher-student semi-supervised training and the iterative active loop.

The student minimizes ``L_sup + lambda * L_unsup`` by plain SGD; the teacher
is pre-trained on labels alone, then follows the student by EMA and produces
pseudo-labels (NMS, then confidence >= tau) from weakly augmented views.
``run_active_teacher`` wraps this in the label-budget loop: a random initial
half, then teacher-scored top-N additions, retraining from scratch each round.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .detection import BBox, ImagePredictions, filter_by_confidence, nms, nms_indices, smooth_l1
from .sampling import STRATEGIES, normalize_batch, rank_and_select, score_pool
from .toy import (
    AugmentConfig,
    DenseOutput,
    SyntheticDataset,
    Targets,
    ToyDetector,
    _rng,
    cell_of,
    encode_targets,
    mirror_features,
    mirror_targets,
    perturb,
    sgd_step,
)

log = logging.getLogger(__name__)

EPS = 1e-12


class BudgetError(ValueError):
    """A label budget that the pool cannot satisfy."""


@dataclass(frozen=True)
class TrainConfig:
    lambda_unsup: float = 4.0
    ema_alpha: float = 0.9996
    tau: float = 0.7
    pretrain_steps: int = 1000
    total_steps: int = 3000
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    k_iterations: int = 2
    lp_p: float = 1.0
    seed: int = 0
    lr: float = 0.1
    nms_threshold: float = 0.5
    weak_noise: float = 0.05
    strong_noise: float = 0.25
    mask_frac: float = 0.1
    empty_policy: str = "zero"

    def __post_init__(self):
        if self.lambda_unsup < 0:
            raise ValueError("lambda_unsup must be >= 0")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        for name in ("pretrain_steps", "total_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_labeled", "batch_unlabeled", "k_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lp_p < 1:
            raise ValueError("lp_p must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.nms_threshold < 1.0:
            raise ValueError("nms_threshold must lie in (0, 1)")

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.weak_noise, self.strong_noise, self.mask_frac)

    def lr_at(self, step: int) -> float:
        """Constant rate after a linear warmup from lr/10 over the first 1% of all steps."""
        warmup = max(1, (self.pretrain_steps + self.total_steps) // 100)
        if step >= warmup:
            return self.lr
        return self.lr * (0.1 + 0.9 * step / warmup)


@dataclass
class DataPool:
    all_ids: frozenset
    labeled: set = field(default_factory=set)
    iteration: int = 0

    def __post_init__(self):
        self.all_ids = frozenset(self.all_ids)
        self.labeled = set(self.labeled)
        self._check()

    @property
    def unlabeled(self) -> set:
        return set(self.all_ids - self.labeled)

    def label(self, ids: Iterable[Hashable]) -> None:
        ids = list(ids)
        already = [i for i in ids if i in self.labeled]
        if already:
            raise ValueError(f"images already labeled: {already[:5]}")
        self.labeled.update(ids)
        self._check()

    def _check(self):
        if not self.labeled <= self.all_ids:
            raise ValueError(f"unknown image ids in labeled set: {sorted(self.labeled - self.all_ids)[:5]}")


# ---------------------------------------------------------------------------
# losses on predictions
# ---------------------------------------------------------------------------


def _grid_of(out: DenseOutput) -> int:
    g = math.isqrt(out.obj_prob.shape[0])
    if g * g != out.obj_prob.shape[0]:
        raise ValueError("dense outputs must cover a square grid")
    return g


def _cls_loss(out: DenseOutput, targets: Targets) -> float:
    # targets here hold a single image (1-D obj/cls)
    q = np.clip(out.obj_prob, EPS, 1.0)
    nq = np.clip(1.0 - out.obj_prob, EPS, 1.0)
    rpn = float(np.mean(-(targets.obj * np.log(q) + (1.0 - targets.obj) * np.log(nq))))
    pos = np.flatnonzero(targets.cls >= 0)
    if pos.size == 0:
        return rpn
    roi = float(np.mean(-np.log(np.clip(out.cls_prob[pos, targets.cls[pos]], EPS, 1.0))))
    return rpn + roi


def _pred_deltas(boxes: np.ndarray, cells: np.ndarray, grid: int) -> np.ndarray:
    rows, cols = np.divmod(cells, grid)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([
        boxes[:, 0] + 0.5 * w - (cols + 0.5),
        boxes[:, 1] + 0.5 * h - (rows + 0.5),
        np.log(w),
        np.log(h),
    ], axis=1)


def supervised_loss(student_preds: Sequence[DenseOutput], truths: Sequence[Sequence[tuple[int, BBox]]]) -> tuple[float, float, float]:
    """Mean over labeled images of two-stage classification plus smooth-L1 box loss.

    Returns ``(total, cls, loc)`` where ``cls`` and ``loc`` are the image
    means of each part. Truth boxes are matched to the cell holding their
    center.
    """
    if len(student_preds) == 0:
        raise ValueError("supervised loss needs at least one labeled image")
    if len(student_preds) != len(truths):
        raise ValueError(f"{len(student_preds)} predictions for {len(truths)} truth lists")
    cls_total = loc_total = 0.0
    for out, objects in zip(student_preds, truths):
        grid = _grid_of(out)
        t = encode_targets([objects], grid)[0]
        cls_total += _cls_loss(out, t)
        pos = np.flatnonzero(t.cls >= 0)
        if pos.size:
            diff = _pred_deltas(out.boxes[pos], pos, grid) - t.reg[pos]
            loc_total += float(smooth_l1(diff).sum() / pos.size)
    n = len(student_preds)
    return (cls_total + loc_total) / n, cls_total / n, loc_total / n


@dataclass(frozen=True)
class PseudoLabel:
    """A teacher box kept for the student.

    ``category`` is None when the teacher is confident that an object is
    present (objectness >= tau) but not about its class; such entries only
    feed the proposal-stage target.
    """

    category: int | None
    bbox: BBox
    cell: int
    confidence: float
    objectness: float = 1.0


@dataclass
class PseudoLabelSet:
    image_ids: list
    labels: list[list[PseudoLabel]]

    def __len__(self):
        return len(self.labels)

    @property
    def count(self) -> int:
        """Number of class pseudo-labels."""
        return sum(p.category is not None for img in self.labels for p in img)

    def empty_fraction(self) -> float:
        if not self.labels:
            return 1.0
        return float(np.mean([all(p.category is None for p in img) for img in self.labels]))

    def to_targets(self, grid: int) -> Targets:
        return encode_targets([[(p.category, p.bbox, p.cell) for p in img] for img in self.labels], grid)


def unsupervised_loss(student_preds: Sequence[DenseOutput], pseudo: PseudoLabelSet) -> float:
    """Classification-only loss against pseudo-categories, averaged over all unlabeled images.

    Only the matched cell and the category of each pseudo-label are read;
    box coordinates never enter. Images without pseudo-labels add zero.
    """
    if len(student_preds) == 0 or not any(pseudo.labels):
        return 0.0
    if len(student_preds) != len(pseudo):
        raise ValueError(f"{len(student_preds)} predictions for {len(pseudo)} pseudo-label lists")
    total = 0.0
    for out, labels in zip(student_preds, pseudo.labels):
        if not labels:
            continue
        grid = _grid_of(out)
        obj = np.zeros(grid * grid)
        cls = np.full(grid * grid, -1)
        for p in labels:
            if not obj[p.cell]:
                obj[p.cell] = 1.0
                if p.category is not None:
                    cls[p.cell] = p.category
        total += _cls_loss(out, Targets(obj, cls, np.zeros((grid * grid, 4))))
    return total / len(student_preds)


def total_loss(sup: float, unsup: float, lam: float) -> float:
    return sup + lam * unsup


def ema_update(teacher: np.ndarray, student: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * teacher + (1 - alpha) * student``, element-wise, as a new array."""
    teacher = np.asarray(teacher, dtype=float)
    student = np.asarray(student, dtype=float)
    if teacher.shape != student.shape:
        raise ValueError(f"teacher has {teacher.size} parameters, student {student.size}")
    return alpha * teacher + (1.0 - alpha) * student


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------


def filter_raw(
    boxes: np.ndarray,
    probs: np.ndarray,
    tau: float,
    nms_threshold: float,
    grid: int,
    cells: np.ndarray | None = None,
    objectness: np.ndarray | None = None,
) -> list[PseudoLabel]:
    """NMS then confidence filtering on one image's raw detector output.

    A kept box becomes a class pseudo-label when its class confidence
    reaches ``tau``, and an objectness-only pseudo-label when just its
    objectness does. Each label is matched to the proposal cell that emitted
    it (or to its center cell when ``cells`` is not given).
    """
    if len(boxes) == 0:
        return []
    conf = probs.max(axis=1)
    cats = probs.argmax(axis=1)
    keep = nms_indices(boxes, conf, cats, nms_threshold)
    out = []
    for i in keep:
        confident_class = conf[i] >= tau
        confident_object = objectness is not None and objectness[i] >= tau
        if not (confident_class or confident_object):
            continue
        box = BBox(*boxes[i].tolist())
        cell = int(cells[i]) if cells is not None else cell_of(box, grid)
        out.append(PseudoLabel(
            int(cats[i]) if confident_class else None, box, cell, float(conf[i]),
            float(objectness[i]) if objectness is not None else 1.0,
        ))
    return out


def generate_pseudo_labels(
    teacher: np.ndarray,
    detector: ToyDetector,
    weak_features: np.ndarray,
    tau: float = 0.7,
    nms_threshold: float = 0.5,
    image_ids: Sequence | None = None,
) -> PseudoLabelSet:
    """Teacher inference on (already weakly augmented) features, then NMS and tau-filtering."""
    ids = list(image_ids) if image_ids is not None else list(range(weak_features.shape[0]))
    labels = [
        filter_raw(boxes, probs, tau, nms_threshold, detector.grid, cells, objectness)
        for cells, boxes, probs, objectness in detector.raw_detections(teacher, weak_features)
    ]
    return PseudoLabelSet(ids, labels)


def postprocess(preds: ImagePredictions, tau: float, nms_threshold: float) -> ImagePredictions:
    return ImagePredictions(preds.image_id, filter_by_confidence(nms(preds.detections, nms_threshold), tau), preds.surrogate)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _flip_batch(feats: np.ndarray, targets: Targets | None, flips: np.ndarray, grid: int):
    if not flips.any():
        return feats, targets
    feats = np.where(flips[:, None, None], mirror_features(feats, grid), feats)
    if targets is not None:
        m = mirror_targets(targets, grid)
        targets = Targets(
            np.where(flips[:, None], m.obj, targets.obj),
            np.where(flips[:, None], m.cls, targets.cls),
            np.where(flips[:, None, None], m.reg, targets.reg),
        )
    return feats, targets


@dataclass
class TrainResult:
    teacher: np.ndarray
    student: np.ndarray
    history: list[dict]


def train_semi_supervised(
    pool: DataPool,
    config: TrainConfig,
    detector: ToyDetector,
    dataset: SyntheticDataset,
    eval_fn: Callable[[np.ndarray], float] | None = None,
    stream: int = 0,
) -> TrainResult:
    """Burn-in the teacher on labels, copy it into the student, then co-train.

    Every step samples ``batch_labeled`` labeled and ``batch_unlabeled``
    unlabeled images with replacement. The student sees weak views of
    labeled images and strong views of unlabeled ones; the teacher labels the
    matching weak views. ``history`` has one row per step; ``eval_fn`` (if
    given) fills the ``ap`` field of the last row.
    """
    if not pool.labeled:
        raise ValueError("cannot train with an empty labeled pool")
    rng = _rng(config.seed, 1000 + stream)
    aug = config.augment
    grid = detector.grid
    lab_rows = dataset.rows(sorted(pool.labeled))
    unl_rows = dataset.rows(sorted(pool.unlabeled))
    use_unlabeled = config.lambda_unsup > 0 and unl_rows.size > 0

    def labeled_batch():
        idx = lab_rows[rng.integers(lab_rows.size, size=config.batch_labeled)]
        flips = rng.random(idx.size) < 0.5
        feats, targets = _flip_batch(dataset.features[idx], dataset.targets[idx], flips, grid)
        return perturb(feats, aug.weak_noise, 0.0, rng), targets

    teacher = detector.init_params(rng)
    history: list[dict] = []
    for step in range(config.pretrain_steps):
        lr = config.lr_at(step)
        feats, targets = labeled_batch()
        parts, grad = detector.loss_and_grad(teacher, feats, targets)
        teacher = _guarded_step(teacher, grad, lr, step)
        history.append(_row(step, "pretrain", lr, parts, 0))

    student = teacher.copy()
    for i in range(config.total_steps):
        step = config.pretrain_steps + i
        lr = config.lr_at(step)
        lab_feats, lab_targets = labeled_batch()
        strong = pseudo_targets = None
        n_pseudo = 0
        if use_unlabeled:
            idx = unl_rows[rng.integers(unl_rows.size, size=config.batch_unlabeled)]
            flips = rng.random(idx.size) < 0.5
            base, _ = _flip_batch(dataset.features[idx], None, flips, grid)
            weak = perturb(base, aug.weak_noise, 0.0, rng)
            strong = perturb(base, aug.strong_noise, aug.mask_frac, rng)
            pseudo = generate_pseudo_labels(teacher, detector, weak, config.tau, config.nms_threshold)
            n_pseudo = pseudo.count
            pseudo_targets = pseudo.to_targets(grid)
        parts, grad = detector.loss_and_grad(
            student, lab_feats, lab_targets, strong, pseudo_targets, config.lambda_unsup
        )
        student = _guarded_step(student, grad, lr, step)
        teacher = ema_update(teacher, student, config.ema_alpha)
        history.append(_row(step, "semi", lr, parts, n_pseudo))

    if config.total_steps == 0:
        student = teacher.copy()
    if eval_fn is not None and history:
        history[-1]["ap"] = eval_fn(teacher)
    return TrainResult(teacher, student, history)


def _guarded_step(params, grad, lr, step):
    new = sgd_step(params, grad, lr)
    if not np.all(np.isfinite(new)):
        raise FloatingPointError(f"non-finite parameters after step {step}; lower the learning rate")
    return new


def _row(step, phase, lr, parts, n_pseudo) -> dict:
    return {
        "step": step,
        "phase": phase,
        "lr": lr,
        "loss_total": parts.total,
        "loss_sup": parts.sup,
        "loss_unsup": parts.unsup,
        "loss_sup_cls": parts.sup_cls,
        "loss_sup_loc": parts.sup_loc,
        "n_pseudo": n_pseudo,
        "ap": None,
    }


# ---------------------------------------------------------------------------
# active loop
# ---------------------------------------------------------------------------


def score_unlabeled(
    teacher: np.ndarray,
    detector: ToyDetector,
    dataset: SyntheticDataset,
    ids: Sequence[int],
    config: TrainConfig,
):
    """Raw teacher inference on unlabeled scenes, post-processed and scored.

    Returns the raw score batch and its AutoNorm-normalized counterpart.
    """
    rows = dataset.rows(ids)
    preds = detector.detect_batch(teacher, dataset.features[rows], ids)
    preds = [postprocess(p, config.tau, config.nms_threshold) for p in preds]
    raw = score_pool(preds)
    return raw, normalize_batch(raw, config.lp_p, config.empty_policy)


def budget_sizes(n_total: int, budget_fractions: Sequence[float]) -> list[int]:
    sizes = [int(round(f * n_total)) for f in budget_fractions]
    if not sizes:
        raise BudgetError("need at least one budget fraction")
    if any(f <= 0 for f in budget_fractions):
        raise BudgetError(f"budget fractions must be positive: {list(budget_fractions)}")
    if sizes[-1] > n_total:
        raise BudgetError(f"budget of {sizes[-1]} images exceeds the pool of {n_total}")
    if sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise BudgetError(f"budget fractions {list(budget_fractions)} give sizes {sizes}; need strictly increasing sizes >= 1")
    return sizes


@dataclass
class ActiveTeacherResult:
    teacher: np.ndarray
    selection_log: list[dict]
    histories: list[list[dict]]
    pool: DataPool
    labeled_sizes: list[int]


def run_active_teacher(
    dataset: SyntheticDataset,
    config: TrainConfig,
    strategy: str,
    budget_fractions: Sequence[float],
    detector: ToyDetector | None = None,
    eval_fn: Callable[[np.ndarray], float] | None = None,
) -> ActiveTeacherResult:
    """Spend the label budget over ``len(budget_fractions)`` training rounds.

    Round 0 labels a seeded random sample of the first budget. Each later
    round scores the unlabeled pool with the previous teacher, labels the
    top-N images under ``strategy`` to reach the next budget, and retrains
    from scratch.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if len(budget_fractions) != config.k_iterations:
        raise BudgetError(f"k_iterations={config.k_iterations} but {len(budget_fractions)} budget fractions given")
    detector = detector or ToyDetector.for_config(dataset.config)
    sizes = budget_sizes(len(dataset), budget_fractions)

    pool = DataPool(frozenset(dataset.ids))
    init_rng = _rng(config.seed, 2000)
    first = sorted(init_rng.choice(sorted(dataset.ids), size=sizes[0], replace=False).tolist())
    pool.label(first)
    selection_log = [
        {"iteration": 0, "strategy": "initial-random", "rank": r, "image_id": i,
         "difficulty": None, "information": None, "diversity": None, "combined": None}
        for r, i in enumerate(first)
    ]

    histories = []
    labeled_sizes = [len(pool.labeled)]
    result = train_semi_supervised(pool, config, detector, dataset, None if len(sizes) > 1 else eval_fn, stream=0)
    histories.append(result.history)
    for it in range(1, len(sizes)):
        unlabeled = sorted(pool.unlabeled)
        raw_batch, batch = score_unlabeled(result.teacher, detector, dataset, unlabeled, config)
        n_new = sizes[it] - len(pool.labeled)
        chosen = rank_and_select(batch, strategy, n_new, seed=int(_rng(config.seed, 3000 + it).integers(2**31)))
        by_id = {s.image_id: s for s in batch.scores}
        raw = {s.image_id: s for s in raw_batch.scores}
        for r, i in enumerate(chosen):
            s = raw[i]
            selection_log.append({
                "iteration": it, "strategy": strategy, "rank": r, "image_id": i,
                "difficulty": s.difficulty, "information": s.information,
                "diversity": s.diversity, "combined": by_id[i].combined,
            })
        pool.label(chosen)
        pool.iteration = it
        labeled_sizes.append(len(pool.labeled))
        log.info("iteration %d: labeled %d images (%s)", it, len(pool.labeled), strategy)
        is_last = it == len(sizes) - 1
        result = train_semi_supervised(pool, config, detector, dataset, eval_fn if is_last else None, stream=it)
        histories.append(result.history)

    return ActiveTeacherResult(result.teacher, selection_log, histories, pool, labeled_sizes)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
