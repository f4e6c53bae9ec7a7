"""Active-sampling metrics (difficulty, information, diversity) and AutoNorm.

Scores are computed per image from post-NMS, post-threshold teacher
predictions. AutoNorm divides each metric by its maximum over the scored
pool and folds the three normalized values into one number with an L-p norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from .detection import ImagePredictions

METRICS = ("difficulty", "information", "diversity")
STRATEGIES = METRICS + ("autonorm", "random")
EMPTY_POLICIES = ("zero", "max")


@dataclass(frozen=True)
class SampleScore:
    image_id: Hashable
    difficulty: float
    information: float
    diversity: float
    combined: float = 0.0
    n_boxes: int | None = 0  # None when unknown (e.g. read back from a file)

    def metric(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class ScoreBatch:
    scores: list[SampleScore]
    normalized: bool = False
    # per-metric maxima of the raw scores; kept after normalization
    raw_maxima: dict[str, float] = field(default_factory=dict)

    @property
    def maxima(self) -> dict[str, float]:
        if not self.scores:
            return {m: 0.0 for m in METRICS}
        return {m: max(s.metric(m) for s in self.scores) for m in METRICS}

    def __len__(self):
        return len(self.scores)

    def ids(self) -> list[Hashable]:
        return [s.image_id for s in self.scores]


def difficulty_score(preds: ImagePredictions) -> float:
    """Mean per-box Shannon entropy (natural log) of the class distribution.

    Zero-probability entries contribute nothing. An image without boxes scores 0.
    """
    if not preds.detections:
        return 0.0
    probs = np.stack([d.probs for d in preds.detections])
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return float(-plogp.sum() / len(preds.detections))


def information_score(preds: ImagePredictions) -> float:
    return float(sum(d.confidence for d in preds.detections))


def diversity_score(preds: ImagePredictions) -> int:
    return len({d.category for d in preds.detections})


def score_image(preds: ImagePredictions) -> SampleScore:
    return SampleScore(
        image_id=preds.image_id,
        difficulty=difficulty_score(preds),
        information=information_score(preds),
        diversity=float(diversity_score(preds)),
        n_boxes=len(preds.detections),
    )


def score_pool(pool: Sequence[ImagePredictions]) -> ScoreBatch:
    return ScoreBatch([score_image(p) for p in pool])


def combine_lp(normalized: Sequence[float], p: float = 1.0) -> float:
    """L-p norm of the normalized metric triple. ``p=1`` is a plain sum."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if p == 1:
        return float(sum(normalized))
    return float(sum(s**p for s in normalized) ** (1.0 / p))


def normalize_batch(batch: ScoreBatch, p: float = 1.0, empty_policy: str = "zero") -> ScoreBatch:
    """Divide every metric by its batch maximum and fill ``combined``.

    A metric whose maximum is 0 normalizes to 0 everywhere. With
    ``empty_policy="max"`` images without any detection are treated as
    maximally uncertain: all their normalized metrics become 1.
    """
    if not batch.scores:
        raise ValueError("cannot normalize an empty score batch")
    if empty_policy not in EMPTY_POLICIES:
        raise ValueError(f"empty_policy must be one of {EMPTY_POLICIES}, got {empty_policy!r}")
    maxima = batch.maxima
    out = []
    for s in batch.scores:
        if empty_policy == "max" and s.n_boxes == 0:
            vals = {m: 1.0 for m in METRICS}
        else:
            vals = {m: (s.metric(m) / maxima[m] if maxima[m] > 0 else 0.0) for m in METRICS}
        out.append(replace(s, **vals, combined=combine_lp([vals[m] for m in METRICS], p)))
    return ScoreBatch(out, normalized=True, raw_maxima=maxima)


def _random_keys(ids: Sequence[Hashable], seed: int) -> dict[Hashable, float]:
    rng = np.random.default_rng(seed)
    ordered = sorted(ids)
    return dict(zip(ordered, rng.random(len(ordered))))


def strategy_keys(batch: ScoreBatch, strategy: str, seed: int = 0) -> dict[Hashable, float]:
    """Per-image value that ``rank_and_select`` sorts on (descending)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy == "random":
        return _random_keys(batch.ids(), seed)
    if strategy == "autonorm":
        if not batch.normalized:
            raise ValueError("autonorm ranking needs a normalized batch (call normalize_batch first)")
        return {s.image_id: s.combined for s in batch.scores}
    return {s.image_id: s.metric(strategy) for s in batch.scores}


def rank(batch: ScoreBatch, strategy: str, seed: int = 0) -> list[Hashable]:
    """All image ids, best first; ties go to the smaller image id."""
    keys = strategy_keys(batch, strategy, seed)
    return sorted(keys, key=lambda i: (-keys[i], i))


def rank_and_select(batch: ScoreBatch, strategy: str, n: int, seed: int = 0) -> list[Hashable]:
    """Top-``n`` image ids under ``strategy``.

    ``random`` draws a seeded uniform sample without replacement; every other
    strategy is a deterministic descending sort.
    """
    if n > len(batch):
        raise ValueError(f"cannot select n={n} images from a batch of {len(batch)}")
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    return rank(batch, strategy, seed)[:n]


def max_difficulty(num_classes: int) -> float:
    return math.log(num_classes)
