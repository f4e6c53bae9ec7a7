"""Seeded synthetic experiments and their on-disk outputs.

One seed drives everything for a run: the training corpus (stream 0), the
held-out evaluation corpus (stream 1), the initial random label set, and the
training randomness. Two strategies run with the same seed therefore share
the corpus and the initial half of the budget.

Output layout for ``write_run``::

    out/summary.csv                         strategy,seed,final_ap,labeled_images,labeled_objects
    out/<strategy>/seed<k>/selection.jsonl  one record per labeled image
    out/<strategy>/seed<k>/history.csv      one row per training step, all rounds
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, dump_config
from .detection import COCO_IOU_THRESHOLDS, evaluate_ap
from .sampling import STRATEGIES
from .ssod import DataPool, budget_sizes, postprocess, run_active_teacher, train_semi_supervised
from .toy import SyntheticDataset, ToyDetector, _rng, generate_dataset

log = logging.getLogger(__name__)

EVAL_TAU = 0.0
HISTORY_FIELDS = (
    "round", "step", "phase", "lr", "loss_total", "loss_sup", "loss_unsup",
    "loss_sup_cls", "loss_sup_loc", "n_pseudo", "ap",
)
SUMMARY_FIELDS = ("strategy", "seed", "final_ap", "labeled_images", "labeled_objects")


def evaluate_params(params: np.ndarray, detector: ToyDetector, test: SyntheticDataset, nms_threshold: float = 0.5,
                    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> float:
    """AP of a parameter vector on held-out scenes, after NMS."""
    preds = detector.detect_batch(params, test.features, test.ids)
    preds = [postprocess(p, EVAL_TAU, nms_threshold) for p in preds]
    return evaluate_ap(preds, test.truths(), iou_thresholds)


def corpora(config: ExperimentConfig, seed: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    train = generate_dataset(config.data.n_scenes, config.data, seed=seed, stream=0)
    test = generate_dataset(config.n_test, config.data, seed=seed, stream=1)
    return train, test


@dataclass
class SeedResult:
    strategy: str
    seed: int
    final_ap: float
    labeled_images: int
    labeled_objects: int
    selection_log: list[dict]
    histories: list[list[dict]]
    teacher: np.ndarray

    def summary_row(self) -> dict:
        return {
            "strategy": self.strategy, "seed": self.seed, "final_ap": self.final_ap,
            "labeled_images": self.labeled_images, "labeled_objects": self.labeled_objects,
        }


def run_seed(config: ExperimentConfig, strategy: str, seed: int) -> SeedResult:
    """Full label-budget loop for one strategy and seed, evaluated on held-out scenes."""
    train, test = corpora(config, seed)
    detector = ToyDetector.for_config(config.data)
    tc = replace(config.train, seed=seed)
    result = run_active_teacher(
        train, tc, strategy, config.budget_fractions, detector,
        eval_fn=lambda p: evaluate_params(p, detector, test, tc.nms_threshold),
    )
    final_ap = result.histories[-1][-1]["ap"] if result.histories[-1] else evaluate_params(result.teacher, detector, test)
    rows = train.rows(sorted(result.pool.labeled))
    n_objects = int(train.targets.obj[rows].sum())
    log.info("strategy=%s seed=%d final AP=%.4f", strategy, seed, final_ap)
    return SeedResult(strategy, seed, float(final_ap), len(result.pool.labeled), n_objects,
                      result.selection_log, result.histories, result.teacher)


def run_fixed_budget(config: ExperimentConfig, fraction: float, seed: int, lambda_unsup: float | None = None) -> float:
    """Held-out AP of one training on a seeded random label set (no active step).

    ``lambda_unsup=0`` gives the supervised-only baseline on exactly the same
    labels, corpus and training randomness.
    """
    train, test = corpora(config, seed)
    detector = ToyDetector.for_config(config.data)
    tc = replace(config.train, seed=seed)
    if lambda_unsup is not None:
        tc = replace(tc, lambda_unsup=lambda_unsup)
    n = budget_sizes(len(train), [fraction])[0]
    labeled = _rng(seed, 2000).choice(sorted(train.ids), size=n, replace=False).tolist()
    result = train_semi_supervised(DataPool(frozenset(train.ids), set(labeled)), tc, detector, train)
    return evaluate_params(result.teacher, detector, test, tc.nms_threshold)


def _run_job(args):
    config, strategy, seed = args
    return run_seed(config, strategy, seed)


def run_many(config: ExperimentConfig, strategies: Sequence[str], seeds: Sequence[int], jobs: int = 1) -> list[SeedResult]:
    """All (strategy, seed) pairs, optionally in worker processes; results keep input order."""
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    tasks = [(config, s, seed) for s in strategies for seed in seeds]
    if jobs <= 1:
        return [_run_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, tasks))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def history_csv(histories: Sequence[Sequence[dict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for rnd, hist in enumerate(histories):
        for row in hist:
            w.writerow([_fmt(rnd)] + [_fmt(row[f]) for f in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def selection_jsonl(log_records: Sequence[dict]) -> str:
    lines = []
    for rec in log_records:
        rec = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in rec.items()}
        lines.append(json.dumps(rec, sort_keys=False))
    return "".join(line + "\n" for line in lines)


def summary_csv(results: Sequence[SeedResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in results:
        row = r.summary_row()
        w.writerow([_fmt(row[f]) for f in SUMMARY_FIELDS])
    return buf.getvalue()


def read_summary(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {**row, "seed": int(row["seed"]), "final_ap": float(row["final_ap"]),
             "labeled_images": int(row["labeled_images"]), "labeled_objects": int(row["labeled_objects"])}
            for row in csv.DictReader(f)
        ]


def write_run(out: Path, config: ExperimentConfig, results: Sequence[SeedResult]) -> Path:
    """Write per-seed artifacts and the summary; returns the summary path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(config))
    for r in results:
        d = out / r.strategy / f"seed{r.seed}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "selection.jsonl").write_text(selection_jsonl(r.selection_log))
        (d / "history.csv").write_text(history_csv(r.histories))
    summary = out / "summary.csv"
    summary.write_text(summary_csv(results))
    return summary
