"""Command-line entry point: ``active-teacher <subcommand> ...``.

Exit codes: 0 on success, 1 when an experiment cannot proceed (label budget
larger than the pool, diverging training), 2 for unusable input (missing or
malformed files, bad flags).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import coco_io
from .config import ConfigError, ExperimentConfig, dump_config, load_config, with_overrides
from .detection import ImagePredictions, filter_by_confidence, nms
from .experiment import read_summary, run_many, write_run
from .sampling import EMPTY_POLICIES, STRATEGIES, SampleScore, ScoreBatch, normalize_batch, rank, score_pool, strategy_keys
from .ssod import BudgetError
from .toy import generate_dataset

log = logging.getLogger("active_teacher")

EXIT_OK, EXIT_EXPERIMENT, EXIT_INPUT = 0, 1, 2


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError(f"duplicate seeds in {text!r}")
    return seeds


def _parse_fractions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"budgets must be comma-separated fractions, got {text!r}")


def _format_of(path: Path) -> str:
    return "json" if path.suffix.lower() == ".json" else "csv"


def _ranked(raw: ScoreBatch, strategy: str, p: float, empty_policy: str, seed: int) -> tuple[list, dict]:
    """Ranked ids plus per-id scores whose ``combined`` holds the ranking key."""
    batch = normalize_batch(raw, p, empty_policy) if strategy == "autonorm" else raw
    keys = strategy_keys(batch, strategy, seed)
    order = rank(batch, strategy, seed)
    scores = {s.image_id: replace(s, combined=float(keys[s.image_id])) for s in raw.scores}
    return order, scores


def _add_ranking_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=STRATEGIES, default="autonorm",
                   help="ranking rule; autonorm sums the max-normalized metrics (default: %(default)s)")
    p.add_argument("--p", type=float, default=1.0, help="p, order of the L-p norm combining normalized metrics (default: %(default)s)")
    p.add_argument("--empty-policy", choices=EMPTY_POLICIES, default="zero",
                   help="images with no detections score 0 ('zero') or count as maximally uncertain ('max') under autonorm")
    p.add_argument("--seed", type=int, default=0, help="seed for the random strategy (default: %(default)s)")


def cmd_score(args) -> int:
    preds = coco_io.load_predictions(args.predictions, args.categories)
    kept = [
        ImagePredictions(pr.image_id, filter_by_confidence(nms(pr.detections, args.nms_threshold), args.tau), pr.surrogate)
        for pr in preds
    ]
    n_sur = sum(pr.surrogate for pr in preds)
    if n_sur:
        log.warning("%d image(s) lack probs vectors; difficulty uses a surrogate distribution", n_sur)
    if not kept:
        raise coco_io.MalformedRecordError(f"{args.predictions}: no prediction records")
    order, scores = _ranked(score_pool(kept), args.strategy, args.p, args.empty_policy, args.seed)
    coco_io.export_selection(order, scores, args.out, _format_of(args.out))
    log.info("scored %d images -> %s", len(order), args.out)
    return EXIT_OK


def cmd_select(args) -> int:
    rows = coco_io.read_selection(args.scores)
    if not rows:
        raise coco_io.MalformedRecordError(f"{args.scores}: no score rows")
    ids = [s.image_id for s in rows]
    if len(set(ids)) != len(ids):
        raise coco_io.MalformedRecordError(f"{args.scores}: duplicate image ids")
    if args.n > len(rows):
        raise BudgetError(f"cannot select n={args.n} images from {len(rows)} scored")
    raw = ScoreBatch([SampleScore(s.image_id, s.difficulty, s.information, s.diversity, 0.0, s.n_boxes) for s in rows])
    order, scores = _ranked(raw, args.strategy, args.p, args.empty_policy, args.seed)
    coco_io.export_selection(order[: args.n], scores, args.out, _format_of(args.out))
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(
        config,
        budget_fractions=args.budgets,
        lambda_unsup=args.lambda_unsup,
        ema_alpha=args.ema_alpha,
        tau=args.tau,
        k_iterations=args.k_iterations if args.k_iterations is not None else (len(args.budgets) if args.budgets else None),
        lp_p=args.p,
        total_steps=args.total_steps,
        pretrain_steps=args.pretrain_steps,
        empty_policy=args.empty_policy,
    )


def cmd_simulate(args) -> int:
    config = _experiment_config(args)
    strategies = list(STRATEGIES) if args.ablate else [args.strategy or "autonorm"]
    results = run_many(config, strategies, args.seeds, jobs=args.jobs)
    summary = write_run(args.out, config, results)
    log.info("wrote %s", summary)
    if args.figures:
        _render(args.out, summary)
    return EXIT_OK


def _render(run_dir: Path, summary: Path) -> None:
    from .plotting import render_figures

    for path in render_figures(run_dir, read_summary(summary)):
        log.info("wrote %s", path)


def cmd_report(args) -> int:
    summary = Path(args.run) / "summary.csv"
    if not summary.is_file():
        raise FileNotFoundError(f"no summary.csv in {args.run}")
    _render(Path(args.run), summary)
    return EXIT_OK


def cmd_make_config(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    text = dump_config(config)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_dataset(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    n = args.n if args.n is not None else config.data.n_scenes
    generate_dataset(n, config.data, seed=args.seed, stream=args.stream).save(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="active-teacher", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score and rank images from a COCO-style prediction dump")
    p.add_argument("--predictions", type=Path, required=True, help="COCO results JSON, optionally with 'probs' per record")
    p.add_argument("--categories", type=Path, required=True, help="JSON array of {id, name}; order defines the probs index")
    _add_ranking_flags(p)
    p.add_argument("--tau", type=float, default=0.7, help="tau, confidence threshold applied after NMS (default: %(default)s)")
    p.add_argument("--nms-threshold", type=float, default=0.5, help="class-wise NMS IoU threshold (default: %(default)s)")
    p.add_argument("--out", type=Path, required=True, help="ranked score table; .json for JSON, anything else CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="pick the top-N images from a score table")
    p.add_argument("--scores", type=Path, required=True, help="table written by 'score' (CSV or JSON)")
    p.add_argument("--n", type=int, required=True, help="N, number of images to send for annotation")
    _add_ranking_flags(p)
    p.add_argument("--out", type=Path, required=True, help="worklist; .json for JSON, anything else CSV")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="run the label-budget loop on synthetic scenes")
    p.add_argument("--config", type=Path, help="INI experiment config (see make-config); defaults built in")
    p.add_argument("--strategy", choices=STRATEGIES, help="selection rule (default: autonorm)")
    p.add_argument("--ablate", action="store_true", help="run every strategy with the same seeds and budget")
    p.add_argument("--seeds", type=_parse_seeds, default=[0], help="comma-separated seeds, e.g. 0,1,2 (default: 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes; outputs do not depend on it (default: %(default)s)")
    p.add_argument("--figures", action="store_true", help="also render PNG figures into OUT/figures (needs matplotlib)")
    p.add_argument("--lambda-unsup", type=float, help="lambda, weight of the unsupervised loss")
    p.add_argument("--ema-alpha", type=float, help="alpha, EMA decay of the teacher")
    p.add_argument("--tau", type=float, help="tau, pseudo-label and scoring confidence threshold")
    p.add_argument("--k-iterations", type=int, help="K, number of training rounds; must equal the number of budgets")
    p.add_argument("--budgets", type=_parse_fractions, help="cumulative labeled fractions per round, e.g. 0.05,0.10")
    p.add_argument("--p", type=float, help="p, order of the L-p norm combining normalized metrics")
    p.add_argument("--empty-policy", choices=EMPTY_POLICIES, help="score for images with no detections")
    p.add_argument("--total-steps", type=int, help="teacher-student steps per round")
    p.add_argument("--pretrain-steps", type=int, help="supervised burn-in steps per round")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render figures for an existing simulate output directory")
    p.add_argument("--run", type=Path, required=True, help="directory written by simulate")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-config", help="print or write the effective experiment config")
    p.add_argument("--config", type=Path, help="start from this file instead of the defaults")
    p.add_argument("--out", type=Path, help="write here instead of stdout")
    p.set_defaults(func=cmd_make_config)

    p = sub.add_parser("dataset", help="write a synthetic corpus as JSON")
    p.add_argument("--config", type=Path, help="INI experiment config; only [data] is used")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default: %(default)s)")
    p.add_argument("--stream", type=int, default=0, help="0 for the training pool, 1 for the held-out set (default: %(default)s)")
    p.add_argument("--n", type=int, help="number of scenes (default: n_scenes from the config)")
    p.add_argument("--out", type=Path, required=True, help="output JSON path")
    p.set_defaults(func=cmd_dataset)
    return parser


def _validate(parser: argparse.ArgumentParser, args) -> None:
    if getattr(args, "n", None) is not None and args.n < (0 if args.command == "select" else 1):
        parser.error(f"--n must be positive, got {args.n}")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "p", None) is not None and args.p < 1:
        parser.error(f"--p must be >= 1, got {args.p}")
    if args.command == "score" and not (0.0 <= args.tau <= 1.0):
        parser.error(f"--tau must lie in [0, 1], got {args.tau}")
    if args.command == "score" and not (0.0 < args.nms_threshold < 1.0):
        parser.error(f"--nms-threshold must lie in (0, 1), got {args.nms_threshold}")
    if args.command == "simulate" and args.ablate and args.strategy is not None:
        parser.error("--ablate runs every strategy; drop --strategy")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BudgetError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except (FileNotFoundError, ConfigError, coco_io.PredictionFormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
