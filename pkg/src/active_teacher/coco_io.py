"""Reading COCO-style detection dumps and writing annotation worklists.

Input records follow the COCO results format, optionally extended with a
``probs`` vector over the category vocabulary::

    {"image_id": 42, "category_id": 3, "bbox": [x, y, w, h], "score": 0.91,
     "probs": [0.01, 0.91, ...]}

``probs`` is indexed by position in the categories file (a JSON array of
``{"id": ..., "name": ...}``). Without ``probs`` a surrogate distribution is
used: ``score`` on the record's category and the rest spread evenly, and the
image is flagged ``surrogate``.

Selections are written as CSV (``rank,image_id,difficulty,information,
diversity,combined``) or JSON (see ``SELECTION_SCHEMA``), always with six
decimals so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .detection import BBox, Detection, ImagePredictions
from .sampling import SampleScore

RECORD_TOL = 1e-4
CSV_FIELDS = ("rank", "image_id", "difficulty", "information", "diversity", "combined")
SCORE_FIELDS = CSV_FIELDS[2:]

SELECTION_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["fields", "selection"],
    "properties": {
        "fields": {"type": "array", "items": {"type": "string"}},
        "selection": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(CSV_FIELDS),
                "additionalProperties": False,
                "properties": {
                    "rank": {"type": "integer", "minimum": 1},
                    "image_id": {"type": ["integer", "string"]},
                    **{f: {"type": "number", "minimum": 0} for f in SCORE_FIELDS},
                },
            },
        },
    },
}


class PredictionFormatError(ValueError):
    """Base class for rejected prediction files; ``index`` is the record position (or None)."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        prefix = f"record {index}: " if index is not None else ""
        super().__init__(prefix + message)


class MalformedJSONError(PredictionFormatError):
    pass


class MalformedRecordError(PredictionFormatError):
    pass


class UnknownCategoryError(PredictionFormatError):
    pass


class InvalidBBoxError(PredictionFormatError):
    pass


class InvalidProbsError(PredictionFormatError):
    pass


def _read_json(path) -> object:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedJSONError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e


def load_categories(path) -> list[dict]:
    data = _read_json(path)
    if not isinstance(data, list) or not all(isinstance(c, dict) and "id" in c for c in data):
        raise MalformedJSONError(f"{path}: categories must be a JSON array of objects with an 'id'")
    ids = [c["id"] for c in data]
    if len(set(ids)) != len(ids):
        raise MalformedJSONError(f"{path}: duplicate category ids")
    if len(ids) < 2:
        raise MalformedJSONError(f"{path}: need at least two categories")
    return data


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def parse_record(rec: object, index: int, cat_index: Mapping[int, int]) -> tuple[Hashable, Detection, bool]:
    """Validate one record; returns (image_id, detection, used_surrogate)."""
    if not isinstance(rec, dict):
        raise MalformedRecordError("expected a JSON object", index)
    for key in ("image_id", "category_id", "bbox", "score"):
        if key not in rec:
            raise MalformedRecordError(f"missing field {key!r}", index)
    image_id = rec["image_id"]
    if not isinstance(image_id, int) or isinstance(image_id, bool):
        raise MalformedRecordError(f"image_id must be an integer, got {image_id!r}", index)
    if rec["category_id"] not in cat_index:
        raise UnknownCategoryError(f"unknown category_id {rec['category_id']!r}", index)
    score = rec["score"]
    if not _is_number(score) or not 0.0 <= score <= 1.0:
        raise MalformedRecordError(f"score must be a number in [0, 1], got {score!r}", index)

    bbox = rec["bbox"]
    if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_number(v) for v in bbox)):
        raise InvalidBBoxError(f"bbox must be four finite numbers, got {bbox!r}", index)
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise InvalidBBoxError(f"bbox width and height must be positive, got {bbox!r}", index)
    box = BBox.from_xywh(x, y, w, h)

    n = len(cat_index)
    probs = rec.get("probs")
    if probs is None:
        k = cat_index[rec["category_id"]]
        vec = np.full(n, (1.0 - score) / (n - 1))
        vec[k] = score
        return image_id, Detection.from_probs(box, vec), True

    if not (isinstance(probs, list) and all(_is_number(p) for p in probs)):
        raise InvalidProbsError("probs must be a list of finite numbers", index)
    vec = np.asarray(probs, dtype=float)
    if vec.size != n:
        raise InvalidProbsError(f"probs has {vec.size} entries, category vocabulary has {n}", index)
    if np.any(vec < 0):
        raise InvalidProbsError("probs contains negative entries", index)
    total = vec.sum()
    if abs(total - 1.0) > RECORD_TOL:
        raise InvalidProbsError(f"probs sum to {total:.6f}, expected 1", index)
    if abs(vec.max() - score) > RECORD_TOL:
        raise InvalidProbsError(f"max(probs)={vec.max():.6f} disagrees with score={score:.6f}", index)
    return image_id, Detection.from_probs(box, vec / total), False


def load_predictions(path, categories_path) -> list[ImagePredictions]:
    """Group a COCO results file into per-image predictions, ordered by image id.

    Each detection's category and confidence come from its probability
    vector (argmax and max).
    """
    categories = load_categories(categories_path)
    cat_index = {c["id"]: i for i, c in enumerate(categories)}
    records = _read_json(path)
    if not isinstance(records, list):
        raise MalformedJSONError(f"{path}: expected a JSON array of prediction records")
    grouped: dict[Hashable, list[Detection]] = {}
    surrogate: dict[Hashable, bool] = {}
    for i, rec in enumerate(records):
        image_id, det, sur = parse_record(rec, i, cat_index)
        grouped.setdefault(image_id, []).append(det)
        surrogate[image_id] = surrogate.get(image_id, False) or sur
    return [ImagePredictions(i, grouped[i], surrogate[i]) for i in sorted(grouped)]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def selection_rows(ids: Sequence[Hashable], scores: Mapping[Hashable, SampleScore] | Sequence[SampleScore]) -> list[dict]:
    if not isinstance(scores, Mapping):
        scores = {s.image_id: s for s in scores}
    missing = [i for i in ids if i not in scores]
    if missing:
        raise KeyError(f"selected ids without scores: {missing[:5]}")
    return [
        {"rank": r, "image_id": i, **{f: float(getattr(scores[i], f)) for f in SCORE_FIELDS}}
        for r, i in enumerate(ids, start=1)
    ]


def selection_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in rows:
        w.writerow([row["rank"], row["image_id"], *(_fmt(row[f]) for f in SCORE_FIELDS)])
    return buf.getvalue()


def selection_json(rows: Sequence[dict]) -> str:
    lines = []
    for row in rows:
        parts = [f'"rank": {row["rank"]}', f'"image_id": {json.dumps(row["image_id"])}']
        parts += [f'"{f}": {_fmt(row[f])}' for f in SCORE_FIELDS]
        lines.append("    {" + ", ".join(parts) + "}")
    body = ",\n".join(lines)
    fields = json.dumps(list(CSV_FIELDS))
    return '{\n  "fields": ' + fields + ',\n  "selection": [\n' + body + ("\n" if lines else "") + "  ]\n}\n"


def export_selection(ids, scores, path, format: str = "csv") -> None:
    """Write the ranked worklist; ``format`` is ``csv`` or ``json``."""
    rows = selection_rows(ids, scores)
    if format == "csv":
        text = selection_csv(rows)
    elif format == "json":
        text = selection_json(rows)
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write selection to {path}: {e.strerror}") from e


def _parse_id(text: str) -> Hashable:
    try:
        return int(text)
    except ValueError:
        return text


def read_selection(path) -> list[SampleScore]:
    """Read a CSV or JSON worklist back into scores, in file (rank) order.

    Box counts are not stored; an image is known to be empty exactly when its
    information score is 0 (every detection carries confidence >= 1/N_c).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            rows = json.loads(text)["selection"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise MalformedJSONError(f"{path}: not a selection document ({e})") from e
    else:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or not set(("image_id",) + SCORE_FIELDS) <= set(reader.fieldnames):
            raise MalformedRecordError(f"{path}: CSV header must contain image_id and {', '.join(SCORE_FIELDS)}")
        rows = list(reader)
    out = []
    for n, row in enumerate(rows):
        try:
            image_id = row["image_id"] if isinstance(row["image_id"], int) else _parse_id(str(row["image_id"]))
            vals = {f: float(row[f]) for f in SCORE_FIELDS}
        except (KeyError, ValueError) as e:
            raise MalformedRecordError(f"{path}: bad row ({e})", n) from e
        out.append(SampleScore(image_id, vals["difficulty"], vals["information"], vals["diversity"],
                               vals["combined"], n_boxes=0 if vals["information"] == 0 else None))
    return out
