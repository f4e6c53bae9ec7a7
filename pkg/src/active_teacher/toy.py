"""Synthetic grid-world detection task and a minimal two-stage linear detector.

Scenes are ``G x G`` grids of ``D``-dimensional feature vectors. An object
sits in the cell containing its box center; that cell's feature is

    [geometry_scale * (dx, dy, dw, dh), presence_scale, class prototype] + noise

where ``(dx, dy, dw, dh)`` are the box deltas relative to the unit anchor of
the cell (center offset and log size) and the presence channel is shared by
all categories. Empty cells are pure noise.

The detector runs three linear heads on every cell: an objectness logit
(proposal stage), a softmax over categories (classification stage), and four
box deltas. Cells whose objectness probability is at least 0.5 become
detections.

Randomness always comes from numpy's PCG64 generator seeded through
``SeedSequence([seed, stream])``, so corpora are reproducible anywhere numpy
is.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detection import BBox, Detection, ImagePredictions, smooth_l1, smooth_l1_grad

GEOMETRY_DIMS = 4
PRESENCE_DIM = 4
APPEARANCE_START = 5
PROPOSAL_LOGIT = 0.0  # sigmoid(0) == 0.5
MAX_LOG_SIZE = 4.0


@dataclass(frozen=True)
class ToyConfig:
    grid: int = 8
    dim: int = 64
    num_classes: int = 10
    max_objects: int = 6
    n_scenes: int = 2000
    zipf: float = 1.0
    noise: float = 0.5
    prototype_scale: float = 2.0
    presence_scale: float = 3.0
    geometry_scale: float = 5.0
    min_size: float = 0.8
    max_size: float = 2.5
    env_seed: int = 0

    def __post_init__(self):
        if self.dim <= APPEARANCE_START:
            raise ValueError(f"dim must exceed {APPEARANCE_START} (geometry and presence channels)")
        if self.num_classes < 2:
            raise ValueError("need at least two categories")
        if self.max_objects > self.grid * self.grid:
            raise ValueError("max_objects cannot exceed the number of cells")
        if not 0 < self.min_size <= self.max_size <= self.grid:
            raise ValueError("object sizes must satisfy 0 < min_size <= max_size <= grid")

    @property
    def cells(self) -> int:
        return self.grid * self.grid

    def prototypes(self) -> np.ndarray:
        """Category appearance vectors, shape (num_classes, dim - 5), fixed by ``env_seed``."""
        rng = _rng(self.env_seed, 7919)
        protos = rng.normal(size=(self.num_classes, self.dim - APPEARANCE_START))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        return self.prototype_scale * protos

    def category_probs(self) -> np.ndarray:
        w = 1.0 / np.arange(1, self.num_classes + 1) ** self.zipf
        return w / w.sum()


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


# ---------------------------------------------------------------------------
# anchors and box deltas
# ---------------------------------------------------------------------------


def cell_of(box: BBox, grid: int) -> int:
    """Index ``row * grid + col`` of the cell containing the box center (clamped)."""
    cx = 0.5 * (box.x_min + box.x_max)
    cy = 0.5 * (box.y_min + box.y_max)
    col = min(max(int(math.floor(cx)), 0), grid - 1)
    row = min(max(int(math.floor(cy)), 0), grid - 1)
    return row * grid + col


def anchor_centers(grid: int) -> np.ndarray:
    """(cells, 2) array of unit-anchor centers in (x, y) order."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.stack([cols + 0.5, rows + 0.5], axis=1)


def encode_box(box: BBox, cell: int, grid: int) -> np.ndarray:
    """Deltas ``(dx, dy, dw, dh)`` of ``box`` relative to the unit anchor at ``cell``."""
    row, col = divmod(cell, grid)
    w = box.x_max - box.x_min
    h = box.y_max - box.y_min
    return np.array([
        box.x_min + 0.5 * w - (col + 0.5),
        box.y_min + 0.5 * h - (row + 0.5),
        math.log(w),
        math.log(h),
    ])


def decode_deltas(deltas: np.ndarray, grid: int) -> np.ndarray:
    """Corner boxes, shape (..., cells, 4), from per-cell deltas."""
    centers = anchor_centers(grid)
    # clamping keeps boxes well-formed even for a diverging model
    cxy = np.clip(centers + deltas[..., :2], -grid, 2 * grid)
    wh = np.exp(np.clip(deltas[..., 2:], -MAX_LOG_SIZE, MAX_LOG_SIZE))
    return np.concatenate([cxy - 0.5 * wh, cxy + 0.5 * wh], axis=-1)


@dataclass
class Targets:
    """Dense per-cell training targets for a batch of scenes.

    ``cls`` holds -1 on background cells; ``reg`` is only meaningful where
    ``cls >= 0``.
    """

    obj: np.ndarray  # (B, C) float 0/1
    cls: np.ndarray  # (B, C) int
    reg: np.ndarray  # (B, C, 4)

    def __getitem__(self, idx) -> "Targets":
        return Targets(self.obj[idx], self.cls[idx], self.reg[idx])

    @property
    def has_objects(self) -> np.ndarray:
        return self.obj.any(axis=1)


def encode_targets(objects_per_image: Sequence[Sequence], grid: int) -> Targets:
    """Dense targets from per-image ``(category, BBox)`` or ``(category, BBox, cell)`` lists.

    When an explicit cell is given it is used as the match; otherwise the
    cell containing the box center is. The first object claiming a cell wins.
    A category of None marks the cell as an object without a class target.
    """
    n, cells = len(objects_per_image), grid * grid
    obj = np.zeros((n, cells))
    cls = np.full((n, cells), -1, dtype=int)
    reg = np.zeros((n, cells, 4))
    for i, objects in enumerate(objects_per_image):
        for o in objects:
            category, box = o[0], o[1]
            cell = o[2] if len(o) > 2 else cell_of(box, grid)
            if obj[i, cell]:
                continue
            obj[i, cell] = 1.0
            if category is not None:
                cls[i, cell] = category
                reg[i, cell] = encode_box(box, cell, grid)
    return Targets(obj, cls, reg)


# ---------------------------------------------------------------------------
# scenes and datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    image_id: int
    features: np.ndarray  # (grid, grid, dim), indexed [row, col]
    objects: list[tuple[int, BBox]] = field(default_factory=list)

    @property
    def grid(self) -> int:
        return self.features.shape[0]


class SyntheticDataset:
    """A list of scenes plus the stacked arrays the training loop consumes."""

    def __init__(self, config: ToyConfig, scenes: list[SyntheticScene]):
        self.config = config
        self.scenes = scenes
        self.index = {s.image_id: i for i, s in enumerate(scenes)}
        self.features = np.stack([s.features.reshape(config.cells, config.dim) for s in scenes]) if scenes else np.zeros((0, config.cells, config.dim))
        self.targets = encode_targets([s.objects for s in scenes], config.grid)

    def __len__(self):
        return len(self.scenes)

    @property
    def ids(self) -> list[int]:
        return [s.image_id for s in self.scenes]

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.index[i] for i in ids], dtype=int)

    def truths(self) -> dict[int, list[tuple[int, BBox]]]:
        return {s.image_id: list(s.objects) for s in self.scenes}

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "scenes": [
                {
                    "image_id": s.image_id,
                    "features": s.features.tolist(),
                    "objects": [
                        {"category": c, "bbox": [b.x_min, b.y_min, b.x_max, b.y_max]} for c, b in s.objects
                    ],
                }
                for s in self.scenes
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticDataset":
        config = ToyConfig(**data["config"])
        scenes = [
            SyntheticScene(
                image_id=int(s["image_id"]),
                features=np.asarray(s["features"], dtype=float),
                objects=[(int(o["category"]), BBox(*o["bbox"])) for o in s["objects"]],
            )
            for s in data["scenes"]
        ]
        return cls(config, scenes)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        return cls.from_json(json.loads(Path(path).read_text()))


def _place_objects(rng: np.random.Generator, config: ToyConfig, probs: np.ndarray) -> list[tuple[int, BBox]]:
    g = config.grid
    n_obj = int(rng.integers(0, config.max_objects + 1))
    taken: set[int] = set()
    objects = []
    log_lo, log_hi = math.log(config.min_size), math.log(config.max_size)
    while len(objects) < n_obj:
        category = int(rng.choice(config.num_classes, p=probs))
        w, h = np.exp(rng.uniform(log_lo, log_hi, size=2))
        cx = rng.uniform(0.5 * w, g - 0.5 * w)
        cy = rng.uniform(0.5 * h, g - 0.5 * h)
        box = BBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
        cell = cell_of(box, g)
        if cell in taken:
            continue
        taken.add(cell)
        objects.append((category, box))
    return objects


def render_features(objects: Sequence[tuple[int, BBox]], config: ToyConfig, rng: np.random.Generator, prototypes=None) -> np.ndarray:
    protos = config.prototypes() if prototypes is None else prototypes
    feats = np.zeros((config.cells, config.dim))
    for category, box in objects:
        cell = cell_of(box, config.grid)
        feats[cell, :GEOMETRY_DIMS] = config.geometry_scale * encode_box(box, cell, config.grid)
        feats[cell, PRESENCE_DIM] = config.presence_scale
        feats[cell, APPEARANCE_START:] = protos[category]
    if config.noise > 0:
        feats += config.noise * rng.normal(size=feats.shape)
    return feats.reshape(config.grid, config.grid, config.dim)


def generate_dataset(n_scenes: int, config: ToyConfig = ToyConfig(), seed: int = 0, stream: int = 0, id_offset: int = 0) -> SyntheticDataset:
    """Draw ``n_scenes`` scenes; identical arguments give identical corpora.

    ``stream`` selects an independent sequence for the same seed (the
    simulator uses stream 1 for held-out evaluation scenes).
    """
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    rng = _rng(seed, stream)
    probs = config.category_probs()
    protos = config.prototypes()
    scenes = []
    for i in range(n_scenes):
        objects = _place_objects(rng, config, probs)
        scenes.append(SyntheticScene(id_offset + i, render_features(objects, config, rng, protos), objects))
    return SyntheticDataset(config, scenes)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise: float = 0.05
    strong_noise: float = 0.25
    mask_frac: float = 0.1

    def params(self, strength: str) -> tuple[float, float]:
        if strength == "weak":
            return self.weak_noise, 0.0
        if strength == "strong":
            return self.strong_noise, self.mask_frac
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")


def mirror_features(feats: np.ndarray, grid: int) -> np.ndarray:
    """Horizontal flip of (..., cells, dim) features; the dx channel changes sign."""
    shape = feats.shape
    out = feats.reshape(shape[:-2] + (grid, grid, shape[-1]))[..., ::-1, :].copy()
    out[..., 0] *= -1.0
    return out.reshape(shape)


def mirror_targets(t: Targets, grid: int) -> Targets:
    def flip(a):
        s = a.shape
        return a.reshape(s[:1] + (grid, grid) + s[2:])[:, :, ::-1].reshape(s)

    reg = flip(t.reg).copy()
    reg[..., 0] *= -1.0
    return Targets(flip(t.obj), flip(t.cls), reg)


def mirror_box(box: BBox, grid: int) -> BBox:
    return BBox(grid - box.x_max, box.y_min, grid - box.x_min, box.y_max)


def perturb(feats: np.ndarray, noise: float, mask_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise, then zero whole cells with probability ``mask_frac``.

    Noise is drawn before the mask so that ``mask_frac=0`` consumes the same
    random numbers as a noise-only call.
    """
    out = feats + noise * rng.normal(size=feats.shape)
    if mask_frac > 0:
        keep = rng.random(feats.shape[:-1]) >= mask_frac
        out = out * keep[..., None]
    return out


def augment(scene: SyntheticScene, strength: str, seed: int, aug: AugmentConfig = AugmentConfig()) -> SyntheticScene:
    """Weak: random mirror + small noise. Strong: random mirror + larger noise + cell CutOut.

    The mirror decision is the first draw from the seeded stream, so a weak
    and a strong view with the same seed share their geometry.
    """
    noise, mask_frac = aug.params(strength)
    rng = _rng(seed)
    g = scene.grid
    feats = scene.features.reshape(g * g, -1)
    objects = list(scene.objects)
    if rng.random() < 0.5:
        feats = mirror_features(feats, g)
        objects = [(c, mirror_box(b, g)) for c, b in objects]
    feats = perturb(feats, noise, mask_frac, rng)
    return SyntheticScene(scene.image_id, feats.reshape(scene.features.shape), objects)


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------


def param_count(grid: int, dim: int, num_classes: int) -> int:
    """Parameter vector length. Heads are shared across cells, so ``grid`` drops out."""
    return (dim + 1) * (1 + num_classes + 4)


def param_layout(dim: int, num_classes: int) -> dict[str, tuple[slice, tuple[int, ...]]]:
    """Slices into the flat vector: objectness, classification, regression (weights then bias)."""
    shapes = [
        ("obj_w", (dim,)), ("obj_b", (1,)),
        ("cls_w", (num_classes, dim)), ("cls_b", (num_classes,)),
        ("reg_w", (4, dim)), ("reg_b", (4,)),
    ]
    layout, start = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (slice(start, start + size), shape)
        start += size
    return layout


@dataclass
class DenseOutput:
    """Per-cell detector outputs for one image."""

    obj_prob: np.ndarray  # (C,)
    cls_prob: np.ndarray  # (C, K)
    boxes: np.ndarray  # (C, 4) corner form


@dataclass
class LossParts:
    total: float
    sup: float
    unsup: float
    sup_cls: float
    sup_loc: float


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ToyDetector:
    """Linear two-stage detector over a fixed grid."""

    def __init__(self, grid: int = 8, dim: int = 64, num_classes: int = 10):
        self.grid, self.dim, self.num_classes = grid, dim, num_classes
        self.layout = param_layout(dim, num_classes)
        self.n_params = param_count(grid, dim, num_classes)

    @classmethod
    def for_config(cls, config: ToyConfig) -> "ToyDetector":
        return cls(config.grid, config.dim, config.num_classes)

    def init_params(self, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
        return scale * rng.normal(size=self.n_params)

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ValueError(f"parameter vector has shape {params.shape}, layout expects ({self.n_params},)")
        return {k: params[s].reshape(shape) for k, (s, shape) in self.layout.items()}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.n_params)
        for k, (s, _) in self.layout.items():
            out[s] = np.ravel(parts[k])
        return out

    def heads(self, params: np.ndarray, feats: np.ndarray):
        """Raw head outputs for (B, C, D) features: logits (B, C), (B, C, K), deltas (B, C, 4)."""
        p = self.unpack(params)
        obj = feats @ p["obj_w"] + p["obj_b"][0]
        cls = feats @ p["cls_w"].T + p["cls_b"]
        reg = feats @ p["reg_w"].T + p["reg_b"]
        return obj, cls, reg

    def dense(self, params: np.ndarray, feats: np.ndarray) -> list[DenseOutput]:
        obj, cls, reg = self.heads(params, feats)
        boxes = decode_deltas(reg, self.grid)
        return [DenseOutput(o, c, b) for o, c, b in zip(_sigmoid(obj), _softmax(cls), boxes)]

    def raw_detections(self, params: np.ndarray, feats: np.ndarray):
        """Gate cells by objectness; yields per-image arrays (cells, boxes, probs, objectness)."""
        obj, cls, reg = self.heads(params, feats)
        probs = _softmax(cls)
        boxes = decode_deltas(reg, self.grid)
        objectness = _sigmoid(obj)
        gate = obj >= PROPOSAL_LOGIT
        for b in range(feats.shape[0]):
            cells = np.flatnonzero(gate[b])
            yield cells, boxes[b, cells], probs[b, cells], objectness[b, cells]

    def detect_batch(self, params: np.ndarray, feats: np.ndarray, image_ids: Sequence) -> list[ImagePredictions]:
        out = []
        for image_id, (_, boxes, probs, _) in zip(image_ids, self.raw_detections(params, feats)):
            dets = [Detection.from_probs(BBox(*box), p) for box, p in zip(boxes.tolist(), probs)]
            out.append(ImagePredictions(image_id, dets))
        return out

    def detect(self, params: np.ndarray, scene: SyntheticScene) -> ImagePredictions:
        """Raw (pre-NMS, unfiltered) detections for one scene."""
        if scene.features.shape != (self.grid, self.grid, self.dim):
            raise ValueError(f"scene features {scene.features.shape} do not match detector grid/dim")
        feats = scene.features.reshape(1, self.grid * self.grid, self.dim)
        return self.detect_batch(params, feats, [scene.image_id])[0]

    def loss_and_grad(
        self,
        params: np.ndarray,
        lab_feats: np.ndarray,
        lab_targets: Targets,
        unl_feats: np.ndarray | None = None,
        pseudo_targets: Targets | None = None,
        lambda_unsup: float = 0.0,
    ) -> tuple[LossParts, np.ndarray]:
        """Semi-supervised objective and its exact gradient.

        Per image the classification loss is objectness cross-entropy averaged
        over all cells plus category cross-entropy averaged over positive
        cells; the supervised part adds smooth-L1 on the four deltas averaged
        over positive cells. The unsupervised part uses classification terms
        only, and unlabeled images with no pseudo-label contribute zero.
        """
        n_l = lab_feats.shape[0]
        if n_l == 0:
            raise ValueError("supervised loss needs at least one labeled image")
        p = self.unpack(params)
        grads = {k: np.zeros(shape) for k, (_, shape) in self.layout.items()}

        cls_sum, loc_sum = self._accumulate(p, grads, lab_feats, lab_targets, 1.0 / n_l, with_loc=True)
        sup_cls, sup_loc = cls_sum / n_l, loc_sum / n_l

        unsup = 0.0
        if unl_feats is not None and pseudo_targets is not None and len(unl_feats) and lambda_unsup != 0:
            active = pseudo_targets.has_objects
            n_u = unl_feats.shape[0]
            if active.any():
                u_sum, _ = self._accumulate(
                    p, grads, unl_feats[active], pseudo_targets[active], lambda_unsup / n_u, with_loc=False
                )
                unsup = u_sum / n_u
        sup = sup_cls + sup_loc
        total = sup + lambda_unsup * unsup
        return LossParts(total, sup, unsup, sup_cls, sup_loc), self.pack(grads)

    def _accumulate(self, p, grads, feats, targets: Targets, grad_weight: float, with_loc: bool):
        """Add ``grad_weight`` times the gradient of the summed per-image losses.

        Returns the unweighted sums of the classification and box terms.
        """
        n, cells, _ = feats.shape
        obj = feats @ p["obj_w"] + p["obj_b"][0]
        cls = feats @ p["cls_w"].T + p["cls_b"]
        pos = targets.cls >= 0
        npos = np.maximum(pos.sum(axis=1), 1).astype(float)

        rpn = (np.logaddexp(0.0, obj) - targets.obj * obj).mean(axis=1)
        d_obj = (_sigmoid(obj) - targets.obj) / cells

        logp = _log_softmax(cls)
        safe_cls = np.where(pos, targets.cls, 0)
        nll = -np.take_along_axis(logp, safe_cls[..., None], axis=-1)[..., 0] * pos
        roi = nll.sum(axis=1) / npos
        d_cls = np.exp(logp)
        d_cls[pos, targets.cls[pos]] -= 1.0
        d_cls *= (pos / npos[:, None])[..., None]

        x2 = feats.reshape(-1, feats.shape[-1])
        grads["obj_w"] += grad_weight * (x2.T @ d_obj.ravel())
        grads["obj_b"] += grad_weight * d_obj.sum()
        dc = d_cls.reshape(-1, d_cls.shape[-1])
        grads["cls_w"] += grad_weight * (dc.T @ x2)
        grads["cls_b"] += grad_weight * dc.sum(axis=0)

        loc_sum = 0.0
        if with_loc:
            reg = feats @ p["reg_w"].T + p["reg_b"]
            diff = (reg - targets.reg) * pos[..., None]
            loc_sum = float((smooth_l1(diff).sum(axis=(1, 2)) / npos).sum())
            dr = (smooth_l1_grad(diff) / npos[:, None, None]).reshape(-1, 4)
            grads["reg_w"] += grad_weight * (dr.T @ x2)
            grads["reg_b"] += grad_weight * dr.sum(axis=0)
        return float((rpn + roi).sum()), loc_sum

    def loss(self, params, *args, **kwargs) -> LossParts:
        return self.loss_and_grad(params, *args, **kwargs)[0]


def sgd_step(params: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    """Plain SGD: ``params - lr * gradient``."""
    params = np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if params.shape != gradient.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match params {params.shape}")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return params - lr * gradient


def oracle_params(config: ToyConfig, detector: ToyDetector | None = None, margin: float = 20.0) -> np.ndarray:
    """Analytic weights that are exact on noise-free scenes.

    Objectness thresholds the presence channel, classification projects onto
    the dual basis of the prototypes, regression reads the geometry channels.
    Needs ``num_classes <= dim - 5`` so the prototypes are independent.
    """
    detector = detector or ToyDetector.for_config(config)
    protos = config.prototypes()
    if protos.shape[0] > protos.shape[1]:
        raise ValueError("oracle weights need at least as many appearance channels as categories")
    dual = np.linalg.pinv(protos)  # protos @ dual == I
    k, d = config.num_classes, config.dim
    cls_w = np.zeros((k, d))
    cls_w[:, APPEARANCE_START:] = margin * dual.T
    obj_w = np.zeros(d)
    obj_w[PRESENCE_DIM] = margin / config.presence_scale
    reg_w = np.zeros((4, d))
    reg_w[:, :GEOMETRY_DIMS] = np.eye(4) / config.geometry_scale
    return detector.pack({
        "obj_w": obj_w, "obj_b": np.array([-0.5 * margin]),
        "cls_w": cls_w, "cls_b": np.zeros(k),
        "reg_w": reg_w, "reg_b": np.zeros(4),
    })
