"""Synthetic scenes and their rendered feature pyramids.

Stands in for a CNN backbone: each object paints a class-keyed smooth
blob (a fixed random unit signature vector times a Gaussian profile
scaled to the box) onto every pyramid level, plus seeded noise.  The
generator is deterministic per seed and never learned; it only has to
carry enough signal for a working head to detect the objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .attention import FeaturePyramid, Level
from .geometry import Box, boxes_to_array
from .tensor import make_rng

SIGNATURE_SEED = 271828
BLOB_AMPLITUDE = 2.0
MAX_OBJECTS = 20


@dataclass
class SceneParams:
    num_classes: int = 8
    min_objects: int = 1
    max_objects: int = 5
    scale_min: float = 0.1
    scale_max: float = 0.35
    overlap_rate: float = 0.3
    image_size: int = 256

    def __post_init__(self):
        if not (1 <= self.min_objects <= self.max_objects <= MAX_OBJECTS):
            raise ValueError(
                f"object count range [{self.min_objects}, {self.max_objects}] invalid"
            )
        if not (0.0 < self.scale_min <= self.scale_max <= 1.0):
            raise ValueError("scale range must satisfy 0 < min <= max <= 1")
        if not (0.0 <= self.overlap_rate <= 1.0):
            raise ValueError("overlap_rate must lie in [0, 1]")


@dataclass
class Scene:
    objects: list  # [(Box, class_id)]
    image_size: int
    seed: int

    def __post_init__(self):
        if not (1 <= len(self.objects) <= MAX_OBJECTS):
            raise ValueError(f"scene must hold 1..{MAX_OBJECTS} objects")

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        boxes = boxes_to_array([b for b, _ in self.objects])
        classes = np.array([c for _, c in self.objects], dtype=np.int64)
        return boxes, classes


def _disjoint(box: Box, others: list[Box], margin: float = 1e-3) -> bool:
    x1, y1, x2, y2 = box.corners()
    for o in others:
        ox1, oy1, ox2, oy2 = o.corners()
        if x1 < ox2 + margin and ox1 < x2 + margin and y1 < oy2 + margin and oy1 < y2 + margin:
            return False
    return True


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Deterministic scene: sizes log-uniform in the scale range, overlap
    steered by overlap_rate (0 gives pairwise-disjoint boxes)."""
    rng = make_rng(seed)
    target = int(rng.integers(params.min_objects, params.max_objects + 1))
    boxes: list[Box] = []
    classes: list[int] = []
    log_lo, log_hi = np.log(params.scale_min), np.log(params.scale_max)
    for _ in range(target):
        w = float(np.exp(rng.uniform(log_lo, log_hi)))
        h = float(np.exp(rng.uniform(log_lo, log_hi)))
        placed = None
        if boxes and rng.uniform() < params.overlap_rate:
            anchor = boxes[int(rng.integers(len(boxes)))]
            dx = float(rng.uniform(-0.4, 0.4)) * (anchor.w + w) / 2.0
            dy = float(rng.uniform(-0.4, 0.4)) * (anchor.h + h) / 2.0
            cx = float(np.clip(anchor.cx + dx, w / 2.0, 1.0 - w / 2.0))
            cy = float(np.clip(anchor.cy + dy, h / 2.0, 1.0 - h / 2.0))
            placed = Box(cx, cy, w, h)
        else:
            for _attempt in range(50):
                cx = float(rng.uniform(w / 2.0, 1.0 - w / 2.0))
                cy = float(rng.uniform(h / 2.0, 1.0 - h / 2.0))
                cand = Box(cx, cy, w, h)
                if _disjoint(cand, boxes):
                    placed = cand
                    break
        if placed is None:
            continue
        boxes.append(placed)
        classes.append(int(rng.integers(params.num_classes)))
    if not boxes:
        # pathological parameter combinations still yield one object
        w = h = params.scale_min
        boxes.append(Box(0.5, 0.5, w, h))
        classes.append(int(rng.integers(params.num_classes)))
    return Scene(
        objects=list(zip(boxes, classes)),
        image_size=params.image_size,
        seed=seed,
    )


@lru_cache(maxsize=8)
def class_signatures(num_classes: int, channels: int) -> np.ndarray:
    """Fixed random unit vectors keying each class, [C, d]."""
    rng = make_rng(SIGNATURE_SEED)
    sig = rng.normal(size=(num_classes, channels))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    return sig


def synth_features(
    scene: Scene,
    channels: int,
    level_sizes: tuple[int, ...] = (32, 16, 8),
    noise_sigma: float = 0.05,
    num_classes: int = 8,
) -> FeaturePyramid:
    """Render the scene onto each pyramid level (finest first)."""
    sig = class_signatures(num_classes, channels)
    levels = []
    for li, size in enumerate(level_sizes):
        stride = scene.image_size // size
        noise_rng = make_rng(scene.seed * 1_000_003 + li * 7919 + 17)
        fmap = noise_rng.normal(0.0, noise_sigma, size=(size, size, channels))
        centers = (np.arange(size) + 0.5) / size
        for box, cls in scene.objects:
            sx = max(box.w / 2.5, 0.5 / size)
            sy = max(box.h / 2.5, 0.5 / size)
            gx = np.exp(-0.5 * ((centers - box.cx) / sx) ** 2)
            gy = np.exp(-0.5 * ((centers - box.cy) / sy) ** 2)
            profile = np.outer(gy, gx)
            fmap += BLOB_AMPLITUDE * profile[:, :, None] * sig[cls][None, None, :]
        levels.append(Level(data=fmap, stride=stride))
    return FeaturePyramid(levels=levels)


@dataclass
class DataConfig:
    train_scenes: int = 512
    eval_scenes: int = 128
    scene: SceneParams = field(default_factory=SceneParams)
    level_sizes: tuple[int, ...] = (32, 16, 8)
    noise_sigma: float = 0.05


def build_split(
    base_seed: int,
    count: int,
    cfg: DataConfig,
    channels: int,
    offset: int = 0,
) -> list[tuple[FeaturePyramid, np.ndarray, np.ndarray, Scene]]:
    """Materialize (pyramid, gt_boxes, gt_classes, scene) samples."""
    out = []
    for i in range(count):
        scene = gen_scene(base_seed * 1_000_003 + offset + i, cfg.scene)
        pyramid = synth_features(
            scene,
            channels,
            cfg.level_sizes,
            cfg.noise_sigma,
            cfg.scene.num_classes,
        )
        boxes, classes = scene.gt_arrays()
        out.append((pyramid, boxes, classes, scene))
    return out


def build_dataset(seed: int, cfg: DataConfig, channels: int):
    """(train, eval) splits with disjoint scene seeds."""
    train = build_split(seed, cfg.train_scenes, cfg, channels, offset=0)
    evals = build_split(seed, cfg.eval_scenes, cfg, channels, offset=500_000)
    return train, evals
