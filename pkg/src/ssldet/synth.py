"""Synthetic corpus generation: uniform-colour shapes on textured backgrounds.

Each 224x224 image holds 1-5 non-crowded rectangles or ellipses whose colour
is well separated from the background, sized so their boxes survive the
proposal filters. Ground-truth boxes (class 0 = rectangle, 1 = ellipse) are
written alongside each image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import annotation_path, write_ppm
from .geometry import Box, iou, write_boxes

IMAGE_SIZE = 224
SQRT_AREA_RANGE = (72.0, 150.0)
ASPECT_RANGE = (0.5, 2.0)
MAX_SHAPE_IOU = 0.1
COLOUR_JITTER = 0.15
PLACEMENT_TRIES = 25


def _background(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.25, 0.75, size=3)
    ramp_x = np.linspace(-1.0, 1.0, IMAGE_SIZE)[None, :, None]
    ramp_y = np.linspace(-1.0, 1.0, IMAGE_SIZE)[:, None, None]
    img = (
        base[None, None, :]
        + rng.uniform(-0.08, 0.08, size=3) * ramp_x
        + rng.uniform(-0.08, 0.08, size=3) * ramp_y
        + rng.normal(0.0, 0.02, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
    )
    return np.clip(img, 0.0, 1.0), base


def _shape_colour(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    """A colour from the cube octant opposite the background base, so shape
    boundaries stay well above the segmentation merge threshold even after
    the pre-smoothing blur."""
    corner = np.where(base >= 0.5, 0.0, 1.0)
    jitter = rng.uniform(0.0, COLOUR_JITTER, size=3)
    return np.abs(corner - jitter)


def generate_image(rng: np.random.Generator) -> tuple[np.ndarray, list[Box]]:
    img, base = _background(rng)
    boxes: list[Box] = []
    n_shapes = int(rng.integers(1, 6))
    for _ in range(n_shapes):
        for _ in range(PLACEMENT_TRIES):
            side = rng.uniform(*SQRT_AREA_RANGE)
            aspect = np.exp(rng.uniform(np.log(ASPECT_RANGE[0]), np.log(ASPECT_RANGE[1])))
            w = int(round(side * np.sqrt(aspect)))
            h = int(round(side / np.sqrt(aspect)))
            if w >= IMAGE_SIZE - 4 or h >= IMAGE_SIZE - 4:
                continue
            x1 = int(rng.integers(2, IMAGE_SIZE - w - 2))
            y1 = int(rng.integers(2, IMAGE_SIZE - h - 2))
            cand = Box(float(x1), float(y1), float(x1 + w), float(y1 + h))
            if all(iou(cand, b) <= MAX_SHAPE_IOU for b in boxes):
                break
        else:
            continue
        colour = _shape_colour(rng, base)
        is_ellipse = bool(rng.random() < 0.5)
        if is_ellipse:
            ys, xs = np.mgrid[y1 : y1 + h, x1 : x1 + w]
            cx, cy = x1 + w / 2.0, y1 + h / 2.0
            mask = ((xs + 0.5 - cx) / (w / 2.0)) ** 2 + ((ys + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0
            img[y1 : y1 + h, x1 : x1 + w][mask] = colour
        else:
            img[y1 : y1 + h, x1 : x1 + w] = colour
        boxes.append(
            Box(cand.x1, cand.y1, cand.x2, cand.y2, score=1.0, class_id=1 if is_ellipse else 0)
        )
    return img, boxes


def generate_corpus(out_dir, n: int, seed: int) -> list[str]:
    """Write ``n`` images plus annotation files; deterministic per seed."""
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stems = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, boxes = generate_image(rng)
        stem = f"img{i:04d}"
        write_ppm(out / f"{stem}.ppm", img)
        write_boxes(annotation_path(out, stem), boxes)
        stems.append(stem)
    return stems
