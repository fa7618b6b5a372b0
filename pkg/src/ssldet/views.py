"""Three-view augmentation with exact box coordinate transforms.

V1 is the input resized to 224x224, V2 a random square crop of V1 (area
fraction uniform in [0.5, 1.0]) resized back to 224x224, and V3 the 2x
bilinear downsample of V2. Geometry is applied to clean images; photometric
jitter and blur are then applied independently per view from seeds derived
from the triple's seed, so V3 equals the downsample of V2 exactly in box
coordinates but not pixel values.

Resampling is bilinear with the half-pixel-center convention throughout:
output pixel center (i + 0.5) maps to input coordinate (i + 0.5) * scale,
sampled at that coordinate minus 0.5 in pixel-index space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box
from .segmentation import gaussian_blur

VIEW_SIZE = 224
V3_SIZE = 112
CROP_AREA_RANGE = (0.5, 1.0)
JITTER_RANGE = (0.6, 1.4)
BLUR_SIGMA_RANGE = (0.1, 2.0)
APPLY_PROB = 0.5
MIN_SURVIVING_FRACTION = 0.5  # of a box's V1 area inside the crop to stay valid

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ViewTriple:
    v1: np.ndarray  # (224, 224, C)
    v2: np.ndarray  # (224, 224, C)
    v3: np.ndarray  # (112, 112, C)
    boxes_v1: np.ndarray  # (K, 4) in V1 coordinates
    boxes_v2: np.ndarray  # (K, 4) in V2 coordinates; meaningful where valid
    boxes_v3: np.ndarray  # (K, 4), exactly boxes_v2 / 2
    valid: np.ndarray  # (K,) bool; False where the crop removed the box
    crop: tuple[float, float, float, float]  # V2 extent within V1
    seed: int

    @property
    def k(self) -> int:
        return self.boxes_v1.shape[0]

    def project_boxes(self, v1_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Transform additional V1-frame boxes into all three views.

        Returns (v1, v2, v3, valid) arrays using this triple's crop record;
        used to route proposals produced after augmentation (e.g. from the
        proposal head) through the same geometry.
        """
        v1 = np.asarray(v1_boxes, dtype=np.float64).reshape(-1, 4)
        v2, valid = _project_to_crop(v1, self.crop)
        return v1, v2, v2 * 0.5, valid


def _axis_coords(n_out: int, scale: float, offset: float = 0.0) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * scale + offset - 0.5


def _gather_axis(extent: int, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = np.clip(coords, 0.0, extent - 1.0)
    i0 = np.clip(np.floor(c).astype(np.intp), 0, max(extent - 2, 0))
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, c - i0


def resample(image: np.ndarray, out_hw: tuple[int, int], region: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """Bilinear resample of ``region`` (default: whole image) to ``out_hw``."""
    h, w = image.shape[:2]
    oh, ow = out_hw
    if region is None:
        region = (0.0, 0.0, float(w), float(h))
    rx1, ry1, rx2, ry2 = region
    ys = _axis_coords(oh, (ry2 - ry1) / oh, ry1)
    xs = _axis_coords(ow, (rx2 - rx1) / ow, rx1)
    y0, y1, fy = _gather_axis(h, ys)
    x0, x1, fx = _gather_axis(w, xs)
    fy = fy[:, None, None] if image.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if image.ndim == 3 else fx[None, :]
    top = image[np.ix_(y0, x0)] * (1 - fx) + image[np.ix_(y0, x1)] * fx
    bot = image[np.ix_(y1, x0)] * (1 - fx) + image[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def photometric(image: np.ndarray, seed: int) -> np.ndarray:
    """Brightness/contrast/saturation jitter and Gaussian blur, each with
    probability 0.5; factors uniform in [0.6, 1.4], blur sigma in [0.1, 2.0].
    Output is clamped to [0, 1] and deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    out = np.asarray(image, dtype=np.float64)
    if rng.random() < APPLY_PROB:
        out = out * rng.uniform(*JITTER_RANGE)
    if rng.random() < APPLY_PROB:
        mean = float((out @ _LUMA).mean()) if out.ndim == 3 else float(out.mean())
        out = mean + (out - mean) * rng.uniform(*JITTER_RANGE)
    if rng.random() < APPLY_PROB and out.ndim == 3:
        grey = (out @ _LUMA)[:, :, None]
        out = grey + (out - grey) * rng.uniform(*JITTER_RANGE)
    if rng.random() < APPLY_PROB:
        out = gaussian_blur(out, rng.uniform(*BLUR_SIGMA_RANGE))
    return np.clip(out, 0.0, 1.0)


def _project_to_crop(boxes_v1: np.ndarray, crop: tuple[float, float, float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Map V1-frame boxes into the crop's output frame.

    Boxes keeping at least half their V1 area inside the crop are clipped to
    it and transformed; the rest are flagged invalid (their row holds the raw
    affine image of the box, never consumed downstream).
    """
    cx1, cy1, cx2, cy2 = crop
    scale = VIEW_SIZE / (cx2 - cx1)
    raw = (boxes_v1 - np.array([cx1, cy1, cx1, cy1])) * scale
    clipped_x1 = np.maximum(boxes_v1[:, 0], cx1)
    clipped_y1 = np.maximum(boxes_v1[:, 1], cy1)
    clipped_x2 = np.minimum(boxes_v1[:, 2], cx2)
    clipped_y2 = np.minimum(boxes_v1[:, 3], cy2)
    iw = np.clip(clipped_x2 - clipped_x1, 0.0, None)
    ih = np.clip(clipped_y2 - clipped_y1, 0.0, None)
    area = (boxes_v1[:, 2] - boxes_v1[:, 0]) * (boxes_v1[:, 3] - boxes_v1[:, 1])
    valid = (iw * ih) >= MIN_SURVIVING_FRACTION * area
    out = raw.copy()
    clipped = (np.stack([clipped_x1, clipped_y1, clipped_x2, clipped_y2], axis=1) - np.array([cx1, cy1, cx1, cy1])) * scale
    out[valid] = clipped[valid]
    return out, valid


def make_views(image: np.ndarray, proposals: list[Box], seed: int) -> ViewTriple:
    """Build the augmented triple and transform the proposals into each view."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)

    v1_geom = resample(img, (VIEW_SIZE, VIEW_SIZE))
    sx, sy = VIEW_SIZE / w, VIEW_SIZE / h
    boxes_v1 = np.array([[b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy] for b in proposals], dtype=np.float64).reshape(-1, 4)

    area_frac = rng.uniform(*CROP_AREA_RANGE)
    side = VIEW_SIZE * np.sqrt(area_frac)
    cx1 = rng.uniform(0.0, VIEW_SIZE - side)
    cy1 = rng.uniform(0.0, VIEW_SIZE - side)
    crop = (cx1, cy1, cx1 + side, cy1 + side)
    v2_geom = resample(v1_geom, (VIEW_SIZE, VIEW_SIZE), region=crop)
    v3_geom = resample(v2_geom, (V3_SIZE, V3_SIZE))

    boxes_v2, valid = _project_to_crop(boxes_v1, crop)
    boxes_v3 = boxes_v2 * 0.5

    s1, s2, s3 = (int(v) for v in rng.integers(0, 2**63, size=3))
    return ViewTriple(
        v1=photometric(v1_geom, s1),
        v2=photometric(v2_geom, s2),
        v3=photometric(v3_geom, s3),
        boxes_v1=boxes_v1,
        boxes_v2=boxes_v2,
        boxes_v3=boxes_v3,
        valid=valid,
        crop=crop,
        seed=seed,
    )
