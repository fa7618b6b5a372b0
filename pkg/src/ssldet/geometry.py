"""Box algebra: IoU, anchor-delta codec, NMS, proposal filters, pyramid level assignment.

Boxes are axis-aligned rectangles stored in corner form ``(x1, y1, x2, y2)``
with strictly positive width and height. All functions here are pure and
thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Anchor configuration for 224-pixel inputs: one size per pyramid level,
# three aspect ratios (height/width) shared across levels.
FPN_LEVELS = (2, 3, 4, 5)
FPN_STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}
ANCHOR_SIZES = {2: 24.0, 3: 48.0, 4: 96.0, 5: 192.0}
ANCHOR_RATIOS = (0.5, 1.0, 2.0)

# Proposal filters: aspect ratio w/h and relative scale sqrt(wh)/sqrt(WH),
# both inclusive.
MIN_ASPECT = 1.0 / 3.0
MAX_ASPECT = 3.0
MIN_REL_SCALE = 0.3
MAX_REL_SCALE = 0.8

# Level assignment constants: a 224-pixel box lands on level 4.
LEVEL_REF_SCALE = 224.0
LEVEL_REF = 4


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with optional detection score and class id."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float | None = None
    class_id: int | None = None

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def with_score(self, score: float) -> "Box":
        return Box(self.x1, self.y1, self.x2, self.y2, score, self.class_id)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_deltas(anchor: Box, target: Box) -> tuple[float, float, float, float]:
    """Encode ``target`` relative to ``anchor`` as (tx, ty, tw, th).

    tx = (xc - xa) / wa, ty = (yc - ya) / ha, tw = ln(w / wa), th = ln(h / ha),
    with centers and sizes of the two boxes.
    """
    xa, ya = anchor.center
    xc, yc = target.center
    return (
        (xc - xa) / anchor.width,
        (yc - ya) / anchor.height,
        math.log(target.width / anchor.width),
        math.log(target.height / anchor.height),
    )


def decode_deltas(
    anchor: Box,
    t: tuple[float, float, float, float],
    clip_size: tuple[float, float] | None = None,
) -> Box | None:
    """Invert :func:`encode_deltas`; optionally clip to ``(width, height)``.

    Returns None when clipping leaves less than one pixel of width or height
    (a rejected box, not an error).
    """
    tx, ty, tw, th = t
    xa, ya = anchor.center
    xc = xa + tx * anchor.width
    yc = ya + ty * anchor.height
    w = anchor.width * math.exp(tw)
    h = anchor.height * math.exp(th)
    x1, x2 = xc - 0.5 * w, xc + 0.5 * w
    y1, y2 = yc - 0.5 * h, yc + 0.5 * h
    if clip_size is not None:
        iw, ih = clip_size
        x1, x2 = min(max(x1, 0.0), iw), min(max(x2, 0.0), iw)
        y1, y2 = min(max(y1, 0.0), ih), min(max(y2, 0.0), ih)
        if x2 - x1 < 1.0 or y2 - y1 < 1.0:
            return None
    return Box(x1, y1, x2, y2, anchor.score, anchor.class_id)


def encode_deltas_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized delta encoding over matched (N, 4) anchor/target arrays."""
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    wt = targets[:, 2] - targets[:, 0]
    ht = targets[:, 3] - targets[:, 1]
    xt = targets[:, 0] + 0.5 * wt
    yt = targets[:, 1] + 0.5 * ht
    return np.stack(
        [(xt - xa) / wa, (yt - ya) / ha, np.log(wt / wa), np.log(ht / ha)], axis=1
    )


def decode_deltas_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized delta decoding; returns (N, 4) corner-form boxes, unclipped."""
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    xc = xa + deltas[:, 0] * wa
    yc = ya + deltas[:, 1] * ha
    w = wa * np.exp(deltas[:, 2])
    h = ha * np.exp(deltas[:, 3])
    return np.stack(
        [xc - 0.5 * w, yc - 0.5 * h, xc + 0.5 * w, yc + 0.5 * h], axis=1
    )


def nms(boxes: list[Box], iou_threshold: float) -> list[Box]:
    """Greedy non-maximum suppression over scored boxes.

    Selection is by descending score with ties broken by earlier input index;
    every kept pair has IoU <= threshold. Output keeps the selection order.
    """
    if not boxes:
        return []
    if any(b.score is None for b in boxes):
        raise ValueError("nms requires scored boxes")
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept: list[Box] = []
    for i in order:
        if all(iou(boxes[i], k) <= iou_threshold for k in kept):
            kept.append(boxes[i])
    return kept


def filter_proposals(boxes: list[Box], image_w: float, image_h: float) -> list[Box]:
    """Keep boxes with aspect in [1/3, 3] and relative scale in [0.3, 0.8].

    The relative scale is sqrt(w*h) / sqrt(W*H) for an image of extent W x H.
    Order is preserved; the filter is idempotent.
    """
    scale_norm = math.sqrt(image_w * image_h)
    kept = []
    for b in boxes:
        aspect = b.width / b.height
        rel = math.sqrt(b.area) / scale_norm
        if MIN_ASPECT <= aspect <= MAX_ASPECT and MIN_REL_SCALE <= rel <= MAX_REL_SCALE:
            kept.append(b)
    return kept


def assign_fpn_level(box: Box) -> int:
    """Pyramid level for a box: clamp(floor(4 + log2(sqrt(wh) / 224)), 2, 5)."""
    level = LEVEL_REF + math.floor(math.log2(math.sqrt(box.area) / LEVEL_REF_SCALE))
    return min(max(level, FPN_LEVELS[0]), FPN_LEVELS[-1])


@dataclass(frozen=True)
class AnchorSet:
    """Per-level anchor boxes for an H x W input, in image coordinates.

    Anchors at level l tile the stride-2**l grid with one box per
    (ratio, row, col) triple, ordered to match the C-order flattening of a
    (3, H_l, W_l) head output. A ratio-r, size-s anchor has width s/sqrt(r)
    and height s*sqrt(r), so its area is exactly s**2.
    """

    image_size: tuple[int, int]
    levels: tuple[int, ...]
    boxes: dict[int, np.ndarray]

    @property
    def total(self) -> int:
        return sum(b.shape[0] for b in self.boxes.values())

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.boxes[lv] for lv in self.levels], axis=0)

    def positions(self) -> int:
        """Number of spatial anchor positions (anchor count / ratios)."""
        return self.total // len(ANCHOR_RATIOS)


def build_anchors(image_size: tuple[int, int], levels: tuple[int, ...] = FPN_LEVELS) -> AnchorSet:
    """Generate the anchor grid for an (H, W) input over the given levels."""
    h_img, w_img = image_size
    per_level: dict[int, np.ndarray] = {}
    for lv in levels:
        stride = FPN_STRIDES[lv]
        if h_img % stride or w_img % stride:
            raise ValueError(f"image size {image_size} not divisible by stride {stride}")
        hl, wl = h_img // stride, w_img // stride
        cy = (np.arange(hl) + 0.5) * stride
        cx = (np.arange(wl) + 0.5) * stride
        out = np.empty((len(ANCHOR_RATIOS), hl, wl, 4))
        for ai, r in enumerate(ANCHOR_RATIOS):
            s = ANCHOR_SIZES[lv]
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            out[ai, :, :, 0] = cx[None, :] - 0.5 * w
            out[ai, :, :, 1] = cy[:, None] - 0.5 * h
            out[ai, :, :, 2] = cx[None, :] + 0.5 * w
            out[ai, :, :, 3] = cy[:, None] + 0.5 * h
        per_level[lv] = out.reshape(-1, 4)
    return AnchorSet(image_size=(h_img, w_img), levels=tuple(levels), boxes=per_level)


def format_box_line(box: Box) -> str:
    """One-line serialization: ``x1 y1 x2 y2 [score] [class_id]``."""
    parts = [repr(float(v)) for v in box.coords()]
    if box.score is not None:
        parts.append(repr(float(box.score)))
        if box.class_id is not None:
            parts.append(str(int(box.class_id)))
    elif box.class_id is not None:
        raise ValueError("a class_id without a score is not representable")
    return " ".join(parts)


def parse_box_line(line: str) -> Box:
    """Inverse of :func:`format_box_line`."""
    fields = line.split()
    if len(fields) not in (4, 5, 6):
        raise ValueError(f"malformed box line: {line!r}")
    x1, y1, x2, y2 = (float(v) for v in fields[:4])
    score = float(fields[4]) if len(fields) >= 5 else None
    class_id = int(fields[5]) if len(fields) == 6 else None
    return Box(x1, y1, x2, y2, score, class_id)


def write_boxes(path, boxes: list[Box]) -> None:
    with open(path, "w") as fh:
        for b in boxes:
            fh.write(format_box_line(b) + "\n")


def read_boxes(path) -> list[Box]:
    with open(path) as fh:
        return [parse_box_line(ln) for ln in fh if ln.strip()]
