"""Unsupervised region proposals.

A single-pass pipeline: graph-based segmentation of the image into regions,
hierarchical merging of adjacent regions by colour/texture similarity, and
emission of every region's bounding box (initial and merged) filtered by the
aspect/scale constraints in :mod:`ssldet.geometry`.

The pixel graph is 4-connected with Euclidean colour-distance edge weights
computed on the Gaussian-smoothed image; region statistics (histograms,
boxes) are computed on the unsmoothed input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, filter_proposals

COLOUR_BINS = 25
TEXTURE_BINS = 8


@dataclass(frozen=True)
class SegmentationParams:
    scale: float = 500.0
    sigma: float = 0.9
    min_size: int = 10

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.min_size < 1:
            raise ValueError(f"min_size must be >= 1, got {self.min_size}")


@dataclass
class Segmentation:
    """Label map plus per-region statistics.

    Labels are contiguous 0..R-1; ``counts`` sums to the image area; ``boxes``
    tightly bound each region's pixels. Histograms are L1-normalized over all
    their bins.
    """

    labels: np.ndarray  # (H, W) int
    counts: np.ndarray  # (R,)
    boxes: list[Box]  # (R,) tight pixel bounds
    mean_colour: np.ndarray  # (R, C)
    colour_hist: np.ndarray  # (R, C*COLOUR_BINS)
    texture_hist: np.ndarray  # (R, C*TEXTURE_BINS)

    @property
    def num_regions(self) -> int:
        return len(self.counts)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with a truncated kernel (radius ceil(3*sigma)).

    Edge-replicating padding, so constant images are unchanged.
    """
    if sigma <= 0:
        return image.astype(np.float64, copy=True)
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = image.astype(np.float64, copy=True)
    for axis in (0, 1):
        padded = np.pad(
            out, [(radius, radius) if ax == axis else (0, 0) for ax in range(out.ndim)], mode="edge"
        )
        acc = np.zeros_like(out)
        for k, kv in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(k, k + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


class _UnionFind:
    __slots__ = ("parent", "size", "internal")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n  # max MST edge weight inside the component

    def find(self, x: int) -> int:
        root = x
        parent = self.parent
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int, w: float) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = w
        return a


def _grid_edges(smoothed: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """4-connected pixel graph; weights are Euclidean colour distances.

    Distances use 8-bit colour units (the [0, 1] channels scaled by 255):
    the conventional ``scale`` default assumes that range, since the merge
    predicate compares edge weights against scale/|component|.
    """
    scaled = smoothed * 255.0
    h, w, _ = scaled.shape
    ids = np.arange(h * w).reshape(h, w)
    dh = np.sqrt(((scaled[:, 1:] - scaled[:, :-1]) ** 2).sum(axis=2))
    dv = np.sqrt(((scaled[1:, :] - scaled[:-1, :]) ** 2).sum(axis=2))
    ea = np.concatenate([ids[:, :-1].ravel(), ids[:-1, :].ravel()])
    eb = np.concatenate([ids[:, 1:].ravel(), ids[1:, :].ravel()])
    ws = np.concatenate([dh.ravel(), dv.ravel()])
    return ea, eb, ws


def felzenszwalb_segment(image: np.ndarray, params: SegmentationParams | None = None) -> Segmentation:
    """Minimum-spanning-tree segmentation with the scale-dependent merge predicate.

    Two components merge when the connecting edge weight does not exceed
    min(Int(a) + scale/|a|, Int(b) + scale/|b|); a post-pass then merges any
    component smaller than ``min_size`` into its nearest neighbour by edge
    weight, so every emitted region has at least ``min_size`` pixels.
    """
    params = params or SegmentationParams()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, _ = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"image too small to segment: {img.shape}")

    ea, eb, ws = _grid_edges(gaussian_blur(img, params.sigma))
    order = np.argsort(ws, kind="stable")
    ea, eb, ws = ea[order], eb[order], ws[order]

    uf = _UnionFind(h * w)
    k = float(params.scale)
    for a, b, wt in zip(ea.tolist(), eb.tolist(), ws.tolist()):
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            continue
        if wt <= min(
            uf.internal[ra] + k / uf.size[ra], uf.internal[rb] + k / uf.size[rb]
        ):
            uf.union(ra, rb, wt)
    # Post-pass: absorb undersized components along the lightest edges first.
    min_size = params.min_size
    for a, b, wt in zip(ea.tolist(), eb.tolist(), ws.tolist()):
        ra, rb = uf.find(a), uf.find(b)
        if ra != rb and (uf.size[ra] < min_size or uf.size[rb] < min_size):
            uf.union(ra, rb, wt)

    roots = np.fromiter((uf.find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    _, labels_flat = np.unique(roots, return_inverse=True)
    labels = labels_flat.reshape(h, w)
    return _build_region_table(img, labels)


def _build_region_table(img: np.ndarray, labels: np.ndarray) -> Segmentation:
    h, w, c = img.shape
    flat = labels.ravel()
    nreg = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=nreg).astype(np.float64)

    ys, xs = np.mgrid[0:h, 0:w]
    x1 = np.full(nreg, np.inf)
    y1 = np.full(nreg, np.inf)
    x2 = np.full(nreg, -np.inf)
    y2 = np.full(nreg, -np.inf)
    np.minimum.at(x1, flat, xs.ravel())
    np.minimum.at(y1, flat, ys.ravel())
    np.maximum.at(x2, flat, xs.ravel())
    np.maximum.at(y2, flat, ys.ravel())
    # Pixel (i, j) covers [j, j+1) x [i, i+1), so the tight box extends +1.
    boxes = [Box(float(a), float(b), float(d) + 1.0, float(e) + 1.0) for a, b, d, e in zip(x1, y1, x2, y2)]

    mean_colour = np.zeros((nreg, c))
    for ch in range(c):
        mean_colour[:, ch] = np.bincount(flat, weights=img[:, :, ch].ravel(), minlength=nreg) / counts

    colour_hist = np.zeros((nreg, c * COLOUR_BINS))
    bins = np.clip((img * COLOUR_BINS).astype(np.int64), 0, COLOUR_BINS - 1)
    for ch in range(c):
        idx = flat * (c * COLOUR_BINS) + ch * COLOUR_BINS + bins[:, :, ch].ravel()
        colour_hist.ravel()[:] += np.bincount(idx, minlength=colour_hist.size)
    colour_hist /= colour_hist.sum(axis=1, keepdims=True)

    texture_hist = np.zeros((nreg, c * TEXTURE_BINS))
    for ch in range(c):
        gy, gx = np.gradient(img[:, :, ch])
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        tbin = np.clip(((ang + np.pi) / (2 * np.pi) * TEXTURE_BINS).astype(np.int64), 0, TEXTURE_BINS - 1)
        idx = flat * (c * TEXTURE_BINS) + ch * TEXTURE_BINS + tbin.ravel()
        texture_hist.ravel()[:] += np.bincount(idx, minlength=texture_hist.size)
    texture_hist /= texture_hist.sum(axis=1, keepdims=True)

    return Segmentation(labels, counts, boxes, mean_colour, colour_hist, texture_hist)


def _adjacency(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def _hist_intersection(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.minimum(a, b).sum())


def merge_regions(seg: Segmentation) -> list[Box]:
    """Greedy hierarchical merging; returns every region box ever created.

    At each step the most similar adjacent pair merges (similarity = colour
    histogram intersection + texture histogram intersection, ties broken by
    smallest region ids); merged histograms are the pixel-count-weighted
    averages of the children's. R initial regions yield exactly 2R-1 boxes
    before exact-coordinate deduplication.
    """
    n = seg.num_regions
    boxes: list[Box] = list(seg.boxes)
    if n == 1:
        return boxes

    counts = {i: float(seg.counts[i]) for i in range(n)}
    colour = {i: seg.colour_hist[i].copy() for i in range(n)}
    texture = {i: seg.texture_hist[i].copy() for i in range(n)}
    extents = {i: seg.boxes[i].coords() for i in range(n)}
    neighbours: dict[int, set[int]] = {i: set() for i in range(n)}
    sims: dict[tuple[int, int], float] = {}

    def similarity(a: int, b: int) -> float:
        return _hist_intersection(colour[a], colour[b]) + _hist_intersection(texture[a], texture[b])

    for a, b in _adjacency(seg.labels):
        neighbours[a].add(b)
        neighbours[b].add(a)
        sims[(a, b)] = similarity(a, b)

    next_id = n
    while sims:
        (a, b), _ = max(sims.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))
        new = next_id
        next_id += 1
        ca, cb = counts[a], counts[b]
        counts[new] = ca + cb
        colour[new] = (ca * colour[a] + cb * colour[b]) / (ca + cb)
        texture[new] = (ca * texture[a] + cb * texture[b]) / (ca + cb)
        ea, eb2 = extents[a], extents[b]
        extents[new] = (min(ea[0], eb2[0]), min(ea[1], eb2[1]), max(ea[2], eb2[2]), max(ea[3], eb2[3]))
        boxes.append(Box(*extents[new]))

        merged_nbrs = (neighbours[a] | neighbours[b]) - {a, b}
        for r in (a, b):
            for nb in neighbours[r]:
                sims.pop((min(r, nb), max(r, nb)), None)
                neighbours[nb].discard(r)
            del neighbours[r], counts[r], colour[r], texture[r], extents[r]
        neighbours[new] = merged_nbrs
        for nb in merged_nbrs:
            neighbours[nb].add(new)
            sims[(min(new, nb), max(new, nb))] = similarity(new, nb)

    seen: set[tuple[float, float, float, float]] = set()
    deduped = []
    for b in boxes:
        key = b.coords()
        if key not in seen:
            seen.add(key)
            deduped.append(b)
    return deduped


def propose(image: np.ndarray, params: SegmentationParams | None = None) -> list[Box]:
    """Segment, merge, and filter: the full proposal pipeline for one image.

    Deterministic for fixed input and params. May return an empty list (a
    uniform image yields only the full-image box, which the scale filter
    rejects); training skips such images.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    seg = felzenszwalb_segment(img, params)
    merged = merge_regions(seg)
    h, w = img.shape[:2]
    return filter_proposals(merged, float(w), float(h))
