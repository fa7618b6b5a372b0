"""Corpus handling: binary PPM images, proposal caches, box annotations.

A corpus is a directory of 8-bit RGB portable pixmaps (``.ppm``), optionally
with one ``<stem>.boxes`` annotation file per image (box lines with class
ids) and a proposal cache directory holding one ``<stem>.props`` file per
image in the same box line format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box, read_boxes


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as a binary P6 pixmap."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap into an (H, W, 3) float array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"not a binary PPM (P6) file: {path}")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment to end of line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise ValueError(f"only 8-bit pixmaps are supported, got maxval {maxval}: {path}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def list_images(image_dir) -> list[Path]:
    paths = sorted(Path(image_dir).glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm images found in {image_dir}")
    return paths


def proposal_path(cache_dir, stem: str) -> Path:
    return Path(cache_dir) / f"{stem}.props"


def annotation_path(image_dir, stem: str) -> Path:
    return Path(image_dir) / f"{stem}.boxes"


@dataclass
class CorpusItem:
    stem: str
    image: np.ndarray
    proposals: list[Box] | None = None
    annotations: list[Box] | None = None


def load_training_corpus(image_dir, cache_dir) -> tuple[list[CorpusItem], int]:
    """Load images with cached proposals; items without proposals are skipped.

    Returns (items, skipped_count). Raises if a cache file is missing, since
    that means the cache was never built for this corpus.
    """
    items: list[CorpusItem] = []
    skipped = 0
    for path in list_images(image_dir):
        cache_file = proposal_path(cache_dir, path.stem)
        if not cache_file.exists():
            raise FileNotFoundError(
                f"no proposal cache for {path.name}: expected {cache_file} (run `propose` first)"
            )
        props = read_boxes(cache_file)
        if not props:
            skipped += 1
            continue
        items.append(CorpusItem(path.stem, read_ppm(path), proposals=props))
    return items, skipped


def load_annotated_corpus(image_dir) -> list[CorpusItem]:
    """Load images with their ground-truth annotation files."""
    items = []
    for path in list_images(image_dir):
        ann_file = annotation_path(image_dir, path.stem)
        if not ann_file.exists():
            raise FileNotFoundError(f"missing annotations for {path.name}: expected {ann_file}")
        items.append(CorpusItem(path.stem, read_ppm(path), annotations=read_boxes(ann_file)))
    return items
