#!/usr/bin/env python3
"""Run the joint-training configuration matrix: loss routing x proposal source.

Four configurations (backbone receives det-only or det+RPN gradient; the
detector head contrasts selective-search proposals alone or with RPN
proposals mixed in) are trained for a fixed number of steps each on the same
corpus and seed, and a per-configuration report of final losses is emitted.
The RPN-proposal source is known to destabilize the detector head; it is
included here for reproduction, never as a default.
"""

import argparse
import json
import math
from pathlib import Path

from ssldet.corpus import list_images, proposal_path, read_ppm
from ssldet.geometry import write_boxes
from ssldet.segmentation import propose
from ssldet.synth import generate_corpus
from ssldet.training import BACKBONE_LOSSES, PROPOSAL_SOURCES, TrainConfig, train_joint


def ensure_inputs(root: Path, n: int, seed: int) -> tuple[Path, Path]:
    image_dir = root / "images"
    cache_dir = root / "cache"
    if not image_dir.exists():
        generate_corpus(image_dir, n, seed)
    cache_dir.mkdir(parents=True, exist_ok=True)
    for p in list_images(image_dir):
        out = proposal_path(cache_dir, p.stem)
        if not out.exists():
            write_boxes(out, propose(read_ppm(p)))
    return image_dir, cache_dir


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/ablation_matrix")
    ap.add_argument("--corpus-n", type=int, default=16)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--base-lr", type=float, default=0.01)
    ap.add_argument("--reg-weight", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = Path(args.workdir)
    image_dir, cache_dir = ensure_inputs(root, args.corpus_n, args.seed)
    rows = []
    for backbone_loss in BACKBONE_LOSSES:
        for proposals in PROPOSAL_SOURCES:
            tag = f"{backbone_loss}__{proposals}"
            config = TrainConfig(
                strategy="joint",
                backbone_loss=backbone_loss,
                detector_proposals=proposals,
                steps=args.steps,
                batch_size=args.batch_size,
                base_lr=args.base_lr,
                reg_weight=args.reg_weight,
                seed=args.seed,
                image_dir=str(image_dir),
                cache_dir=str(cache_dir),
                checkpoint_path=str(root / f"{tag}.ckpt"),
            )
            result = train_joint(config)
            finite = all(
                math.isfinite(r[1]) and math.isfinite(r[2]) for r in result.log_rows
            )
            rows.append(
                {
                    "backbone_loss": backbone_loss,
                    "detector_proposals": proposals,
                    "steps": result.steps,
                    "final_loss_rpn": result.log_rows[-1][1],
                    "final_loss_det": result.log_rows[-1][2],
                    "all_losses_finite": finite,
                    "log": str(result.log_path),
                }
            )
            print(json.dumps(rows[-1]))
    (root / "matrix.json").write_text(json.dumps(rows, indent=2))
    print(f"wrote {root / 'matrix.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
