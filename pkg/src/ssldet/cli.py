"""Command-line entry points: propose, pretrain, evaluate, gradcheck, synth.

Exit codes: 0 ok, 1 validation failure, 2 usage error (argparse default).
``SSLDET_THREADS`` caps the worker pool used for per-image proposal
generation; the default of 1 keeps every subcommand single-threaded and
bit-reproducible.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .corpus import list_images, load_annotated_corpus, proposal_path, read_ppm
from .detector import ModelPair
from .evaluation import evaluate_model, write_detections_file, write_pr_curve_svg
from .geometry import write_boxes
from .segmentation import SegmentationParams, propose
from .synth import generate_corpus
from .training import TrainConfig, train_joint, train_separate


def _propose_one(args: tuple[str, str, float, float, int]) -> tuple[str, int]:
    image_path, cache_file, scale, sigma, min_size = args
    params = SegmentationParams(scale=scale, sigma=sigma, min_size=min_size)
    boxes = propose(read_ppm(image_path), params)
    write_boxes(cache_file, boxes)
    return Path(image_path).stem, len(boxes)


def cmd_propose(args) -> int:
    cache_dir = Path(args.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    failures = 0
    for path in list_images(args.image_dir):
        jobs.append(
            (str(path), str(proposal_path(cache_dir, path.stem)), args.scale, args.sigma, args.min_size)
        )
    threads = int(os.environ.get("SSLDET_THREADS", "1"))
    results: list[tuple[str, int]] = []
    if threads > 1:
        from multiprocessing import Pool

        with Pool(threads) as pool:
            iterator = pool.imap(_propose_one, jobs)
            for job in jobs:
                try:
                    results.append(next(iterator))
                except Exception as exc:  # pragma: no cover - parallel path
                    failures += 1
                    print(f"warning: failed on {job[0]}: {exc}", file=sys.stderr)
    else:
        for job in jobs:
            try:
                results.append(_propose_one(job))
            except Exception as exc:
                failures += 1
                print(f"warning: failed on {job[0]}: {exc}", file=sys.stderr)
    if not results:
        print("error: proposal generation failed for every image", file=sys.stderr)
        return 1
    mean_props = float(np.mean([n for _, n in results]))
    print(f"proposed {len(results)} images -> {args.cache_dir} (mean proposals/image: {mean_props:.2f})")
    return 0


def cmd_pretrain(args) -> int:
    config = TrainConfig.from_file(args.config)
    result = train_joint(config) if config.strategy == "joint" else train_separate(config)
    if result.skipped_images:
        print(f"skipped {result.skipped_images} images with empty proposal caches")
    print(
        f"trained {result.steps} steps -> {result.checkpoint_path} "
        f"(step-0 snapshot: {result.step0_path}, log: {result.log_path})"
    )
    return 0


def cmd_evaluate(args) -> int:
    items = load_annotated_corpus(args.image_dir)
    pair = ModelPair(seed=0)
    pair.load(args.checkpoint)
    metrics, report, detections = evaluate_model(
        pair, items, k=args.k, nms_threshold=args.nms_threshold, iou_thresh=args.iou_thresh
    )
    for key, val in metrics.items():
        print(f"{key}={val!r}")
    for line in report.to_kv_lines():
        print(line)
    print(report.to_table())
    if args.detections_out:
        write_detections_file(args.detections_out, detections)
    if args.pr_curve_out:
        gts = {item.stem: [b for b in (item.annotations or [])] for item in items}
        from .evaluation import class_agnostic

        write_pr_curve_svg(args.pr_curve_out, detections, {k: class_agnostic(v) for k, v in gts.items()})
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck_mod.run_all(seed=args.seed)
    worst = 0.0
    for rep in reports:
        print(rep.line())
        worst = max(worst, rep.max_rel_err)
    failed = [r for r in reports if not r.passed]
    print(f"gradcheck: {len(reports) - len(failed)}/{len(reports)} checks passed, worst rel err {worst:.3e}")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    stems = generate_corpus(args.out_dir, args.n, args.seed)
    print(f"wrote {len(stems)} images to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssldet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("propose", help="populate a proposal cache for a corpus")
    p.add_argument("image_dir")
    p.add_argument("cache_dir")
    p.add_argument("--scale", type=float, default=SegmentationParams.scale)
    p.add_argument("--sigma", type=float, default=SegmentationParams.sigma)
    p.add_argument("--min-size", dest="min_size", type=int, default=SegmentationParams.min_size)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("pretrain", help="run a training strategy from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="measure localization quality of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("image_dir", help="annotated corpus directory")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--nms-threshold", dest="nms_threshold", type=float, default=0.7)
    p.add_argument("--iou-thresh", dest="iou_thresh", type=float, default=0.5)
    p.add_argument("--detections-out", dest="detections_out", default="")
    p.add_argument("--pr-curve-out", dest="pr_curve_out", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and layer family")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("n", type=int)
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
