"""Detection quality measurement: recall, average precision, stratified errors.

Average precision follows the all-point interpolation convention: greedy
matching of descending-score detections to unmatched same-class ground truth
at the IoU threshold, then the area under the precision envelope.

Error stratification attributes mAP headroom to one category per false
positive (Cls, Loc, Dupe, Bkg) plus Miss for undetected ground truth; each
category's delta-mAP comes from an oracle fix (correct or remove that
category's errors, re-evaluate, subtract the base mAP), computed
independently per category against the same base.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import CorpusItem
from .detector import ModelPair, build_anchors, rpn_propose, to_input
from .geometry import Box, iou, parse_box_line

FG_THRESH = 0.5
BG_THRESH = 0.1

Detections = dict[str, list[Box]]
GroundTruth = dict[str, list[Box]]


def _class_ids(gt: GroundTruth) -> list[int]:
    return sorted({b.class_id for boxes in gt.values() for b in boxes})


@dataclass
class _DetRecord:
    image_id: str
    box: Box
    is_tp: bool = False
    matched_gt: int = -1  # index within its image's gt list
    iou_same: float = 0.0
    iou_diff: float = 0.0
    best_same: int = -1
    best_diff: int = -1


def _match_class(detections: Detections, gt: GroundTruth, cls: int, iou_thresh: float) -> tuple[list[_DetRecord], dict[str, list[bool]], int]:
    """Greedy per-class matching; returns det records in rank order."""
    flat: list[tuple[float, int, str, Box]] = []
    for img_id in sorted(detections):
        for j, b in enumerate(detections[img_id]):
            if b.class_id == cls:
                flat.append((-(b.score or 0.0), j, img_id, b))
    flat.sort(key=lambda r: (r[0], r[2], r[1]))
    matched = {img_id: [False] * len(gt.get(img_id, [])) for img_id in gt}
    npos = sum(1 for boxes in gt.values() for b in boxes if b.class_id == cls)
    records = []
    for _, _, img_id, det in flat:
        rec = _DetRecord(img_id, det)
        best_iou, best_idx = 0.0, -1
        for gi, g in enumerate(gt.get(img_id, [])):
            if g.class_id != cls or matched[img_id][gi]:
                continue
            ov = iou(det, g)
            if ov > best_iou:
                best_iou, best_idx = ov, gi
        if best_iou >= iou_thresh and best_idx >= 0:
            rec.is_tp = True
            rec.matched_gt = best_idx
            matched[img_id][best_idx] = True
        records.append(rec)
    return records, matched, npos


def _class_ap(detections: Detections, gt: GroundTruth, cls: int, iou_thresh: float) -> float | None:
    records, _, npos = _match_class(detections, gt, cls, iou_thresh)
    if npos == 0:
        return None
    if not records:
        return 0.0
    tp = np.cumsum([r.is_tp for r in records], dtype=np.float64)
    fp = np.cumsum([not r.is_tp for r in records], dtype=np.float64)
    recall = tp / npos
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(detections: Detections, gt: GroundTruth, iou_thresh: float = 0.5) -> float:
    """Mean AP over classes present in the ground truth."""
    aps = [_class_ap(detections, gt, c, iou_thresh) for c in _class_ids(gt)]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else 0.0


def proposal_recall(proposals: Detections, gt: GroundTruth, iou_thresh: float = 0.5) -> float:
    """Fraction of ground-truth boxes covered by at least one proposal."""
    total = 0
    hit = 0
    for img_id, boxes in gt.items():
        props = proposals.get(img_id, [])
        for g in boxes:
            total += 1
            if any(iou(p, g) >= iou_thresh for p in props):
                hit += 1
    if total == 0:
        raise ValueError("proposal_recall requires nonempty ground truth")
    return hit / total


def mean_best_iou(proposals: Detections, refs: Detections) -> float:
    """Mean over proposals of each one's best IoU against the reference boxes."""
    vals = []
    for img_id, boxes in proposals.items():
        targets = refs.get(img_id, [])
        for p in boxes:
            vals.append(max((iou(p, g) for g in targets), default=0.0))
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class ErrorReport:
    """Per-category delta-mAP attributions plus the base mAP they refer to."""

    base_map: float
    d_cls: float = 0.0
    d_loc: float = 0.0
    d_dupe: float = 0.0
    d_bkg: float = 0.0
    d_miss: float = 0.0
    d_false_pos: float = 0.0
    d_false_neg: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)

    def columns(self) -> dict[str, float]:
        return {
            "Cls": self.d_cls,
            "Loc": self.d_loc,
            "Dupe": self.d_dupe,
            "Bkg": self.d_bkg,
            "Miss": self.d_miss,
            "FalsePos": self.d_false_pos,
            "FalseNeg": self.d_false_neg,
        }

    def to_table(self) -> str:
        cols = self.columns()
        lines = [f"base_mAP {self.base_map:.4f}"]
        lines.append(f"{'category':<10} {'delta_mAP':>10} {'count':>6}")
        for name, val in cols.items():
            lines.append(f"{name:<10} {val:>10.4f} {self.counts.get(name, 0):>6}")
        return "\n".join(lines)

    def to_kv_lines(self) -> list[str]:
        out = [f"base_map={self.base_map!r}"]
        for name, val in self.columns().items():
            out.append(f"delta_{name.lower()}={val!r}")
        return out


def _classify_false_positive(rec: _DetRecord, fg: float, bg: float) -> str:
    if rec.iou_same >= fg:
        return "Dupe"
    if rec.iou_diff >= fg:
        return "Cls"
    if rec.iou_same >= bg:
        return "Loc"
    if rec.iou_diff >= bg:
        return "Cls"
    return "Bkg"


def stratify_errors(
    detections: Detections,
    gt: GroundTruth,
    fg_thresh: float = FG_THRESH,
    bg_thresh: float = BG_THRESH,
) -> ErrorReport:
    """Partition false positives into Cls/Loc/Dupe/Bkg, count misses, and
    attribute delta-mAP to each category through oracle fixes."""
    base = average_precision(detections, gt, fg_thresh)
    records: list[_DetRecord] = []
    matched_by_img: dict[str, list[bool]] = {img: [False] * len(b) for img, b in gt.items()}
    det_classes = {b.class_id for boxes in detections.values() for b in boxes}
    gt_classes = {b.class_id for boxes in gt.values() for b in boxes}
    for cls in sorted(det_classes | gt_classes):
        recs, matched, _ = _match_class(detections, gt, cls, fg_thresh)
        for img_id, flags in matched.items():
            for gi, f in enumerate(flags):
                if f:
                    matched_by_img[img_id][gi] = True
        for rec in recs:
            for gi, g in enumerate(gt.get(rec.image_id, [])):
                ov = iou(rec.box, g)
                if g.class_id == cls and ov > rec.iou_same:
                    rec.iou_same, rec.best_same = ov, gi
                elif g.class_id != cls and ov > rec.iou_diff:
                    rec.iou_diff, rec.best_diff = ov, gi
        records.extend(recs)

    categories: dict[str, list[_DetRecord]] = {"Cls": [], "Loc": [], "Dupe": [], "Bkg": []}
    for rec in records:
        if not rec.is_tp:
            categories[_classify_false_positive(rec, fg_thresh, bg_thresh)].append(rec)
    missed = [
        (img_id, gi)
        for img_id, flags in matched_by_img.items()
        for gi, f in enumerate(flags)
        if not f
    ]

    def without(records_to_drop: list[_DetRecord]) -> Detections:
        drop = {(r.image_id, id(r.box)) for r in records_to_drop}
        return {
            img: [b for b in boxes if (img, id(b)) not in drop]
            for img, boxes in detections.items()
        }

    def fixed_map(dets: Detections, gts: GroundTruth) -> float:
        return average_precision(dets, gts, fg_thresh)

    report = ErrorReport(base_map=base)
    report.counts = {
        "Cls": len(categories["Cls"]),
        "Loc": len(categories["Loc"]),
        "Dupe": len(categories["Dupe"]),
        "Bkg": len(categories["Bkg"]),
        "Miss": len(missed),
        "FalsePos": sum(len(v) for v in categories.values()),
        "FalseNeg": len(missed),
    }

    def _index_of(boxes: list[Box], target: Box) -> int:
        return next(i for i, b in enumerate(boxes) if b is target)

    # Cls: correct the class when the well-localized gt is free, else remove.
    cls_fixed = {img: list(boxes) for img, boxes in detections.items()}
    removed: list[_DetRecord] = []
    for rec in categories["Cls"]:
        gts = gt.get(rec.image_id, [])
        if (
            rec.iou_diff >= fg_thresh
            and rec.best_diff >= 0
            and not matched_by_img[rec.image_id][rec.best_diff]
        ):
            idx = _index_of(cls_fixed[rec.image_id], rec.box)
            b = rec.box
            cls_fixed[rec.image_id][idx] = Box(
                b.x1, b.y1, b.x2, b.y2, b.score, gts[rec.best_diff].class_id
            )
        else:
            removed.append(rec)
    if removed:
        drop = {(r.image_id, id(r.box)) for r in removed}
        cls_fixed = {
            img: [b for b in boxes if (img, id(b)) not in drop]
            for img, boxes in cls_fixed.items()
        }
    report.d_cls = fixed_map(cls_fixed, gt) - base

    # Loc: snap the box onto its unmatched same-class gt, else remove.
    loc_fixed = {img: list(boxes) for img, boxes in detections.items()}
    removed = []
    for rec in categories["Loc"]:
        gts = gt.get(rec.image_id, [])
        if rec.best_same >= 0 and not matched_by_img[rec.image_id][rec.best_same]:
            tgt = gts[rec.best_same]
            idx = _index_of(loc_fixed[rec.image_id], rec.box)
            loc_fixed[rec.image_id][idx] = Box(
                tgt.x1, tgt.y1, tgt.x2, tgt.y2, rec.box.score, rec.box.class_id
            )
        else:
            removed.append(rec)
    if removed:
        drop = {(r.image_id, id(r.box)) for r in removed}
        loc_fixed = {
            img: [b for b in boxes if (img, id(b)) not in drop]
            for img, boxes in loc_fixed.items()
        }
    report.d_loc = fixed_map(loc_fixed, gt) - base

    report.d_dupe = fixed_map(without(categories["Dupe"]), gt) - base
    report.d_bkg = fixed_map(without(categories["Bkg"]), gt) - base

    # Miss: drop undetected gt so it no longer counts against recall.
    miss_set = set(missed)
    miss_gt = {
        img: [g for gi, g in enumerate(boxes) if (img, gi) not in miss_set]
        for img, boxes in gt.items()
    }
    report.d_miss = fixed_map(detections, miss_gt) - base

    all_fps = [r for r in records if not r.is_tp]
    report.d_false_pos = fixed_map(without(all_fps), gt) - base

    # FalseNeg: add a perfect, top-ranked detection for every missed gt.
    fn_fixed = {img: list(boxes) for img, boxes in detections.items()}
    for img_id, gi in missed:
        g = gt[img_id][gi]
        fn_fixed.setdefault(img_id, []).append(
            Box(g.x1, g.y1, g.x2, g.y2, score=2.0, class_id=g.class_id)
        )
    report.d_false_neg = fixed_map(fn_fixed, gt) - base
    return report


# ---------------------------------------------------------------------------
# Model-driven evaluation (class-agnostic localization quality)


def class_agnostic(boxes: list[Box]) -> list[Box]:
    return [Box(b.x1, b.y1, b.x2, b.y2, b.score if b.score is not None else 1.0, 0) for b in boxes]


def evaluate_model(
    pair: ModelPair,
    items: list[CorpusItem],
    k: int = 4,
    nms_threshold: float = 0.7,
    iou_thresh: float = 0.5,
) -> tuple[dict[str, float], ErrorReport, Detections]:
    """Run the inference branch (target extractor + RPN) over an annotated
    corpus and measure localization quality of the top-k proposals.

    The pre-trained model has no supervised classifier, so detections and
    ground truth are collapsed to a single foreground class.
    """
    detections: Detections = {}
    gts: GroundTruth = {}
    anchors = None
    for item in items:
        fp = pair.target.f(to_input(item.image))
        if anchors is None or anchors.image_size != fp.image_size:
            anchors = build_anchors(fp.image_size, levels=tuple(sorted(fp.levels)))
        props = rpn_propose(
            pair.online.rpn, fp, anchors, nms_threshold=nms_threshold, k=k
        )
        detections[item.stem] = class_agnostic(props)
        gts[item.stem] = class_agnostic(item.annotations or [])
    metrics = {
        "proposal_recall": proposal_recall(detections, gts, iou_thresh),
        "map": average_precision(detections, gts, iou_thresh),
        "mean_best_iou": mean_best_iou(detections, gts),
    }
    report = stratify_errors(detections, gts)
    return metrics, report, detections


def write_detections_file(path, detections: Detections) -> None:
    """One line per detection: ``image_id x1 y1 x2 y2 score class_id``."""
    with open(path, "w") as fh:
        for img_id in sorted(detections):
            for b in detections[img_id]:
                fh.write(
                    f"{img_id} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r} "
                    f"{(b.score if b.score is not None else 1.0)!r} {b.class_id or 0}\n"
                )


def read_detections_file(path) -> Detections:
    out: Detections = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            img_id, rest = line.split(None, 1)
            out.setdefault(img_id, []).append(parse_box_line(rest))
    return out


def write_pr_curve_svg(path, detections: Detections, gt: GroundTruth, iou_thresh: float = 0.5) -> None:
    """Class-agnostic precision-recall polyline as a standalone SVG."""
    records, _, npos = _match_class(detections, gt, 0, iou_thresh)
    pts = [(0.0, 1.0)]
    tp = fp = 0
    for r in records:
        tp += int(r.is_tp)
        fp += int(not r.is_tp)
        pts.append((tp / max(npos, 1), tp / (tp + fp)))
    w = h = 400
    margin = 40
    poly = " ".join(
        f"{margin + x * (w - 2 * margin):.1f},{h - margin - y * (h - 2 * margin):.1f}" for x, y in pts
    )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
        f'<rect width="{w}" height="{h}" fill="white"/>'
        f'<line x1="{margin}" y1="{h - margin}" x2="{w - margin}" y2="{h - margin}" stroke="black"/>'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{h - margin}" stroke="black"/>'
        f'<polyline points="{poly}" fill="none" stroke="steelblue" stroke-width="2"/>'
        f'<text x="{w // 2}" y="{h - 10}" text-anchor="middle">recall</text>'
        f'<text x="12" y="{h // 2}" transform="rotate(-90 12 {h // 2})" text-anchor="middle">precision</text>'
        "</svg>"
    )
    with open(path, "w") as fh:
        fh.write(svg)
