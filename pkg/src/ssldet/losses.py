"""Training objectives: anchor matching, the RPN loss, and the contrastive
detector-head loss over the online/target pair.

The RPN loss is a binary objectness log loss over sampled anchors plus a
smooth-L1 regression term that activates only on positive anchors:

    (1/N_cls) sum log_loss(p_i, p*_i) + lam (1/N_reg) sum p*_i smooth_l1(t_i - t*_i)

with N_cls the sampled anchor count and N_reg the number of spatial anchor
positions. The detector loss averages negated cosine similarities between
each proposal's embedding across views, then symmetrizes by swapping which
branch sees V1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .detector import Branch, FeaturePyramid, ModelPair, roi_align_batch, to_input
from .geometry import AnchorSet, Box, encode_deltas_array, iou_matrix
from .numerics import Tensor
from .views import ViewTriple

logger = logging.getLogger(__name__)

POSITIVE_IOU = 0.7
NEGATIVE_IOU = 0.3
ANCHOR_SAMPLES = 256
MAX_POSITIVE_SAMPLES = 128
PROB_CLAMP = 1e-7


@dataclass
class AnchorMatch:
    """Anchor labels (1 positive, 0 negative, -1 ignored), regression targets
    for the positives, and the sampled index sets entering the loss."""

    labels: np.ndarray  # (N,) int8
    target_deltas: np.ndarray  # (N, 4); meaningful where labels == 1
    cls_indices: np.ndarray  # (S,) sampled anchors for the log loss
    pos_indices: np.ndarray  # sampled positive anchors for the regression term
    n_reg: int  # number of spatial anchor positions

    @property
    def n_cls(self) -> int:
        return int(self.cls_indices.size)


def match_anchors(
    anchors: AnchorSet,
    gt: list[Box],
    rng: np.random.Generator | None = None,
    num_samples: int = ANCHOR_SAMPLES,
    max_positives: int = MAX_POSITIVE_SAMPLES,
    pos_iou: float = POSITIVE_IOU,
    neg_iou: float = NEGATIVE_IOU,
) -> AnchorMatch:
    """Label anchors against pseudo ground-truth boxes and sample the loss set.

    An anchor is positive when its IoU with any box exceeds ``pos_iou`` or it
    attains the per-box maximum (applied after the threshold rule, ties all
    kept), negative when its best IoU is under ``neg_iou``, otherwise ignored.
    Sampling keeps at most ``max_positives`` positives and fills the rest of
    ``num_samples`` with negatives, uniformly without replacement.
    """
    if not gt:
        raise ValueError("match_anchors requires at least one ground-truth box")
    rng = rng if rng is not None else np.random.default_rng(0)
    anchor_arr = anchors.concatenated()
    gt_arr = np.array([b.coords() for b in gt], dtype=np.float64)
    ious = iou_matrix(anchor_arr, gt_arr)
    best = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)

    labels = np.full(anchor_arr.shape[0], -1, dtype=np.int8)
    labels[best < neg_iou] = 0
    labels[best > pos_iou] = 1
    per_gt_best = ious.max(axis=0)
    for j in range(gt_arr.shape[0]):
        if per_gt_best[j] > 0.0:
            labels[ious[:, j] == per_gt_best[j]] = 1

    target_deltas = np.zeros_like(anchor_arr)
    pos_all = np.flatnonzero(labels == 1)
    if pos_all.size:
        target_deltas[pos_all] = encode_deltas_array(
            anchor_arr[pos_all], gt_arr[best_gt[pos_all]]
        )

    if pos_all.size > max_positives:
        pos_keep = np.sort(rng.choice(pos_all, size=max_positives, replace=False))
    else:
        pos_keep = pos_all
    neg_all = np.flatnonzero(labels == 0)
    n_neg = min(num_samples - pos_keep.size, neg_all.size)
    neg_keep = np.sort(rng.choice(neg_all, size=n_neg, replace=False))
    return AnchorMatch(
        labels=labels,
        target_deltas=target_deltas,
        cls_indices=np.concatenate([pos_keep, neg_keep]),
        pos_indices=pos_keep,
        n_reg=anchors.positions(),
    )


def smooth_l1(x: float) -> float:
    """Scalar smooth-L1: 0.5*x**2 for |x| < 1, |x| - 0.5 otherwise."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def rpn_loss(p: Tensor, t: Tensor, match: AnchorMatch, lam: float = 1.0) -> Tensor:
    """Objectness log loss plus gated smooth-L1 regression (see module docstring).

    ``p`` holds per-anchor objectness probabilities (sigmoid outputs, clamped
    here to [1e-7, 1 - 1e-7]); ``t`` the per-anchor predicted deltas. Only
    sampled anchors contribute, and the regression term reads exclusively the
    rows of ``t`` whose label is positive, so predictions at other anchors
    cannot change the value.
    """
    pc = nm.clip(nm.take(p, match.cls_indices), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = match.labels[match.cls_indices].astype(np.float64)
    pos_term = nm.mul(nm.log(pc), Tensor(y))
    neg_term = nm.mul(nm.log(nm.add(nm.neg(pc), 1.0)), Tensor(1.0 - y))
    cls_loss = nm.neg(nm.tmean(nm.add(pos_term, neg_term)))
    if match.pos_indices.size == 0:
        return cls_loss
    diff = nm.sub(nm.take(t, match.pos_indices, axis=0), Tensor(match.target_deltas[match.pos_indices]))
    reg_loss = nm.mul(nm.tsum(nm.smooth_l1(diff)), lam / match.n_reg)
    return nm.add(cls_loss, reg_loss)


def sim_loss(v: Tensor, v_prime: Tensor, v_dprime: Tensor) -> Tensor:
    """(1/K) sum_i [-2 cos(v_i, v'_i) - 2 cos(v_i, v''_i)], in [-4, 4].

    Cosines are taken after L2 normalization (norms clamped at 1e-12), so the
    loss is invariant to positive rescaling of any embedding.
    """
    if v.shape != v_prime.shape or v.shape != v_dprime.shape:
        raise ValueError(
            f"shape mismatch for sim_loss: {v.shape} vs {v_prime.shape} vs {v_dprime.shape}"
        )
    n = nm.l2_normalize(v, axis=1)
    cos1 = nm.tsum(nm.mul(n, nm.l2_normalize(v_prime, axis=1)), axis=1)
    cos2 = nm.tsum(nm.mul(n, nm.l2_normalize(v_dprime, axis=1)), axis=1)
    return nm.tmean(nm.add(nm.mul(cos1, -2.0), nm.mul(cos2, -2.0)))


def _embed_view(branch: Branch, fp: FeaturePyramid, boxes: np.ndarray, use_predictor: bool) -> Tensor:
    rois = [(0, Box(*(float(c) for c in row))) for row in boxes]
    return branch.embed(roi_align_batch(fp, rois), use_predictor)


def det_loss(
    views: ViewTriple,
    pair: ModelPair,
    extra_v1_boxes: np.ndarray | None = None,
    online_fp1: FeaturePyramid | None = None,
) -> Tensor:
    """Symmetrized contrastive loss over the proposals of one view triple.

    Each valid proposal is embedded from V1 by one branch and from V2/V3 by
    the other, in both role assignments; the two directional losses are
    summed, so the per-proposal contribution lies in [-8, 8]. Proposals the
    crop invalidated are excluded from the average. ``extra_v1_boxes`` routes
    additional V1-frame boxes (e.g. proposals from the RPN) through the same
    geometry before embedding.
    """
    b1, b2, b3, valid = views.boxes_v1, views.boxes_v2, views.boxes_v3, views.valid
    if extra_v1_boxes is not None and len(extra_v1_boxes):
        e1, e2, e3, ev = views.project_boxes(extra_v1_boxes)
        b1 = np.concatenate([b1, e1])
        b2 = np.concatenate([b2, e2])
        b3 = np.concatenate([b3, e3])
        valid = np.concatenate([valid, ev])
    if not valid.any():
        logger.warning("det_loss: no proposals survived the crop; contributing 0")
        return Tensor(0.0)
    b1, b2, b3 = b1[valid], b2[valid], b3[valid]

    fp1_on = online_fp1 if online_fp1 is not None else pair.online.f(to_input(views.v1))
    fp2_on = pair.online.f(to_input(views.v2))
    fp3_on = pair.online.f(to_input(views.v3))
    fp1_tg = pair.target.f(to_input(views.v1))
    fp2_tg = pair.target.f(to_input(views.v2))
    fp3_tg = pair.target.f(to_input(views.v3))

    v_on1 = _embed_view(pair.online, fp1_on, b1, use_predictor=True)
    v_tg2 = _embed_view(pair.target, fp2_tg, b2, use_predictor=False)
    v_tg3 = _embed_view(pair.target, fp3_tg, b3, use_predictor=False)
    forward = sim_loss(v_on1, v_tg2, v_tg3)

    v_tg1 = _embed_view(pair.target, fp1_tg, b1, use_predictor=False)
    v_on2 = _embed_view(pair.online, fp2_on, b2, use_predictor=True)
    v_on3 = _embed_view(pair.online, fp3_on, b3, use_predictor=True)
    mirrored = sim_loss(v_tg1, v_on2, v_on3)
    return nm.add(forward, mirrored)


def total_loss(rpn_term: Tensor, det_term: Tensor) -> Tensor:
    """Unit-weight sum of the RPN and detector-head losses."""
    return nm.add(rpn_term, det_term)
