"""Finite-difference verification of every loss and layer family.

Each check builds a small fixture, evaluates a scalar objective, and compares
the engine's gradients against central differences; coordinates sitting on a
derivative kink (relu, max-pool, smooth-L1 switch points) are detected by
one-sided disagreement, excluded, and counted. ``run_all`` covers the layer
primitives (conv, pool, RoIAlign, bilinear sampling, normalization), the
individual loss terms, and the combined objective on a two-image toy batch.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .detector import FeaturePyramid, ModelPair, flatten_rpn_outputs, roi_align_batch
from .geometry import Box, build_anchors
from .losses import det_loss, match_anchors, rpn_loss, sim_loss, total_loss
from .numerics import GradCheckReport, Tensor, gradient_check
from .views import ViewTriple

TOL = 1e-4


def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    w = Tensor(rng.normal(size=t.shape))
    return nm.tsum(nm.mul(t, w))


def check_conv2d(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    mask = rng.normal(size=(1, 3, 6, 6))

    def f_x(t):
        return nm.tsum(nm.mul(nm.conv2d(t, w, b, stride=1, pad=1), Tensor(mask)))

    def f_w(t):
        return nm.tsum(nm.mul(nm.conv2d(x, t, b, stride=1, pad=1), Tensor(mask)))

    return [
        gradient_check(f_x, x, name="conv2d.input"),
        gradient_check(f_w, w, name="conv2d.weight"),
    ]


def check_max_pool(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    mask = rng.normal(size=(1, 2, 3, 3))
    return [
        gradient_check(
            lambda t: nm.tsum(nm.mul(nm.max_pool2d(t), Tensor(mask))), x, name="max_pool2d"
        )
    ]


def check_bilinear(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=(3, 5, 7)))
    pts = np.column_stack([rng.uniform(0, 4, 12), rng.uniform(0, 6, 12)])
    mask = rng.normal(size=(3, 12))
    return [
        gradient_check(
            lambda t: nm.tsum(nm.mul(nm.bilinear_sample(t, pts), Tensor(mask))),
            x,
            name="bilinear_sample",
        )
    ]


def check_roi_align(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    rois = [(0, Box(2.0, 3.0, 22.0, 27.0)), (0, Box(5.0, 1.0, 30.0, 18.0))]
    mask = rng.normal(size=(2, 3, 7, 7))

    def f(t):
        fp = FeaturePyramid({2: t}, (32, 32))
        return nm.tsum(nm.mul(roi_align_batch(fp, rois), Tensor(mask)))

    return [gradient_check(f, x, name="roi_align")]


def check_l2_normalize(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=(4, 6)))
    mask = rng.normal(size=(4, 6))
    return [
        gradient_check(
            lambda t: nm.tsum(nm.mul(nm.l2_normalize(t, axis=1), Tensor(mask))),
            x,
            name="l2_normalize",
        )
    ]


def check_smooth_l1(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.uniform(-3.0, 3.0, size=25))
    return [gradient_check(lambda t: nm.tsum(nm.smooth_l1(t)), x, name="smooth_l1")]


def check_log_loss(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=20))
    y = (rng.random(20) < 0.5).astype(np.float64)

    def f(t):
        p = nm.clip(nm.sigmoid(t), 1e-7, 1.0 - 1e-7)
        term = nm.add(nm.mul(nm.log(p), Tensor(y)), nm.mul(nm.log(nm.add(nm.neg(p), 1.0)), Tensor(1.0 - y)))
        return nm.neg(nm.tmean(term))

    return [gradient_check(f, x, name="log_loss")]


def check_rpn_loss(rng: np.random.Generator) -> list[GradCheckReport]:
    anchors = build_anchors((32, 32))
    n = anchors.total
    gt = [Box(4.0, 4.0, 20.0, 24.0), Box(10.0, 8.0, 30.0, 28.0)]
    match = match_anchors(anchors, gt, rng=np.random.default_rng(7), num_samples=64)
    x = Tensor(rng.normal(scale=0.5, size=n * 5))

    def f(t):
        logits = nm.take(t, np.arange(n))
        deltas = nm.reshape(nm.take(t, np.arange(n, n * 5)), (n, 4))
        return rpn_loss(nm.sigmoid(logits), deltas, match, lam=1.0)

    return [gradient_check(f, x, name="rpn_loss", max_coords=160, rng=rng)]


def check_sim_loss(rng: np.random.Generator) -> list[GradCheckReport]:
    x = Tensor(rng.normal(size=(4, 8)))
    a = Tensor(rng.normal(size=(4, 8)))
    b = Tensor(rng.normal(size=(4, 8)))
    return [gradient_check(lambda t: sim_loss(t, a, b), x, name="sim_loss")]


def _toy_views(rng: np.random.Generator) -> ViewTriple:
    boxes_v1 = np.array([[3.0, 4.0, 21.0, 20.0], [10.0, 9.0, 30.0, 30.0]])
    boxes_v2 = np.array([[2.0, 2.0, 18.0, 22.0], [8.0, 6.0, 28.0, 26.0]])
    return ViewTriple(
        v1=rng.uniform(size=(32, 32, 3)),
        v2=rng.uniform(size=(32, 32, 3)),
        v3=rng.uniform(size=(16, 16, 3)),
        boxes_v1=boxes_v1,
        boxes_v2=boxes_v2,
        boxes_v3=boxes_v2 * 0.5,
        valid=np.array([True, True]),
        crop=(0.0, 0.0, 32.0, 32.0),
        seed=0,
    )


def check_det_loss(rng: np.random.Generator) -> list[GradCheckReport]:
    pair = ModelPair(seed=11)
    views = _toy_views(rng)
    reports = []
    for pname in ("online.f.s1a.w", "online.g.fc1.w", "online.q.fc2.w"):
        param = pair.named_params()[pname]
        reports.append(
            gradient_check(
                lambda _t: det_loss(views, pair),
                param,
                name=f"det_loss[{pname}]",
                max_coords=30,
                rng=rng,
            )
        )
    return reports


def check_total_loss(rng: np.random.Generator) -> list[GradCheckReport]:
    """Combined objective (RPN + detector terms) on a two-image toy batch."""
    pair = ModelPair(seed=13)
    anchors = build_anchors((32, 32))
    batch = []
    for i in range(2):
        views = _toy_views(np.random.default_rng(100 + i))
        gt = [Box(*(float(v) for v in row)) for row in views.boxes_v1]
        match = match_anchors(anchors, gt, rng=np.random.default_rng(i), num_samples=64)
        batch.append((views, match))

    def f(_t):
        terms = []
        for views, match in batch:
            from .detector import to_input

            fp1 = pair.online.f(to_input(views.v1))
            logits, deltas = flatten_rpn_outputs(pair.online.rpn(fp1))
            l_rpn = rpn_loss(nm.sigmoid(logits), deltas, match)
            terms.append(total_loss(l_rpn, det_loss(views, pair, online_fp1=fp1)))
        return nm.mul(nm.add(terms[0], terms[1]), 0.5)

    reports = []
    for pname in ("online.f.lat2.w", "online.rpn.obj.w", "online.p.fc1.w"):
        param = pair.named_params()[pname]
        reports.append(
            gradient_check(f, param, name=f"total_loss[{pname}]", max_coords=24, rng=rng)
        )
    return reports


ALL_CHECKS = (
    check_conv2d,
    check_max_pool,
    check_bilinear,
    check_roi_align,
    check_l2_normalize,
    check_smooth_l1,
    check_log_loss,
    check_rpn_loss,
    check_sim_loss,
    check_det_loss,
    check_total_loss,
)


def run_all(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports: list[GradCheckReport] = []
    for check in ALL_CHECKS:
        reports.extend(check(rng))
    return reports
