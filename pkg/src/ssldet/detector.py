"""The model pair: feature extractor, RPN, RoIAlign, and embedding heads.

The online branch carries extractor f, detector head g, projector p,
predictor q, and the RPN; the target branch shadows f, g, p only, holds
parameters that never receive gradients, and tracks the online branch as an
exponential moving average.

Desk-scale dimensions: a four-stage conv backbone with widths (16, 32, 64,
128), 32-channel pyramid features on levels p2-p5 (strides 4-32), and
64-dimensional embeddings. Inputs must be divisible by 16; level p5 is built
only when they are divisible by 32, so 112-pixel inputs use p2-p4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .geometry import (
    ANCHOR_RATIOS,
    FPN_STRIDES,
    AnchorSet,
    Box,
    assign_fpn_level,
    build_anchors,
    decode_deltas_array,
    nms,
)
from .numerics import Tensor

BACKBONE_WIDTHS = (16, 32, 64, 128)
FPN_DIM = 32
HEAD_HIDDEN = 128
EMBED_DIM = 64
ROI_OUTPUT = 7
ROI_SAMPLING = 2
RPN_INIT_STD = 0.01
DEFAULT_EMA_MOMENTUM = 0.99


class Conv:
    def __init__(self, rng, in_c, out_c, k=3, pad=1, std=None, requires_grad=True):
        if std is None:
            std = math.sqrt(2.0 / (in_c * k * k))
        self.w = Tensor(rng.normal(0.0, std, (out_c, in_c, k, k)), requires_grad)
        self.b = Tensor(np.zeros(out_c), requires_grad)
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return nm.conv2d(x, self.w, self.b, stride=1, pad=self.pad)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Linear:
    def __init__(self, rng, in_f, out_f, requires_grad=True):
        std = math.sqrt(2.0 / in_f)
        self.w = Tensor(rng.normal(0.0, std, (in_f, out_f)), requires_grad)
        self.b = Tensor(np.zeros(out_f), requires_grad)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.add_bias(nm.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class FeaturePyramid:
    """Levels keyed 2..5 holding (B, D, H/stride, W/stride) tensors."""

    levels: dict[int, Tensor]
    image_size: tuple[int, int]

    @property
    def batch(self) -> int:
        return next(iter(self.levels.values())).shape[0]

    @property
    def max_level(self) -> int:
        return max(self.levels)

    def detached(self) -> "FeaturePyramid":
        return FeaturePyramid(
            {lv: nm.stop_gradient(t) for lv, t in self.levels.items()}, self.image_size
        )


class Extractor:
    """Backbone plus feature pyramid (lateral 1x1 projections, nearest-neighbour
    top-down summation)."""

    def __init__(self, rng, in_channels=3, widths=BACKBONE_WIDTHS, fpn_dim=FPN_DIM, requires_grad=True):
        self.stages = []
        c_in = in_channels
        for c_out in widths:
            c1 = Conv(rng, c_in, c_out, requires_grad=requires_grad)
            c2 = Conv(rng, c_out, c_out, requires_grad=requires_grad)
            self.stages.append((c1, c2))
            c_in = c_out
        # Laterals for stage outputs at strides 4, 8, 16 and the extra
        # stride-32 pool of the last stage (widths[1:] plus widths[-1]).
        lat_in = [widths[1], widths[2], widths[3], widths[3]]
        self.laterals = {lv: Conv(rng, lat_in[lv - 2], fpn_dim, k=1, pad=0, requires_grad=requires_grad) for lv in (2, 3, 4, 5)}
        self.fpn_dim = fpn_dim

    def __call__(self, x: Tensor) -> FeaturePyramid:
        if x.data.ndim == 3:
            x = nm.reshape(x, (1,) + x.shape)
        _, _, h, w = x.shape
        if h % 16 or w % 16:
            raise ValueError(f"input extent {h}x{w} not divisible by 16")
        with_p5 = h % 32 == 0 and w % 32 == 0
        cur = x
        stage_out = []
        for c1, c2 in self.stages:
            cur = nm.max_pool2d(nm.relu(c2(nm.relu(c1(cur)))))
            stage_out.append(cur)
        laterals = {lv: self.laterals[lv](stage_out[lv - 1]) for lv in (2, 3, 4)}
        if with_p5:
            laterals[5] = self.laterals[5](nm.max_pool2d(stage_out[3]))
        levels: dict[int, Tensor] = {}
        top = max(laterals)
        levels[top] = laterals[top]
        for lv in range(top - 1, 1, -1):
            levels[lv] = nm.add(laterals[lv], nm.upsample2_nearest(levels[lv + 1]))
        return FeaturePyramid(levels, (h, w))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (c1, c2) in enumerate(self.stages, start=1):
            out.update(c1.params(f"{prefix}.s{i}a"))
            out.update(c2.params(f"{prefix}.s{i}b"))
        for lv, lat in self.laterals.items():
            out.update(lat.params(f"{prefix}.lat{lv}"))
        return out


class RPNHead:
    """Shared 3x3 conv then 1x1 objectness and delta heads.

    Per level the outputs are logits (B, 3, H, W) and deltas (B, 12, H, W);
    channel layout matches the (ratio, y, x) anchor ordering so a C-order
    flatten lines up with :func:`ssldet.geometry.build_anchors`.
    """

    def __init__(self, rng, fpn_dim=FPN_DIM, requires_grad=True):
        n_a = len(ANCHOR_RATIOS)
        self.conv = Conv(rng, fpn_dim, fpn_dim, std=RPN_INIT_STD, requires_grad=requires_grad)
        self.obj = Conv(rng, fpn_dim, n_a, k=1, pad=0, std=RPN_INIT_STD, requires_grad=requires_grad)
        self.delta = Conv(rng, fpn_dim, 4 * n_a, k=1, pad=0, std=RPN_INIT_STD, requires_grad=requires_grad)

    def __call__(self, fp: FeaturePyramid) -> dict[int, tuple[Tensor, Tensor]]:
        out = {}
        for lv in sorted(fp.levels):
            shared = nm.relu(self.conv(fp.levels[lv]))
            out[lv] = (self.obj(shared), self.delta(shared))
        return out

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.conv.params(f"{prefix}.conv"))
        out.update(self.obj.params(f"{prefix}.obj"))
        out.update(self.delta.params(f"{prefix}.delta"))
        return out


class MLP:
    def __init__(self, rng, sizes, relu_last=False, requires_grad=True):
        self.layers = [Linear(rng, a, b, requires_grad) for a, b in zip(sizes[:-1], sizes[1:])]
        self.relu_last = relu_last

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.relu_last:
                x = nm.relu(x)
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers, start=1):
            out.update(layer.params(f"{prefix}.fc{i}"))
        return out


class Branch:
    """One parameter set: extractor + heads (+ predictor and RPN when online)."""

    def __init__(self, rng, in_channels=3, with_predictor=True, with_rpn=True, requires_grad=True):
        roi_feat = FPN_DIM * ROI_OUTPUT * ROI_OUTPUT
        self.f = Extractor(rng, in_channels, requires_grad=requires_grad)
        self.g = MLP(rng, (roi_feat, HEAD_HIDDEN, HEAD_HIDDEN), relu_last=True, requires_grad=requires_grad)
        self.p = MLP(rng, (HEAD_HIDDEN, HEAD_HIDDEN, EMBED_DIM), requires_grad=requires_grad)
        self.q = MLP(rng, (EMBED_DIM, HEAD_HIDDEN, EMBED_DIM), requires_grad=requires_grad) if with_predictor else None
        self.rpn = RPNHead(rng, requires_grad=requires_grad) if with_rpn else None

    def embed(self, pooled: Tensor, use_predictor: bool) -> Tensor:
        """(N, D, 7, 7) pooled features -> (N, E) embeddings via g, p (and q)."""
        n = pooled.shape[0]
        x = self.p(self.g(nm.reshape(pooled, (n, -1))))
        if use_predictor:
            if self.q is None:
                raise ValueError("this branch has no predictor head")
            x = self.q(x)
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.f.params(f"{prefix}.f"))
        out.update(self.g.params(f"{prefix}.g"))
        out.update(self.p.params(f"{prefix}.p"))
        if self.q is not None:
            out.update(self.q.params(f"{prefix}.q"))
        if self.rpn is not None:
            out.update(self.rpn.params(f"{prefix}.rpn"))
        return out


class ModelPair:
    """Online parameters (gradient-trained) and their EMA target shadow.

    The target branch has no predictor and no RPN, its tensors never require
    gradients, and it starts as an exact copy of the online submodules it
    shares (f, g, p).
    """

    def __init__(self, seed: int = 0, in_channels: int = 3, momentum: float = DEFAULT_EMA_MOMENTUM):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        rng = np.random.default_rng(seed)
        self.online = Branch(rng, in_channels, with_predictor=True, with_rpn=True, requires_grad=True)
        self.target = Branch(rng, in_channels, with_predictor=False, with_rpn=False, requires_grad=False)
        self.momentum = momentum
        for name, tgt in self.target.params("target").items():
            tgt.data = self.online_counterpart(name).data.copy()

    def online_counterpart(self, target_name: str) -> Tensor:
        return self.named_params()["online" + target_name[len("target"):]]

    def named_params(self) -> dict[str, Tensor]:
        out = self.online.params("online")
        out.update(self.target.params("target"))
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return self.online.params("online")

    def rpn_params(self) -> dict[str, Tensor]:
        return self.online.rpn.params("online.rpn")

    def zero_grad(self) -> None:
        for t in self.trainable_params().values():
            t.zero_grad()

    def save(self, path) -> None:
        nm.save_checkpoint(path, self.named_params())

    def load(self, path, skip_prefixes: tuple[str, ...] = ()) -> None:
        """Restore parameters from a checkpoint.

        Names starting with a skip prefix keep their current (e.g. freshly
        initialized) values; everything else must be present with matching
        shapes.
        """
        state = nm.load_checkpoint(path)
        params = {
            name: t
            for name, t in self.named_params().items()
            if not any(name.startswith(pfx) for pfx in skip_prefixes)
        }
        missing = sorted(set(params) - set(state))
        if missing:
            raise ValueError(f"checkpoint {path} is missing parameters: {missing[:4]}...")
        for name, tensor in params.items():
            if state[name].shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: {state[name].shape} vs {tensor.data.shape}"
                )
            tensor.data = state[name].copy()
            tensor.zero_grad()


def ema_update(pair: ModelPair, momentum: float | None = None) -> None:
    """In-place target update: xi <- m*xi + (1-m)*theta over shared submodules."""
    m = pair.momentum if momentum is None else momentum
    online = pair.online.params("online")
    for name, tgt in pair.target.params("target").items():
        src = online["online" + name[len("target"):]]
        tgt.data *= m
        tgt.data += (1.0 - m) * src.data


def to_input(image: np.ndarray) -> Tensor:
    """(H, W, C) image in [0, 1] -> (1, C, H, W) tensor."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1))[None])


def extract(branch: Branch, image) -> FeaturePyramid:
    """Run the extractor on an image array or a prepared (B, C, H, W) tensor."""
    x = image if isinstance(image, Tensor) else to_input(image)
    return branch.f(x)


def rpn_forward(rpn: RPNHead, fp: FeaturePyramid) -> dict[int, tuple[Tensor, Tensor]]:
    return rpn(fp)


def flatten_rpn_outputs(outputs: dict[int, tuple[Tensor, Tensor]], batch_index: int = 0) -> tuple[Tensor, Tensor]:
    """Per-level head outputs -> (N,) logits and (N, 4) deltas in anchor order."""
    logit_parts = []
    delta_parts = []
    n_a = len(ANCHOR_RATIOS)
    for lv in sorted(outputs):
        logits, deltas = outputs[lv]
        _, _, h, w = logits.shape
        lb = nm.take(logits, [batch_index], axis=0)
        db = nm.take(deltas, [batch_index], axis=0)
        logit_parts.append(nm.reshape(lb, (n_a * h * w,)))
        # (1, 3*4, h, w) -> (3, 4, h, w) -> rows in (ratio, y, x) order
        db = nm.reshape(db, (n_a, 4, h, w))
        db = nm.reshape(_transpose_deltas(db), (n_a * h * w, 4))
        delta_parts.append(db)
    return nm.concat(logit_parts, axis=0), nm.concat(delta_parts, axis=0)


def _transpose_deltas(t: Tensor) -> Tensor:
    """(3, 4, h, w) -> (3, h, w, 4) as a graph op."""
    out = np.ascontiguousarray(t.data.transpose(0, 2, 3, 1))

    def bwd(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g.transpose(0, 3, 1, 2)

    return nm._node(out, (t,), bwd, "transpose_deltas")


def rpn_propose(
    rpn: RPNHead,
    fp: FeaturePyramid,
    anchors: AnchorSet | None = None,
    pre_nms_top: int = 64,
    nms_threshold: float = 0.7,
    k: int = 4,
    batch_index: int = 0,
) -> list[Box]:
    """Decode, clip, and rank anchor predictions into at most k proposals.

    Pipeline: decode all anchor deltas, clip to the image, drop boxes under
    one pixel wide or tall, keep the top ``pre_nms_top`` by objectness (ties
    resolve in anchor scan order), suppress at ``nms_threshold``, return the
    top ``k``. Deterministic; returns fewer than k when fewer survive.
    """
    h, w = fp.image_size
    if anchors is None:
        anchors = build_anchors((h, w), levels=tuple(sorted(fp.levels)))
    outputs = rpn(fp.detached())
    scores = []
    deltas = []
    n_a = len(ANCHOR_RATIOS)
    for lv in sorted(outputs):
        lg, dl = outputs[lv]
        scores.append(lg.data[batch_index].reshape(-1))
        deltas.append(dl.data[batch_index].reshape(n_a, 4, *lg.shape[2:]).transpose(0, 2, 3, 1).reshape(-1, 4))
    score_arr = 1.0 / (1.0 + np.exp(-np.concatenate(scores)))
    delta_arr = np.concatenate(deltas, axis=0)
    boxes = decode_deltas_array(anchors.concatenated(), delta_arr)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(w))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(h))
    ok = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(-score_arr[idx], kind="stable")][:pre_nms_top]
    candidates = [
        Box(*(float(v) for v in boxes[i]), score=float(score_arr[i])) for i in order
    ]
    return nms(candidates, nms_threshold)[:k]


def roi_align_batch(
    fp: FeaturePyramid,
    rois: list[tuple[int, Box]],
    output_size: int = ROI_OUTPUT,
    sampling: int = ROI_SAMPLING,
) -> Tensor:
    """Pool (batch_index, box) regions into (N, D, output_size, output_size).

    Each box is pooled from the pyramid level given by its scale (clamped to
    the levels present), with ``sampling``^2 bilinear samples averaged per
    bin. Differentiable with respect to the pyramid features.
    """
    if not rois:
        raise ValueError("roi_align_batch requires at least one roi")
    by_level: dict[int, list[int]] = {}
    for i, (_, box) in enumerate(rois):
        lv = min(max(assign_fpn_level(box), min(fp.levels)), fp.max_level)
        by_level.setdefault(lv, []).append(i)

    pieces = []
    orig_index = []
    for lv in sorted(by_level):
        idxs = by_level[lv]
        feat = fp.levels[lv]
        stride = FPN_STRIDES[lv]
        pts_y, pts_x = [], []
        for i in idxs:
            b = rois[i][1]
            fy1, fy2 = b.y1 / stride - 0.5, b.y2 / stride - 0.5
            fx1, fx2 = b.x1 / stride - 0.5, b.x2 / stride - 0.5
            bh = (fy2 - fy1) / output_size
            bw = (fx2 - fx1) / output_size
            grid = (np.arange(output_size)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling).reshape(-1)
            ys = fy1 + grid * bh
            xs = fx1 + grid * bw
            pts_y.append(np.repeat(ys, ys.size))
            pts_x.append(np.tile(xs, xs.size))
        batch_idx = np.array([rois[i][0] for i in idxs], dtype=np.intp)
        pooled = _gather_rois(
            feat, batch_idx, np.stack(pts_y), np.stack(pts_x), output_size, sampling
        )
        pieces.append(pooled)
        orig_index.extend(idxs)
    out = nm.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    inverse = np.empty(len(rois), dtype=np.intp)
    inverse[np.array(orig_index)] = np.arange(len(rois))
    return nm.take(out, inverse, axis=0)


def _gather_rois(feat: Tensor, batch_idx: np.ndarray, ys: np.ndarray, xs: np.ndarray, out_size: int, sampling: int) -> Tensor:
    """Bilinear-gather sample points for R rois from one (B, D, H, W) level."""
    _, d, h, w = feat.shape
    y0 = np.clip(np.floor(np.clip(ys, 0.0, h - 1.0)).astype(np.intp), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(np.clip(xs, 0.0, w - 1.0)).astype(np.intp), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys, 0.0, h - 1.0) - y0
    fx = np.clip(xs, 0.0, w - 1.0) - x0
    weights = (
        ((1 - fy) * (1 - fx), y0, x0),
        ((1 - fy) * fx, y0, x1),
        (fy * (1 - fx), y1, x0),
        (fy * fx, y1, x1),
    )
    bcol = batch_idx[:, None]
    data = feat.data
    acc = np.zeros((ys.shape[0], ys.shape[1], d))
    for wgt, yy, xx in weights:
        acc += data[bcol, :, yy, xx] * wgt[:, :, None]
    r = ys.shape[0]
    pooled = (
        acc.reshape(r, out_size, sampling, out_size, sampling, d).mean(axis=(2, 4)).transpose(0, 3, 1, 2)
    )

    def bwd(g):
        if not feat.requires_grad:
            return
        if feat.grad is None:
            feat.grad = np.zeros_like(feat.data)
        scale = 1.0 / (sampling * sampling)
        gs = g.transpose(0, 2, 3, 1)  # (R, out, out, D)
        gsamp = np.repeat(np.repeat(gs, sampling, axis=1), sampling, axis=2).reshape(r, -1, d) * scale
        b_, _, h_, w_ = feat.shape
        buf = np.zeros((b_, h_, w_, d))
        flatbuf = buf.reshape(-1, d)
        for wgt, yy, xx in weights:
            flat_idx = (bcol * h_ + yy) * w_ + xx
            np.add.at(flatbuf, flat_idx.reshape(-1), (gsamp * wgt[:, :, None]).reshape(-1, d))
        feat.grad += buf.transpose(0, 3, 1, 2)

    return nm._node(pooled, (feat,), bwd, "roi_align")


def roi_align(fp: FeaturePyramid, box: Box, output_size: int = ROI_OUTPUT, sampling: int = ROI_SAMPLING, batch_index: int = 0) -> Tensor:
    """Pool one box into a (D, output_size, output_size) tensor."""
    out = roi_align_batch(fp, [(batch_index, box)], output_size, sampling)
    return nm.reshape(out, out.shape[1:])
