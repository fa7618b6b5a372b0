"""Separate and joint pre-training strategies, optimizer, schedule, run logs.

Joint training drives the whole online branch: each batch builds view triples
from K cached proposals per image, computes the detector-head loss (and,
depending on configuration, routes the RPN loss gradient into the extractor
or stops it at the pyramid), steps SGD on the online parameters, and updates
the target branch by EMA.

Separate training freezes the extractor and heads at a base checkpoint and
trains only the freshly initialized RPN; the EMA is inactive because no
shared parameters change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .corpus import CorpusItem, load_training_corpus
from .detector import (
    ModelPair,
    build_anchors,
    ema_update,
    flatten_rpn_outputs,
    rpn_propose,
    to_input,
)
from .geometry import Box
from .losses import det_loss, match_anchors, rpn_loss, total_loss
from .numerics import Tensor, sigmoid
from .views import VIEW_SIZE, make_views

STRATEGIES = ("joint", "separate")
BACKBONE_LOSSES = ("det_only", "det_plus_rpn")
PROPOSAL_SOURCES = ("ss", "ss_plus_rpn")


@dataclass
class TrainConfig:
    strategy: str = "joint"
    backbone_loss: str = "det_only"
    detector_proposals: str = "ss"
    epochs: int = 1
    steps: int = 0  # overrides epochs when positive
    batch_size: int = 8
    base_lr: float = 0.1
    ema_momentum: float = 0.99
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0
    reg_weight: float = 1.0
    k: int = 4
    seed: int = 0
    image_dir: str = ""
    cache_dir: str = ""
    checkpoint_path: str = ""
    base_checkpoint: str = ""
    snapshot_every: int = 0
    nms_threshold: float = 0.7

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.backbone_loss not in BACKBONE_LOSSES:
            raise ValueError(f"backbone_loss must be one of {BACKBONE_LOSSES}, got {self.backbone_loss!r}")
        if self.detector_proposals not in PROPOSAL_SOURCES:
            raise ValueError(
                f"detector_proposals must be one of {PROPOSAL_SOURCES}, got {self.detector_proposals!r}"
            )
        if self.batch_size < 1 or self.k < 1 or self.epochs < 0 or self.steps < 0:
            raise ValueError("batch_size and k must be >= 1; epochs and steps >= 0")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a flat key=value config file; unknown keys are an error."""
        known = {f.name: f for f in fields(cls)}
        values: dict[str, object] = {}
        unknown = []
        for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in known:
                unknown.append(key)
                continue
            ftype = known[key].type
            if ftype == "int":
                values[key] = int(raw)
            elif ftype == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        if unknown:
            raise ValueError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_file(self, path) -> None:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)), annealing to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """Classic momentum update, in place on ``param``; returns the new velocity."""
    g = grad + weight_decay * param if weight_decay else grad
    velocity = momentum * velocity + g
    param -= lr * velocity
    return velocity


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.velocity[name] = sgd_step(
                p.data, grad, self.velocity[name], lr, self.momentum, self.weight_decay
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainResult:
    checkpoint_path: Path
    step0_path: Path
    log_path: Path
    steps: int
    skipped_images: int
    log_rows: list[tuple[int, float, float, float]]


def _snapshot_path(checkpoint_path: Path, step: int) -> Path:
    return checkpoint_path.with_name(f"{checkpoint_path.stem}.step{step}{checkpoint_path.suffix}")


def _sample_proposals(rng: np.random.Generator, proposals: list[Box], k: int) -> list[Box]:
    """K boxes, uniform without replacement when enough exist, with otherwise."""
    if len(proposals) >= k:
        idx = rng.choice(len(proposals), size=k, replace=False)
    else:
        idx = rng.choice(len(proposals), size=k, replace=True)
    return [proposals[i] for i in idx]


def _total_steps(config: TrainConfig, n_items: int) -> int:
    if config.steps > 0:
        return config.steps
    return config.epochs * math.ceil(n_items / min(config.batch_size, n_items))


def _run(pair: ModelPair, config: TrainConfig, items: list[CorpusItem], skipped: int) -> TrainResult:
    separate = config.strategy == "separate"
    anchors = build_anchors((VIEW_SIZE, VIEW_SIZE))
    rng = np.random.default_rng(config.seed)
    opt_params = pair.rpn_params() if separate else pair.trainable_params()
    opt = SGD(opt_params, momentum=config.sgd_momentum, weight_decay=config.weight_decay)
    total_steps = _total_steps(config, len(items))

    ckpt = Path(config.checkpoint_path)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    step0 = _snapshot_path(ckpt, 0)
    pair.save(step0)

    log_rows: list[tuple[int, float, float, float]] = []
    log_path = ckpt.with_name(ckpt.name + ".log")
    with open(log_path, "w") as log:
        log.write("# step loss_rpn loss_det lr\n")
        for step in range(total_steps):
            lr = cosine_lr(step, total_steps, config.base_lr)
            batch_n = min(config.batch_size, len(items))
            chosen = rng.choice(len(items), size=batch_n, replace=False)
            opt.zero_grad()
            rpn_vals, det_vals = [], []
            for item_idx in chosen:
                item = items[item_idx]
                view_seed = int(rng.integers(0, 2**63))
                kboxes = _sample_proposals(rng, item.proposals, config.k)
                views = make_views(item.image, kboxes, view_seed)

                fp1 = pair.online.f(to_input(views.v1))
                stop_rpn = separate or config.backbone_loss == "det_only"
                outs = pair.online.rpn(fp1.detached() if stop_rpn else fp1)
                logits, deltas = flatten_rpn_outputs(outs)
                gt_boxes = [Box(*(float(v) for v in row)) for row in views.boxes_v1]
                match = match_anchors(anchors, gt_boxes, rng=rng)
                l_rpn = rpn_loss(sigmoid(logits), deltas, match, lam=config.reg_weight)

                if separate:
                    loss = l_rpn
                    det_vals.append(0.0)
                else:
                    extra = None
                    if config.detector_proposals == "ss_plus_rpn":
                        rpn_boxes = rpn_propose(
                            pair.online.rpn,
                            fp1,
                            anchors,
                            nms_threshold=config.nms_threshold,
                            k=config.k,
                        )
                        if rpn_boxes:
                            extra = np.array([b.coords() for b in rpn_boxes])
                    l_det = det_loss(views, pair, extra_v1_boxes=extra, online_fp1=fp1)
                    det_vals.append(float(l_det.data))
                    loss = total_loss(l_rpn, l_det)
                rpn_vals.append(float(l_rpn.data))
                (loss * (1.0 / batch_n)).backward()

            opt.step(lr)
            if not separate:
                ema_update(pair, config.ema_momentum)
            row = (step, float(np.mean(rpn_vals)), float(np.mean(det_vals)), lr)
            log_rows.append(row)
            log.write(f"{row[0]} {row[1]:.8f} {row[2]:.8f} {row[3]:.8f}\n")
            log.flush()
            if config.snapshot_every > 0 and (step + 1) % config.snapshot_every == 0:
                pair.save(_snapshot_path(ckpt, step + 1))

    pair.save(ckpt)
    return TrainResult(ckpt, step0, log_path, total_steps, skipped, log_rows)


def train_joint(config: TrainConfig) -> TrainResult:
    """Self-supervised training of extractor, heads, and RPN under the total loss."""
    if config.strategy != "joint":
        raise ValueError(f"train_joint requires strategy=joint, got {config.strategy!r}")
    items, skipped = load_training_corpus(config.image_dir, config.cache_dir)
    if not items:
        raise RuntimeError(
            f"every image in {config.image_dir} has an empty proposal cache; nothing to train on"
        )
    pair = ModelPair(seed=config.seed, momentum=config.ema_momentum)
    return _run(pair, config, items, skipped)


def train_separate(config: TrainConfig) -> TrainResult:
    """RPN-only training against a frozen extractor+head base checkpoint."""
    if config.strategy != "separate":
        raise ValueError(f"train_separate requires strategy=separate, got {config.strategy!r}")
    if not config.base_checkpoint:
        raise FileNotFoundError("separate training requires base_checkpoint in the config")
    base = Path(config.base_checkpoint)
    if not base.exists():
        raise FileNotFoundError(f"base checkpoint not found: {base}")
    items, skipped = load_training_corpus(config.image_dir, config.cache_dir)
    if not items:
        raise RuntimeError(
            f"every image in {config.image_dir} has an empty proposal cache; nothing to train on"
        )
    pair = ModelPair(seed=config.seed, momentum=config.ema_momentum)
    # Extractor and heads come from the base; the RPN stays freshly initialized.
    pair.load(base, skip_prefixes=("online.rpn",))
    for name, p in pair.online.params("online").items():
        if not name.startswith("online.rpn"):
            p.requires_grad = False
    return _run(pair, config, items, skipped)
