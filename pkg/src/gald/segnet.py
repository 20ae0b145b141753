"""Toy segmentation network, losses, optimiser and training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .distribution import arrangement_forward, init_arrangement_params
from .errors import AllIgnored, InvalidSpec, LabelOutOfRange, MissingGrad, ShapeMismatch
from .layers import (
    Conv2dSpec,
    LayerParams,
    bilinear_resize,
    conv2d,
    conv_bn_relu,
    init_conv_bn,
)
from .tensor import Tensor, div, make_op, mul, no_grad

logger = logging.getLogger(__name__)

CLASSIFIER_STD = 0.01


@dataclass
class BackboneSpec:
    in_ch: int = 3
    widths: List[int] = field(default_factory=lambda: [16, 32, 32])
    strides: List[int] = field(default_factory=lambda: [1, 2, 1])

    def __post_init__(self):
        if len(self.strides) != len(self.widths):
            raise InvalidSpec("backbone needs one stride per stage")
        if any(s not in (1, 2) for s in self.strides):
            raise InvalidSpec("backbone strides must be 1 or 2")

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.strides))

    def stage_specs(self) -> list:
        """(first, second) conv specs per stage; the first conv carries the stage stride."""
        specs, cin = [], self.in_ch
        for w, stride in zip(self.widths, self.strides):
            specs.append(
                (
                    Conv2dSpec(cin, w, kernel=3, stride=stride, padding=1, bias=False),
                    Conv2dSpec(w, w, kernel=3, padding=1, bias=False),
                )
            )
            cin = w
        return specs


@dataclass
class OhemConfig:
    enabled: bool = True
    keep_fraction: float = 0.25
    min_kept: int = 64


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    power: float = 0.9
    max_iter: int = 3000
    batch_size: int = 4
    ohem: OhemConfig = field(default_factory=OhemConfig)
    seed: int = 0
    ignore_index: int = 255

    def __post_init__(self):
        if isinstance(self.ohem, dict):
            self.ohem = OhemConfig(**self.ohem)
        if self.base_lr <= 0:
            raise InvalidSpec("base_lr must be positive")
        if not 0 < self.ohem.keep_fraction <= 1:
            raise InvalidSpec("ohem.keep_fraction must lie in (0, 1]")
        if self.max_iter < 1 or self.batch_size < 1:
            raise InvalidSpec("max_iter and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _head_specs(cfg) -> tuple:
    head_in = cfg.arrangement.out_channels(cfg.channels)
    return (
        Conv2dSpec(head_in, cfg.channels, kernel=3, padding=1, bias=False),
        Conv2dSpec(cfg.channels, cfg.num_classes, kernel=1, bias=True),
    )


def init_model(cfg, seed: Optional[int] = None) -> LayerParams:
    """Initialise every parameter of the model described by a GaldConfig."""
    seed = cfg.train.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    params = LayerParams(seed=seed)
    bb = params.scope("backbone")
    for i, (first, second) in enumerate(cfg.backbone.stage_specs()):
        init_conv_bn(bb.scope(f"stage{i}.conv1"), first, rng)
        init_conv_bn(bb.scope(f"stage{i}.conv2"), second, rng)
    init_arrangement_params(cfg.channels, cfg.arrangement, cfg.ga, cfg.ld, params.scope("gald"), rng)
    mid, cls = _head_specs(cfg)
    init_conv_bn(params.scope("head.conv"), mid, rng)
    # small classifier weights keep the initial logits near uniform
    head = params.scope("head.cls")
    head["weight"] = Tensor(rng.normal(0.0, CLASSIFIER_STD, size=cls.weight_shape()), requires_grad=True)
    head["bias"] = Tensor(np.zeros(cls.out_ch), requires_grad=True)
    return params


def backbone_forward(x: Tensor, spec: BackboneSpec, params: LayerParams, mode: str) -> Tensor:
    for i, (first, second) in enumerate(spec.stage_specs()):
        x = conv_bn_relu(x, first, params.scope(f"stage{i}.conv1"), mode)
        x = conv_bn_relu(x, second, params.scope(f"stage{i}.conv2"), mode)
    return x


def forward_model(x, cfg, params: LayerParams, mode: str = "train", trace: Optional[dict] = None) -> Tensor:
    """Backbone -> GA/LD arrangement -> head -> logits resized to the input size."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.backbone.in_ch:
        raise ShapeMismatch(f"model expects N x {cfg.backbone.in_ch} x H x W, got {x.shape}")
    h, w = x.shape[2:]
    os_ = cfg.backbone.output_stride
    if h % os_ or w % os_:
        raise InvalidSpec(f"input {h}x{w} is not divisible by output stride {os_}")
    if cfg.arrangement.uses_ld and (h // os_ < cfg.ld.d or w // os_ < cfg.ld.d):
        raise InvalidSpec(f"feature map {h // os_}x{w // os_} smaller than LD ratio {cfg.ld.d}")
    f = backbone_forward(x, cfg.backbone, params.scope("backbone"), mode)
    f = arrangement_forward(f, cfg.arrangement, cfg.ga, cfg.ld, params.scope("gald"), mode, trace)
    mid, cls = _head_specs(cfg)
    y = conv_bn_relu(f, mid, params.scope("head.conv"), mode)
    y = conv2d(y, cls, params.scope("head.cls"))
    return bilinear_resize(y, (h, w))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _valid_mask(labels: np.ndarray, num_classes: int, ignore_index: Optional[int]) -> np.ndarray:
    labels = np.asarray(labels)
    valid = labels != ignore_index if ignore_index is not None else np.ones(labels.shape, bool)
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise LabelOutOfRange(f"labels outside [0, {num_classes}) found: {np.unique(labels[bad])[:5]}")
    return valid


def pixel_losses(logits: Tensor, labels, ignore_index: Optional[int] = 255) -> Tensor:
    """Per-pixel -log softmax(logits)[label], shape N x H x W; ignored pixels are 0."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatch(f"logits {logits.shape} do not match labels {labels.shape}")
    k = logits.shape[1]
    valid = _valid_mask(labels, k, ignore_index)
    safe = np.where(valid, labels, 0).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    loss = np.where(valid, lse - picked, 0.0)

    def bw(g):
        p = np.exp(z - lse[:, None])
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * (g * valid)[:, None],)

    return make_op("pixel_nll", loss, (logits,), bw)


def _masked_mean(losses: Tensor, keep: np.ndarray, count: int) -> Tensor:
    return div(mul(losses, keep.astype(np.float64)).sum(), float(count))


def cross_entropy(logits: Tensor, labels, ignore_index: Optional[int] = 255) -> Tensor:
    losses = pixel_losses(logits, labels, ignore_index)
    valid = _valid_mask(labels, logits.shape[1], ignore_index)
    count = int(valid.sum())
    if count == 0:
        raise AllIgnored("every pixel carries the ignore label")
    return _masked_mean(losses, valid, count)


def ohem_keep_mask(losses: np.ndarray, valid: np.ndarray, keep_fraction: float, min_kept: int) -> np.ndarray:
    """Boolean mask of the top-K valid pixels by loss; ties go to the lowest flat index."""
    n_valid = int(valid.sum())
    k = min(n_valid, max(min_kept, int(math.floor(keep_fraction * n_valid))))
    if k == n_valid:
        return valid.copy()
    flat = np.where(valid.reshape(-1), losses.reshape(-1), -np.inf)
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.shape, bool)
    keep[order[:k]] = True
    return keep.reshape(losses.shape)


def ohem_loss(
    logits: Tensor,
    labels,
    keep_fraction: float = 0.25,
    min_kept: int = 64,
    ignore_index: Optional[int] = 255,
) -> Tensor:
    """Mean cross entropy over the K hardest valid pixels, K = max(min_kept, floor(frac * valid))."""
    losses = pixel_losses(logits, labels, ignore_index)
    valid = _valid_mask(labels, logits.shape[1], ignore_index)
    if not valid.any():
        raise AllIgnored("every pixel carries the ignore label")
    keep = ohem_keep_mask(losses.data, valid, keep_fraction, min_kept)
    return _masked_mean(losses, keep, int(keep.sum()))


def loss_fn(logits: Tensor, labels, train_cfg: TrainConfig) -> Tensor:
    if train_cfg.ohem.enabled:
        o = train_cfg.ohem
        return ohem_loss(logits, labels, o.keep_fraction, o.min_kept, train_cfg.ignore_index)
    return cross_entropy(logits, labels, train_cfg.ignore_index)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def poly_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.max_iter:
        raise ValueError(f"iteration {it} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - it / cfg.max_iter) ** cfg.power


def sgd_step(params: LayerParams, velocities: dict, lr: float, momentum: float) -> None:
    """v <- momentum * v + grad; p <- p - lr * v; then clear grads."""
    trainable = params.trainable()
    missing = [name for name, p in trainable if p.grad is None]
    if missing:
        raise MissingGrad(f"no gradient for {missing[:3]}")
    for name, p in trainable:
        v = velocities.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocities[name] = v
        p.data = p.data - lr * v
        p.grad = None


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


def stack_batch(samples: Sequence) -> tuple:
    images = np.stack([s.image for s in samples]).astype(np.float64)
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    return images, labels


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled at every epoch."""
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield perm[lo : lo + batch_size]


def train(cfg, samples: Sequence, log_path=None, params: Optional[LayerParams] = None, callback=None):
    """Train the configured model; returns (params, list of per-iteration records)."""
    if not samples:
        raise InvalidSpec("training set is empty")
    tc = cfg.train
    params = init_model(cfg) if params is None else params
    rng = np.random.default_rng([tc.seed, 1])
    batches = iterate_batches(len(samples), tc.batch_size, rng)
    velocities: dict = {}
    records = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for it in range(tc.max_iter):
            idx = next(batches)
            images, labels = stack_batch([samples[i] for i in idx])
            lr = poly_lr(it, tc)
            logits = forward_model(images, cfg, params, "train")
            loss = loss_fn(logits, labels, tc)
            loss.backward()
            sgd_step(params, velocities, lr, tc.momentum)
            rec = {"iter": it, "lr": lr, "loss": float(loss.data)}
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(it, params, rec)
            if it % 100 == 0:
                logger.info("iter %d lr %.5f loss %.4f", it, lr, rec["loss"])
    finally:
        if fh is not None:
            fh.close()
    return params, records


def predict(cfg, params: LayerParams, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode argmax labels for an N x C x H x W image array."""
    out = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            logits = forward_model(images[lo : lo + batch_size], cfg, params, "eval")
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(cfg, params: LayerParams, samples: Sequence, batch_size: int = 16):
    from .synthbench import EvalReport, accumulate

    report = EvalReport.empty(cfg.num_classes)
    for lo in range(0, len(samples), batch_size):
        images, labels = stack_batch(samples[lo : lo + batch_size])
        preds = predict(cfg, params, images, batch_size)
        for p, l in zip(preds, labels):
            accumulate(report, p, l)
    return report
