"""Local distribution: per-channel mask estimation, gated distribution and fusion.

The mask for channel c at each position comes from a stack of depth-wise
convolutions over a coarse (1/d resolution) copy of the feature, upsampled
back and squashed by a sigmoid. The context feature is then scaled by
``1 + mask`` and concatenated with the original feature.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .context import GaSpec, ga_forward, init_ga_params
from .errors import InvalidSpec, ShapeMismatch
from .layers import (
    Conv2dSpec,
    LayerParams,
    adaptive_avg_pool2d,
    bilinear_resize,
    conv2d,
    init_conv,
)
from .tensor import Tensor, add, concat, mul, relu, sigmoid

LD_STRATEGIES = ("depthwise_stride_conv", "bilinear", "avg_pool")
ARRANGEMENTS = ("gald", "ldga", "parallel", "ga_only", "ld_only", "baseline")


@dataclass
class LdSpec:
    strategy: str = "depthwise_stride_conv"
    d: int = 8
    kernel: int = 3

    def __post_init__(self):
        if self.strategy not in LD_STRATEGIES:
            raise InvalidSpec(f"unknown LD strategy {self.strategy!r}")
        if self.d < 2 or self.d & (self.d - 1):
            raise InvalidSpec(f"downsampling ratio {self.d} must be a power of 2 >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidSpec(f"kernel {self.kernel} must be odd")

    @property
    def stages(self) -> int:
        return int(math.log2(self.d))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = self.stages
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LdSpec":
        d = dict(d)
        stages = d.pop("stages", None)
        spec = cls(**d)
        if stages is not None and stages != spec.stages:
            raise InvalidSpec(f"stages={stages} disagrees with d={spec.d}")
        return spec


@dataclass
class Arrangement:
    kind: str = "gald"

    def __post_init__(self):
        if self.kind not in ARRANGEMENTS:
            raise InvalidSpec(f"unknown arrangement {self.kind!r}")

    @property
    def uses_ga(self) -> bool:
        return self.kind in ("gald", "ldga", "parallel", "ga_only")

    @property
    def uses_ld(self) -> bool:
        return self.kind in ("gald", "ldga", "parallel", "ld_only")

    def out_channels(self, channels: int) -> int:
        return channels if self.kind == "baseline" else 2 * channels


def _stage_spec(channels: int, spec: LdSpec, stride: int) -> Conv2dSpec:
    k = spec.kernel
    return Conv2dSpec(channels, channels, kernel=k, stride=stride, padding=k // 2, groups=channels, bias=True)


def init_ld_params(channels: int, spec: LdSpec, params: LayerParams, rng: np.random.Generator) -> None:
    stride = 2 if spec.strategy == "depthwise_stride_conv" else 1
    for i in range(spec.stages):
        init_conv(params.scope(f"dw{i}"), _stage_spec(channels, spec, stride), rng)


def ld_mask(f_in: Tensor, spec: LdSpec, params: LayerParams) -> Tensor:
    """Per-channel mask maps in (0, 1) with the same shape as ``f_in``."""
    if f_in.ndim != 4:
        raise ShapeMismatch(f"ld_mask expects N x C x H x W, got {f_in.shape}")
    c, h, w = f_in.shape[1:]
    if h < spec.d or w < spec.d:
        raise InvalidSpec(f"feature {h}x{w} is smaller than the LD ratio {spec.d}")
    if spec.strategy == "depthwise_stride_conv":
        y, stride = f_in, 2
    elif spec.strategy == "bilinear":
        y, stride = bilinear_resize(f_in, (h // spec.d, w // spec.d)), 1
    else:
        y, stride = adaptive_avg_pool2d(f_in, (h // spec.d, w // spec.d)), 1
    for i in range(spec.stages):
        y = conv2d(y, _stage_spec(c, spec, stride), params.scope(f"dw{i}"))
        if i < spec.stages - 1:
            y = relu(y)
    return sigmoid(bilinear_resize(y, (h, w)))


def ld_distribute(f_ga: Tensor, m: Tensor) -> Tensor:
    """Scale the context feature by (1 + mask)."""
    if f_ga.shape != m.shape:
        raise ShapeMismatch(f"mask {m.shape} does not match feature {f_ga.shape}")
    return add(mul(m, f_ga), f_ga)


def gald_fuse(f: Tensor, f_gald: Tensor) -> Tensor:
    if f.shape != f_gald.shape:
        raise ShapeMismatch(f"cannot fuse {f_gald.shape} with {f.shape}")
    return concat([f_gald, f], axis=1)


def mask_summary(m: Tensor) -> Tensor:
    return m.mean(axes=[1], keepdims=True)


def init_arrangement_params(
    channels: int, arr: Arrangement, ga: GaSpec, ld: LdSpec, params: LayerParams, rng: np.random.Generator
) -> None:
    if arr.uses_ga:
        init_ga_params(ga, params.scope("ga"), rng)
    if arr.uses_ld:
        init_ld_params(channels, ld, params.scope("ld"), rng)
    if arr.kind == "parallel":
        init_conv(params.scope("fuse"), _fuse_spec(channels), rng)


def _fuse_spec(channels: int) -> Conv2dSpec:
    return Conv2dSpec(3 * channels, 2 * channels, kernel=1, bias=True)


def arrangement_forward(
    f: Tensor,
    arr: Arrangement,
    ga: GaSpec,
    ld: LdSpec,
    params: LayerParams,
    mode: str = "train",
    trace: Optional[dict] = None,
) -> Tensor:
    """Combine context (GA) and distribution (LD) per ``arr``.

    Output has 2C channels, except ``baseline`` which returns ``f`` untouched.
    When ``trace`` is a dict the mask map is stored under ``"mask"``.
    """
    gp, lp = params.scope("ga"), params.scope("ld")
    kind = arr.kind
    if kind == "baseline":
        return f
    if kind == "ga_only":
        return gald_fuse(f, ga_forward(f, ga, gp, mode))

    def masked(x):
        m = ld_mask(x, ld, lp)
        if trace is not None:
            trace["mask"] = m
        return ld_distribute(x, m)

    if kind == "gald":
        return gald_fuse(f, masked(ga_forward(f, ga, gp, mode)))
    if kind == "ldga":
        return gald_fuse(f, ga_forward(masked(f), ga, gp, mode))
    if kind == "ld_only":
        return gald_fuse(f, masked(f))
    # parallel
    c = f.shape[1]
    streams = concat([masked(f), ga_forward(f, ga, gp, mode), f], axis=1)
    return conv2d(streams, _fuse_spec(c), params.scope("fuse"))
