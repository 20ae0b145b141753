"""Global aggregation modules: PSP, ASPP, Non-Local and CGNL.

Each maps an N x C x H x W feature to a context feature of the same shape.
Parameters live under the scope given by the caller (``ga`` in full models).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .errors import InvalidSpec, ShapeMismatch
from .layers import (
    Conv2dSpec,
    LayerParams,
    adaptive_avg_pool2d,
    bilinear_resize,
    conv2d,
    conv_bn_relu,
    init_conv,
    init_conv_bn,
)
from .tensor import Tensor, add, broadcast_to, concat, matmul, mul, relu, reshape, softmax, transpose

GA_KINDS = ("psp", "aspp", "nonlocal", "cgnl", "none")


@dataclass
class GaSpec:
    kind: str = "cgnl"
    channels: int = 32
    groups: int = 4
    bins: List[int] = field(default_factory=lambda: [1, 2, 3, 6])
    rates: List[int] = field(default_factory=lambda: [1, 6, 12])
    downsample_input: bool = False

    def __post_init__(self):
        if self.kind not in GA_KINDS:
            raise InvalidSpec(f"unknown GA kind {self.kind!r}")
        if self.channels < 1:
            raise InvalidSpec("channels must be positive")
        if self.kind == "cgnl" and (self.groups < 1 or self.channels % self.groups):
            raise InvalidSpec(f"groups={self.groups} must divide channels={self.channels}")
        if self.kind == "psp":
            if not self.bins or min(self.bins) < 1:
                raise InvalidSpec("PSP bins must be >= 1")
            if self.channels % len(self.bins):
                raise InvalidSpec(f"{len(self.bins)} PSP branches do not divide {self.channels} channels")
        if self.kind == "aspp":
            if not self.rates or min(self.rates) < 1:
                raise InvalidSpec("ASPP rates must be >= 1")
            if self.channels % (len(self.rates) + 1):
                raise InvalidSpec(f"{len(self.rates) + 1} ASPP branches do not divide {self.channels} channels")
        if self.kind == "nonlocal" and self.channels < 2:
            raise InvalidSpec("non-local needs at least 2 channels")

    @property
    def inner_channels(self) -> int:
        return self.channels // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GaSpec":
        return cls(**d)


def _c1(cin, cout, bias=False):
    return Conv2dSpec(cin, cout, kernel=1, bias=bias)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


def init_ga_params(spec: GaSpec, params: LayerParams, rng: np.random.Generator) -> None:
    c = spec.channels
    if spec.kind == "psp":
        branch = c // len(spec.bins)
        for i, _ in enumerate(spec.bins):
            init_conv(params.scope(f"branch{i}"), _c1(c, branch, bias=True), rng)
        init_conv_bn(params.scope("project"), _c1(c, c), rng)
    elif spec.kind == "aspp":
        width = c // (len(spec.rates) + 1)
        for i, rate in enumerate(spec.rates):
            init_conv_bn(params.scope(f"branch{i}"), _aspp_spec(c, width, rate), rng)
        init_conv(params.scope("image_pool"), _c1(c, width, bias=True), rng)
        init_conv_bn(params.scope("project"), _c1(c, c), rng)
    elif spec.kind == "nonlocal":
        ci = spec.inner_channels
        for name in ("theta", "phi", "g"):
            init_conv(params.scope(name), _c1(c, ci), rng)
        init_conv_bn(params.scope("out"), _c1(ci, c), rng)
    elif spec.kind == "cgnl":
        for name in ("theta", "phi", "g"):
            init_conv(params.scope(name), _c1(c, c), rng)
        init_conv_bn(params.scope("out"), _c1(c, c), rng)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_input(x: Tensor, spec: GaSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.channels:
        raise ShapeMismatch(f"GA expects N x {spec.channels} x H x W, got {x.shape}")


def ga_forward(x: Tensor, spec: GaSpec, params: LayerParams, mode: str = "train") -> Tensor:
    """Run the configured context module, optionally at half resolution."""
    _check_input(x, spec)
    if spec.kind == "none":
        return x
    h, w = x.shape[2:]
    inp = x
    if spec.downsample_input:
        if h < 2 or w < 2:
            raise InvalidSpec(f"cannot downsample a {h}x{w} feature by 2")
        inp = bilinear_resize(x, (math.ceil(h / 2), math.ceil(w / 2)))
    fn = {"psp": psp_forward, "aspp": aspp_forward, "nonlocal": nonlocal_forward, "cgnl": cgnl_forward}[spec.kind]
    y = fn(inp, spec, params, mode)
    if spec.downsample_input:
        y = bilinear_resize(y, (h, w))
    return y


def psp_forward(x: Tensor, spec: GaSpec, params: LayerParams, mode: str = "train") -> Tensor:
    _check_input(x, spec)
    h, w = x.shape[2:]
    if max(spec.bins) > min(h, w):
        raise InvalidSpec(f"PSP bin {max(spec.bins)} exceeds feature size {h}x{w}")
    c = spec.channels
    branch = c // len(spec.bins)
    outs = []
    for i, b in enumerate(spec.bins):
        y = adaptive_avg_pool2d(x, (b, b))
        # pooled maps can hold a single value per channel; bias+ReLU instead of BN
        y = relu(conv2d(y, _c1(c, branch, bias=True), params.scope(f"branch{i}")))
        outs.append(bilinear_resize(y, (h, w)))
    return conv_bn_relu(concat(outs, axis=1), _c1(c, c), params.scope("project"), mode)


def _aspp_spec(c: int, width: int, rate: int) -> Conv2dSpec:
    if rate == 1:
        return _c1(c, width)
    return Conv2dSpec(c, width, kernel=3, padding=rate, dilation=rate, bias=False)


def aspp_forward(x: Tensor, spec: GaSpec, params: LayerParams, mode: str = "train") -> Tensor:
    _check_input(x, spec)
    n, c, h, w = x.shape
    width = c // (len(spec.rates) + 1)
    outs = [
        conv_bn_relu(x, _aspp_spec(c, width, rate), params.scope(f"branch{i}"), mode)
        for i, rate in enumerate(spec.rates)
    ]
    pooled = adaptive_avg_pool2d(x, (1, 1))
    pooled = relu(conv2d(pooled, _c1(c, width, bias=True), params.scope("image_pool")))
    outs.append(broadcast_to(pooled, (n, width, h, w)))
    return conv_bn_relu(concat(outs, axis=1), _c1(c, c), params.scope("project"), mode)


def nonlocal_context(x: Tensor, spec: GaSpec, params: LayerParams):
    """Return (affinity P x P per item, g as N x C' x P, aggregated y as N x C' x H x W)."""
    n, c, h, w = x.shape
    ci = spec.inner_channels
    p = h * w
    theta = reshape(conv2d(x, _c1(c, ci), params.scope("theta")), (n, ci, p))
    phi = reshape(conv2d(x, _c1(c, ci), params.scope("phi")), (n, ci, p))
    g = reshape(conv2d(x, _c1(c, ci), params.scope("g")), (n, ci, p))
    affinity = softmax(matmul(transpose(theta, (0, 2, 1)), phi), axis=-1)
    y = matmul(affinity, transpose(g, (0, 2, 1)))  # n x p x ci
    y = reshape(transpose(y, (0, 2, 1)), (n, ci, h, w))
    return affinity, g, y


def nonlocal_forward(x: Tensor, spec: GaSpec, params: LayerParams, mode: str = "train") -> Tensor:
    _check_input(x, spec)
    _, _, y = nonlocal_context(x, spec, params)
    z = conv_bn_relu(y, _c1(spec.inner_channels, spec.channels), params.scope("out"), mode, relu_out=False)
    return add(x, z)


def cgnl_context(x: Tensor, spec: GaSpec, params: LayerParams):
    """Return (theta, phi, g, s, y) with group tensors shaped N x G x P_g.

    ``s`` holds one statistic per (item, group): dot(phi_g, g_g) / P_g, and
    ``y = s * theta`` reshaped back to N x C x H x W.
    """
    n, c, h, w = x.shape
    grp = spec.groups
    pg = (c // grp) * h * w
    theta = reshape(conv2d(x, _c1(c, c), params.scope("theta")), (n, grp, pg))
    phi = reshape(conv2d(x, _c1(c, c), params.scope("phi")), (n, grp, pg))
    g = reshape(conv2d(x, _c1(c, c), params.scope("g")), (n, grp, pg))
    s = mul(mul(phi, g).sum(axes=[2], keepdims=True), 1.0 / pg)
    y = reshape(mul(theta, s), (n, c, h, w))
    return theta, phi, g, s, y


def cgnl_forward(x: Tensor, spec: GaSpec, params: LayerParams, mode: str = "train") -> Tensor:
    _check_input(x, spec)
    *_, y = cgnl_context(x, spec, params)
    c = spec.channels
    z = conv_bn_relu(y, _c1(c, c), params.scope("out"), mode, relu_out=False)
    return add(x, z)
