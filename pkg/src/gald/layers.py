"""Parameterised layers: convolution, batch norm, pooling and bilinear resize."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from .errors import DegenerateBatch, InvalidSpec, ShapeMismatch
from .tensor import Tensor, make_op, relu

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class Conv2dSpec:
    in_ch: int
    out_ch: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_ch <= 0 or self.out_ch <= 0 or self.groups <= 0:
            raise InvalidSpec(f"non-positive channel/group count in {self}")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise InvalidSpec(f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise InvalidSpec(f"bad kernel/stride/dilation/padding in {self}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch

    def weight_shape(self) -> tuple:
        return (self.out_ch, self.in_ch // self.groups) + self.kernel

    def output_size(self, h: int, w: int) -> Pair:
        oh = conv_out_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0])
        ow = conv_out_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1])
        return oh, ow


@dataclass(frozen=True)
class BatchNormSpec:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5


def conv_out_size(n: int, k: int, s: int, p: int, d: int) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


class LayerParams:
    """Ordered name -> Tensor map; ``scope`` gives a prefixed view of the same storage."""

    def __init__(self, tensors: Optional[dict] = None, seed: Optional[int] = None, prefix: str = ""):
        self._store = {} if tensors is None else tensors
        self.seed = seed
        self.prefix = prefix

    def scope(self, name: str) -> "LayerParams":
        view = LayerParams(self._store, self.seed, f"{self.prefix}{name}.")
        return view

    def _key(self, name: str) -> str:
        return f"{self.prefix}{name}"

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._store[self._key(name)]
        except KeyError:
            raise KeyError(f"missing parameter {self._key(name)!r}") from None

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._store[self._key(name)] = value

    def __contains__(self, name: str) -> bool:
        return self._key(name) in self._store

    def get(self, name: str, default=None):
        return self._store.get(self._key(name), default)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for k, v in self._store.items():
            if k.startswith(self.prefix):
                yield k, v

    def names(self) -> list:
        return [k for k, _ in self.items()]

    def trainable(self) -> list:
        return [(k, v) for k, v in self.items() if v.requires_grad]

    def __len__(self) -> int:
        return sum(1 for _ in self.items())

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def clone(self) -> "LayerParams":
        store = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self._store.items()}
        return LayerParams(store, self.seed, self.prefix)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def xavier_bound(spec: Conv2dSpec) -> float:
    taps = spec.kernel[0] * spec.kernel[1]
    fan_in = spec.in_ch // spec.groups * taps
    fan_out = spec.out_ch // spec.groups * taps
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_conv(params: LayerParams, spec: Conv2dSpec, rng: np.random.Generator) -> None:
    b = xavier_bound(spec)
    params["weight"] = Tensor(rng.uniform(-b, b, size=spec.weight_shape()), requires_grad=True)
    if spec.bias:
        params["bias"] = Tensor(np.zeros(spec.out_ch), requires_grad=True)


def init_bn(params: LayerParams, channels: int) -> None:
    params["weight"] = Tensor(np.ones(channels), requires_grad=True)
    params["bias"] = Tensor(np.zeros(channels), requires_grad=True)
    params["running_mean"] = Tensor(np.zeros(channels))
    params["running_var"] = Tensor(np.ones(channels))


def init_params(spec: Union[Conv2dSpec, BatchNormSpec], seed: int) -> LayerParams:
    params = LayerParams(seed=seed)
    if isinstance(spec, Conv2dSpec):
        init_conv(params, spec, np.random.default_rng(seed))
    elif isinstance(spec, BatchNormSpec):
        init_bn(params, spec.channels)
    else:
        raise InvalidSpec(f"no initialiser for {type(spec).__name__}")
    return params


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d_raw(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
) -> Tensor:
    """Grouped, dilated, strided cross-correlation with zero padding (im2col + matmul)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    g = groups
    if c != cg * g:
        raise ShapeMismatch(f"input has {c} channels, weight expects {cg * g}")
    if o % g:
        raise InvalidSpec(f"groups={g} does not divide out channels {o}")
    ho = conv_out_size(h, kh, sh, ph, dh)
    wo = conv_out_size(w, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise InvalidSpec(f"conv output size {ho}x{wo} is not positive")
    taps = kh * kw
    og = o // g

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    if taps == 1 and sh == 1 and sw == 1:
        cols = xp[:, :, None]
    else:
        cols = np.empty((n, c, taps, ho, wo))
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dh, j * dw
                cols[:, :, i * kw + j] = xp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw]
    cols = cols.reshape(n, g, cg * taps, ho * wo)
    wmat = weight.data.reshape(g, og, cg * taps)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def bw(gout):
        gm = gout.reshape(n, g, og, ho * wo)
        gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wmat, -1, -2), gm).reshape(n, c, taps, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dh, j * dw
                    gxp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += gcols[:, :, i * kw + j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w] if ph or pw else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, inputs, bw)


def conv2d(x: Tensor, spec: Conv2dSpec, params: LayerParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != spec.in_ch:
        raise ShapeMismatch(f"conv2d expects {spec.in_ch} input channels, got shape {x.shape}")
    weight = params["weight"]
    if weight.shape != spec.weight_shape():
        raise ShapeMismatch(f"weight shape {weight.shape} does not match spec {spec.weight_shape()}")
    bias = params["bias"] if spec.bias else None
    return conv2d_raw(x, weight, bias, spec.stride, spec.padding, spec.dilation, spec.groups)


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    params: LayerParams,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm; train mode also updates the running statistics in place."""
    if x.ndim != 4:
        raise ShapeMismatch(f"batchnorm2d expects a 4-D input, got {x.shape}")
    gamma, beta = params["weight"], params["bias"]
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeMismatch(f"batchnorm has {gamma.shape[0]} channels, input has {c}")
    n, _, h, w = x.shape
    m = n * h * w
    xd = x.data
    if mode == "train":
        if m == 1:
            raise DegenerateBatch("batch statistics need more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        rm, rv = params["running_mean"], params["running_var"]
        rm.data = (1.0 - momentum) * rm.data + momentum * mean
        rv.data = (1.0 - momentum) * rv.data + momentum * var
    elif mode == "eval":
        mean = params["running_mean"].data
        var = params["running_var"].data
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if mode == "train":
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_op("batchnorm2d", out, (x, gamma, beta), bw)


def conv_bn_relu(x: Tensor, spec: Conv2dSpec, params: LayerParams, mode: str, relu_out: bool = True) -> Tensor:
    """conv (scope ``conv``) -> BN (scope ``bn``) -> optional ReLU."""
    y = conv2d(x, spec, params.scope("conv"))
    y = batchnorm2d(y, params.scope("bn"), mode)
    return relu(y) if relu_out else y


def init_conv_bn(params: LayerParams, spec: Conv2dSpec, rng: np.random.Generator) -> None:
    init_conv(params.scope("conv"), spec, rng)
    init_bn(params.scope("bn"), spec.out_ch)


# ---------------------------------------------------------------------------
# Pooling and resizing
# ---------------------------------------------------------------------------


def _bins(n_in: int, n_out: int) -> list:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool2d(x: Tensor, out) -> Tensor:
    """Average each bin [floor(i*H/oh), ceil((i+1)*H/oh)) x (same for columns)."""
    oh, ow = _pair(out)
    if x.ndim != 4:
        raise ShapeMismatch(f"adaptive_avg_pool2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise InvalidSpec(f"pool size {(oh, ow)} invalid for input {h}x{w}")
    if (oh, ow) == (h, w):
        return x
    rows, cols = _bins(h, oh), _bins(w, ow)
    xd = x.data
    out_arr = np.empty((n, c, oh, ow))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out_arr[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gx = np.zeros(x.shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (gx,)

    return make_op("adaptive_avg_pool2d", out_arr, (x,), bw)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        src = (n_in - 1) / 2.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)
        lo = min(int(math.floor(src)), n_in - 2)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out) -> Tensor:
    oh, ow = _pair(out)
    if oh < 1 or ow < 1:
        raise InvalidSpec(f"resize target {(oh, ow)} must be positive")
    if x.ndim != 4:
        raise ShapeMismatch(f"bilinear_resize expects a 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if (oh, ow) == (h, w):
        return x
    ry = interp_matrix(h, oh)
    rx = interp_matrix(w, ow)
    out_arr = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return make_op("bilinear_resize", out_arr, (x,), bw)
