"""Finite-difference gradient suite over every op, layer and composed module.

Input probes run with batch norm in eval mode (tol 1e-4). Train-mode batch
norm couples every pixel through the batch statistics, so those paths are
probed on a random subset of the parameters with tol 1e-3.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional

import numpy as np

from . import tensor as T
from .config import GaldConfig
from .context import GA_KINDS, GaSpec, ga_forward, init_ga_params
from .distribution import (
    ARRANGEMENTS,
    LD_STRATEGIES,
    Arrangement,
    LdSpec,
    arrangement_forward,
    init_arrangement_params,
    init_ld_params,
    ld_mask,
)
from .gradcheck import GradcheckReport, gradcheck
from .layers import (
    BatchNormSpec,
    Conv2dSpec,
    LayerParams,
    adaptive_avg_pool2d,
    batchnorm2d,
    bilinear_resize,
    conv2d,
    init_params,
)
from .segnet import cross_entropy, forward_model, init_model, ohem_loss, pixel_losses
from .tensor import Tensor

TOL = 1e-4
TOL_BN_TRAIN = 1e-3
GROUPS = ("ops", "layers", "ga", "ld", "arrangements", "model")


@dataclass
class Case:
    name: str
    fn: Callable[[Tensor], Tensor]
    x: np.ndarray
    tol: float = TOL
    max_coords: Optional[int] = None


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(list(key))


def probe(t: Tensor, seed: int = 0) -> Tensor:
    """Scalar projection of ``t`` onto fixed random weights."""
    return T.mul(t, _rng(seed, 99).normal(size=t.shape)).sum()


def jitter_biases(params: LayerParams, seed: int, scale: float = 0.1) -> LayerParams:
    """Move zero-initialised biases off ReLU kinks so probes sit at differentiable points."""
    r = _rng(seed, 7)
    for k, v in params.items():
        if k.endswith("bias") and v.requires_grad:
            params._store[k] = Tensor(v.data + scale * r.normal(size=v.shape), requires_grad=True)
    return params


def param_case(name, params: LayerParams, forward, tol=TOL_BN_TRAIN, max_coords=24, seed=0) -> Case:
    """Probe ``forward(params)`` with respect to all trainable parameters, flattened.

    Non-trainable entries (running stats) are copied per call so repeated
    train-mode forwards do not drift.
    """
    names = [k for k, v in params.items() if v.requires_grad]
    shapes = [params._store[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    v0 = np.concatenate([params._store[k].data.reshape(-1) for k in names])
    frozen = {k: v.data for k, v in params.items() if not v.requires_grad}

    def fn(v: Tensor) -> Tensor:
        store = {k: Tensor(d.copy()) for k, d in frozen.items()}
        parts = T.split(v, sizes, axis=0)
        for k, s, p in zip(names, shapes, parts):
            store[k] = T.reshape(p, s)
        return probe(forward(LayerParams(store, params.seed, params.prefix)), seed)

    return Case(name, fn, v0, tol, max_coords)


# ---------------------------------------------------------------------------
# Case builders
# ---------------------------------------------------------------------------


def op_cases(seeds: Iterable[int] = (0, 1, 2)) -> List[Case]:
    return [c for s in seeds for c in _op_cases(s)]


def _op_cases(s: int) -> List[Case]:
    r = _rng(s, 1)
    a, b, m = r.normal(size=(3, 4)), r.normal(size=(1, 4)), r.normal(size=(4, 2))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    cases = [
        ("add", lambda x: probe(T.add(x, Tensor(b)), s), a),
        ("add_broadcast", lambda x: probe(T.add(Tensor(a), x), s), b),
        ("sub", lambda x: probe(T.sub(Tensor(a), x), s), b),
        ("mul", lambda x: probe(T.mul(x, x), s), a),
        ("mul_broadcast", lambda x: probe(T.mul(Tensor(a), x), s), b),
        ("div", lambda x: probe(T.div(Tensor(a), x), s), pos),
        ("div_numerator", lambda x: probe(T.div(x, Tensor(pos)), s), a),
        ("sigmoid", lambda x: probe(T.sigmoid(x), s), a),
        ("relu", lambda x: probe(T.relu(x), s), a + np.sign(a) * 0.01),
        ("exp", lambda x: probe(T.exp(x), s), a),
        ("log", lambda x: probe(T.log(x), s), pos),
        ("matmul", lambda x: probe(T.matmul(x, Tensor(m)), s), a),
        ("matmul_batched", lambda x: probe(T.matmul(x, T.transpose(x, (0, 2, 1))), s), a.reshape(2, 3, 2)),
        ("softmax", lambda x: probe(T.softmax(x, axis=-1), s), a),
        ("softmax_axis0", lambda x: probe(T.softmax(x, axis=0), s), a),
        ("sum", lambda x: probe(x.sum(axes=[1], keepdims=True), s), a),
        ("mean", lambda x: probe(x.mean(axes=[0]), s), a),
        ("max", lambda x: probe(x.max(axes=[1]), s), a),
        ("concat", lambda x: probe(T.concat([x, T.mul(x, 2.0)], axis=1), s), a),
        ("getitem", lambda x: probe(x[1:, ::2], s), a),
        ("split", lambda x: probe(T.split(x, [1, 3], axis=1)[1], s), a),
        ("reshape", lambda x: probe(T.reshape(x, (2, 6)), s), a),
        ("transpose", lambda x: probe(T.transpose(x, (1, 0)), s), a),
        ("broadcast_to", lambda x: probe(T.broadcast_to(x, (5, 3, 4)), s), b),
    ]
    return [Case(f"ops.{n}[{s}]", f, x) for n, f, x in cases]


def layer_cases(seeds: Iterable[int] = (0, 1, 2)) -> List[Case]:
    return [c for s in seeds for c in _layer_cases(s)]


def _layer_cases(s: int) -> List[Case]:
    out = []
    r = _rng(s, 2)
    x = r.normal(size=(2, 4, 6, 6))
    convs = {
        "conv3x3": Conv2dSpec(4, 6, kernel=3, padding=1),
        "conv_dilated_grouped": Conv2dSpec(4, 6, kernel=3, padding=2, dilation=2, groups=2),
        "conv_strided": Conv2dSpec(4, 4, kernel=3, stride=2, padding=1),
        "conv_depthwise": Conv2dSpec(4, 4, kernel=3, padding=1, groups=4),
    }
    for n, spec in convs.items():
        p = init_params(spec, s)
        if spec.bias:
            p["bias"] = Tensor(r.normal(size=spec.out_ch) * 0.1, requires_grad=True)
        out.append(Case(f"layers.{n}[{s}]", lambda t, spec=spec, p=p: probe(conv2d(t, spec, p), s), x))
        out.append(param_case(f"layers.{n}.params[{s}]", p, lambda q, spec=spec: conv2d(Tensor(x), spec, q), TOL, None, s))
    bn = init_params(BatchNormSpec(4), s)
    bn["weight"] = Tensor(r.uniform(0.5, 1.5, size=4), requires_grad=True)
    bn["bias"] = Tensor(r.normal(size=4), requires_grad=True)
    out.append(Case(f"layers.bn_eval[{s}]", lambda t, p=bn: probe(batchnorm2d(t, p.clone(), "eval"), s), x))
    out.append(Case(f"layers.bn_train[{s}]", lambda t, p=bn: probe(batchnorm2d(t, p.clone(), "train"), s), x))
    out.append(param_case(f"layers.bn_train.params[{s}]", bn, lambda q: batchnorm2d(Tensor(x), q, "train"), TOL, None, s))
    out.append(Case(f"layers.avg_pool[{s}]", lambda t: probe(adaptive_avg_pool2d(t, (4, 3)), s), x))
    out.append(Case(f"layers.bilinear_up[{s}]", lambda t: probe(bilinear_resize(t, (9, 11)), s), x))
    out.append(Case(f"layers.bilinear_down[{s}]", lambda t: probe(bilinear_resize(t, (3, 4)), s), x))
    return out


def _ga_spec(kind: str, channels: int = 8) -> GaSpec:
    return GaSpec(kind, channels=channels, groups=4)


def ga_cases() -> List[Case]:
    out = []
    x = _rng(3).normal(size=(1, 8, 6, 6))
    for kind in GA_KINDS[:-1]:
        for down in (False, True):
            # a half-resolution 3x3 map only fits PSP bins up to 3
            bins = [1, 2] if down else [1, 2, 3, 6]
            spec = GaSpec(kind, channels=8, groups=4, bins=bins, downsample_input=down)
            p = LayerParams()
            init_ga_params(spec, p, _rng(4))
            tag = f"ga.{kind}{'_down' if down else ''}"
            out.append(Case(tag, lambda t, spec=spec, p=p: probe(ga_forward(t, spec, p, "eval")), x, TOL, 48))
            xb = _rng(5).normal(size=(2, 8, 6, 6))
            out.append(param_case(tag + ".train_params", p, lambda q, spec=spec: ga_forward(Tensor(xb), spec, q, "train")))
    # full CGNL + LD on a small map
    arr, ga, ld = Arrangement("gald"), _ga_spec("cgnl"), LdSpec(d=4)
    p = LayerParams()
    init_arrangement_params(8, arr, ga, ld, p, _rng(6))
    out.append(Case("ga.cgnl_ld_6x6", lambda t: probe(arrangement_forward(t, arr, ga, ld, p, "eval")), x, TOL, None))
    return out


def ld_cases() -> List[Case]:
    out = []
    x = _rng(7).normal(size=(1, 4, 16, 16))
    for strategy in LD_STRATEGIES:
        spec = LdSpec(strategy, d=8)
        p = LayerParams()
        init_ld_params(4, spec, p, _rng(8))
        jitter_biases(p, 9)
        out.append(Case(f"ld.{strategy}", lambda t, spec=spec, p=p: probe(ld_mask(t, spec, p)), x, TOL, 64))
        out.append(param_case(f"ld.{strategy}.params", p, lambda q, spec=spec: ld_mask(Tensor(x), spec, q), TOL, None))
    return out


def arrangement_cases(max_coords: int = 16) -> List[Case]:
    """All GA kinds x LD strategies x arrangements on 1x8x16x16."""
    out = []
    x = _rng(10).normal(size=(1, 8, 16, 16))
    xb = _rng(11).normal(size=(2, 8, 16, 16))
    for kind, strategy, a in itertools.product(GA_KINDS[:-1], LD_STRATEGIES, ARRANGEMENTS):
        arr, ga, ld = Arrangement(a), _ga_spec(kind), LdSpec(strategy, d=8)
        p = LayerParams()
        init_arrangement_params(8, arr, ga, ld, p, _rng(12))
        jitter_biases(p, 12)
        tag = f"arrangements.{kind}.{strategy}.{a}"

        def fwd(t, q, mode, arr=arr, ga=ga, ld=ld):
            return arrangement_forward(t, arr, ga, ld, q, mode)

        out.append(Case(tag, lambda t, p=p, fwd=fwd: probe(fwd(t, p, "eval")), x, TOL, max_coords))
        if len(p):
            bn_train = arr.uses_ga
            out.append(
                param_case(
                    tag + ".train_params",
                    p,
                    lambda q, fwd=fwd: fwd(Tensor(xb), q, "train"),
                    TOL_BN_TRAIN if bn_train else TOL,
                    max_coords,
                )
            )
    return out


def model_cases() -> List[Case]:
    cfg = GaldConfig.from_dict(
        {
            "channels": 8,
            "image_size": 32,
            "ga": {"groups": 2},
            "ld": {"d": 4},
            "backbone": {"widths": [4, 8, 8], "strides": [1, 2, 2]},
        }
    )
    params = init_model(cfg, seed=0)
    img = _rng(13).uniform(size=(1, 3, 32, 32))
    labels = _rng(14).integers(0, 3, size=(1, 32, 32))
    labels[0, :2] = 255
    logits0 = _rng(15).normal(size=(2, 3, 4, 5))
    lab_small = _rng(16).integers(0, 3, size=(2, 4, 5))
    lab_small[0, 0, 0] = 255
    return [
        Case("model.pixel_losses", lambda t: probe(pixel_losses(t, lab_small)), logits0),
        Case("model.cross_entropy", lambda t: cross_entropy(t, lab_small), logits0),
        Case("model.ohem", lambda t: ohem_loss(t, lab_small, 0.3, 4), logits0),
        param_case(
            "model.full_32x32.train_params",
            params,
            lambda q: cross_entropy(forward_model(img, cfg, q, "train"), labels)[None],
            TOL_BN_TRAIN,
            32,
        ),
    ]


BUILDERS = {
    "ops": op_cases,
    "layers": layer_cases,
    "ga": ga_cases,
    "ld": ld_cases,
    "arrangements": arrangement_cases,
    "model": model_cases,
}


def build_cases(module: Optional[str] = None) -> List[Case]:
    if module is None:
        return [c for b in BUILDERS.values() for c in b()]
    group = module.split(".")[0]
    if group not in BUILDERS:
        raise KeyError(f"unknown module {module!r}; choose from {', '.join(GROUPS)}")
    return [c for c in BUILDERS[group]() if c.name == module or c.name.startswith(module)]


def run_case(case: Case, eps: float = 1e-5) -> GradcheckReport:
    return gradcheck(case.fn, case.x, eps=eps, tol=case.tol, max_coords=case.max_coords)


def _kind_of(name: str) -> Optional[str]:
    parts = name.split(".")
    if parts[0] in ("ga", "arrangements"):
        return parts[1].split("_")[0]
    return None


def run_suite(module: Optional[str] = None, eps: float = 1e-5, ga_kind: Optional[str] = None) -> dict:
    """Run every case (or those under ``module``); returns a JSON-ready report.

    ``ga_kind`` restricts the GA and arrangement cases to one context module.
    """
    t0 = time.perf_counter()
    cases = build_cases(module)
    if ga_kind is not None:
        cases = [c for c in cases if _kind_of(c.name) in (None, ga_kind)]
    results = {}
    for c in cases:
        rep = run_case(c, eps)
        d = rep.to_dict()
        d["tol"] = c.tol
        results[c.name] = d
    return {
        "pass": all(r["pass"] for r in results.values()),
        "cases": len(results),
        "failed": [k for k, r in results.items() if not r["pass"]],
        "seconds": round(time.perf_counter() - t0, 3),
        "results": results,
    }
