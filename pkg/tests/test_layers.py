import numpy as np
import pytest

from gald.errors import DegenerateBatch, InvalidSpec, ShapeMismatch
from gald.gradcheck import gradcheck
from gald.layers import (
    BatchNormSpec,
    Conv2dSpec,
    LayerParams,
    adaptive_avg_pool2d,
    batchnorm2d,
    bilinear_resize,
    conv2d,
    conv2d_raw,
    init_params,
    xavier_bound,
)
from gald.tensor import Tensor, concat


def probe(t, seed=0):
    r = np.random.default_rng(seed).normal(size=t.shape)
    return (t * r).sum()


def reference_conv(x, w, b, stride, pad, dil, groups):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            grp = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(cg):
                        for a in range(kh):
                            for e in range(kw):
                                acc += w[oc, ic, a, e] * xp[bi, grp * cg + ic, i * stride + a * dil, j * stride + e * dil]
                    out[bi, oc, i, j] = acc
    return out


# -- conv2d ----------------------------------------------------------------------


def test_depthwise_unit_kernel_is_identity():
    spec = Conv2dSpec(4, 4, kernel=1, groups=4, bias=False)
    params = LayerParams({"weight": Tensor(np.ones((4, 1, 1, 1)))})
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 5, 5)))
    assert np.array_equal(conv2d(x, spec, params).data, x.data)


def test_all_ones_kernel_counts_taps():
    spec = Conv2dSpec(1, 1, kernel=3, padding=1, bias=False)
    params = LayerParams({"weight": Tensor(np.ones((1, 1, 3, 3)))})
    y = conv2d(Tensor(np.full((1, 1, 5, 5), 2.0)), spec, params).data[0, 0]
    assert np.all(y[1:-1, 1:-1] == 18.0)
    assert y[0, 0] == y[0, -1] == y[-1, 0] == y[-1, -1] == 8.0
    assert y[0, 2] == 12.0


@pytest.mark.parametrize(
    "shape,cout,k,stride,pad,dil,groups",
    [
        ((2, 4, 8, 8), 6, 3, 1, 1, 1, 1),
        ((1, 4, 8, 8), 6, 3, 2, 2, 2, 2),
        ((2, 4, 7, 6), 4, 3, 2, 1, 1, 4),
        ((1, 2, 6, 6), 3, 1, 1, 0, 1, 1),
        ((2, 4, 8, 8), 8, 5, 1, 4, 2, 4),
    ],
)
def test_conv_matches_nested_loop_reference(shape, cout, k, stride, pad, dil, groups):
    rng = np.random.default_rng(sum(shape) + cout)
    x = rng.normal(size=shape)
    w = rng.normal(size=(cout, shape[1] // groups, k, k))
    b = rng.normal(size=cout)
    y = conv2d_raw(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil, groups).data
    np.testing.assert_allclose(y, reference_conv(x, w, b, stride, pad, dil, groups), rtol=0, atol=1e-12)


def test_grouped_conv_equals_per_group_convs():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 6, 7, 7)))
    w = rng.normal(size=(9, 2, 3, 3))
    full = conv2d_raw(x, Tensor(w), None, 1, 1, 1, groups=3).data
    parts = [
        conv2d_raw(Tensor(x.data[:, 2 * g : 2 * g + 2]), Tensor(w[3 * g : 3 * g + 3]), None, 1, 1, 1, 1)
        for g in range(3)
    ]
    np.testing.assert_allclose(full, concat(parts, axis=1).data, rtol=0, atol=1e-12)


def test_conv_gradcheck_dilated_grouped():
    spec = Conv2dSpec(4, 6, kernel=3, padding=2, dilation=2, groups=2, bias=True)
    params = init_params(spec, seed=3)
    params["bias"] = Tensor(np.random.default_rng(1).normal(size=6), requires_grad=True)
    x0 = np.random.default_rng(2).normal(size=(1, 4, 6, 6))
    assert gradcheck(lambda x: probe(conv2d(x, spec, params)), x0).passed
    for name in ("weight", "bias"):
        x = Tensor(x0)

        def f(p, name=name):
            q = LayerParams(dict(params._store))
            q[name] = p
            return probe(conv2d(x, spec, q))

        assert gradcheck(f, params[name].data).passed, name


def test_conv_spec_validation():
    with pytest.raises(InvalidSpec):
        Conv2dSpec(4, 6, groups=4)
    with pytest.raises(InvalidSpec):
        conv2d_raw(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(ShapeMismatch):
        conv2d(Tensor(np.ones((1, 3, 4, 4))), Conv2dSpec(2, 2), init_params(Conv2dSpec(2, 2), 0))


# -- batch norm --------------------------------------------------------------------


def test_bn_train_normalizes():
    params = init_params(BatchNormSpec(3), 0)
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(2, 3, 4, 4)))
    y = batchnorm2d(x, params, "train", eps=0.0).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-10)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1.0) < 1e-8)


def test_bn_running_stats_update():
    params = init_params(BatchNormSpec(2), 0)
    x = np.random.default_rng(1).normal(size=(2, 2, 3, 3))
    batchnorm2d(Tensor(x), params, "train", momentum=0.1)
    np.testing.assert_allclose(params["running_mean"].data, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(params["running_var"].data, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    assert not params["running_mean"].requires_grad


def test_bn_eval_identity():
    params = init_params(BatchNormSpec(3), 0)
    x = np.random.default_rng(2).normal(size=(1, 3, 4, 4))
    y = batchnorm2d(Tensor(x), params, "eval", eps=1e-5).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(y, x, rtol=1e-5)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), init_params(BatchNormSpec(2), 0), "train")


@pytest.mark.parametrize("mode,tol", [("train", 1e-4), ("eval", 1e-4)])
def test_bn_gradcheck(mode, tol):
    params = init_params(BatchNormSpec(3), 0)
    params["weight"] = Tensor([0.5, 1.5, -1.0], requires_grad=True)
    x0 = np.random.default_rng(3).normal(size=(2, 3, 4, 4))
    assert gradcheck(lambda x: probe(batchnorm2d(x, params.clone(), mode)), x0, tol=tol).passed
    for name in ("weight", "bias"):

        def f(p, name=name):
            q = params.clone()
            q[name] = p
            return probe(batchnorm2d(Tensor(x0), q, mode))

        assert gradcheck(f, params[name].data, tol=tol).passed


# -- pooling -----------------------------------------------------------------------


def test_pool_identity_and_global_mean():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 4, 5)))
    assert np.array_equal(adaptive_avg_pool2d(x, (4, 5)).data, x.data)
    y = adaptive_avg_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 6.0]]]])), (1, 1))
    assert y.data.item() == 3.0


def test_pool_matches_brute_force_bins():
    ramp = np.arange(25.0).reshape(1, 1, 5, 5)
    y = adaptive_avg_pool2d(Tensor(ramp), (2, 2)).data[0, 0]
    expected = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            r0, r1 = (i * 5) // 2, -(-(i + 1) * 5 // 2)
            c0, c1 = (j * 5) // 2, -(-(j + 1) * 5 // 2)
            expected[i, j] = ramp[0, 0, r0:r1, c0:c1].mean()
    assert np.array_equal(y, expected)
    # hand check of the overlapping bin layout: rows [0,3) and [2,5)
    assert expected[0, 0] == np.mean([0, 1, 2, 5, 6, 7, 10, 11, 12])


def test_pool_invalid():
    with pytest.raises(InvalidSpec):
        adaptive_avg_pool2d(Tensor(np.ones((1, 1, 3, 3))), (4, 1))


def test_pool_gradcheck():
    x0 = np.random.default_rng(1).normal(size=(2, 2, 7, 5))
    assert gradcheck(lambda x: probe(adaptive_avg_pool2d(x, (3, 2))), x0).passed


# -- bilinear ----------------------------------------------------------------------


def test_bilinear_preserves_corners():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = bilinear_resize(Tensor(x), (4, 4)).data[0, 0]
    assert (y[0, 0], y[0, -1], y[-1, 0], y[-1, -1]) == (1.0, 2.0, 3.0, 4.0)


def test_bilinear_constant_and_identity():
    c = Tensor(np.full((1, 2, 3, 5), 0.7))
    np.testing.assert_allclose(bilinear_resize(c, (7, 4)).data, 0.7, rtol=1e-15)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 5)))
    assert np.array_equal(bilinear_resize(x, (3, 5)).data, x.data)


def test_bilinear_reproduces_linear_ramp():
    i, j = np.mgrid[0:3, 0:3]
    y = bilinear_resize(Tensor((i + 2 * j)[None, None].astype(float)), (5, 5)).data[0, 0]
    si, sj = np.mgrid[0:5, 0:5] / 2.0
    assert np.array_equal(y, si + 2 * sj)


def test_bilinear_single_output_is_center():
    x = Tensor(np.arange(3.0).reshape(1, 1, 3, 1))
    assert bilinear_resize(x, (1, 1)).data.item() == 1.0


def test_bilinear_stays_within_range():
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 6))
    y = bilinear_resize(Tensor(x), (9, 11)).data
    assert np.all(y.min(axis=(2, 3)) >= x.min(axis=(2, 3)) - 1e-12)
    assert np.all(y.max(axis=(2, 3)) <= x.max(axis=(2, 3)) + 1e-12)


def test_bilinear_gradcheck():
    x0 = np.random.default_rng(2).normal(size=(1, 2, 3, 4))
    assert gradcheck(lambda x: probe(bilinear_resize(x, (6, 5))), x0).passed
    assert gradcheck(lambda x: probe(bilinear_resize(x, (2, 2))), x0).passed


@pytest.mark.parametrize("h,w,out", [(5, 7, 1), (6, 7, 1), (4, 6, 2), (8, 8, 2)])
def test_pool_then_upsample_preserves_mean(h, w, out):
    if out == 2 and (h % 2 or w % 2):
        pytest.skip("uneven bins overlap")
    x = Tensor(np.random.default_rng(h * w).normal(size=(1, 3, h, w)))
    y = bilinear_resize(adaptive_avg_pool2d(x, (out, out)), (h, w))
    np.testing.assert_allclose(y.data.mean(axis=(2, 3)), x.data.mean(axis=(2, 3)), rtol=0, atol=1e-10)


# -- init --------------------------------------------------------------------------


def test_init_deterministic():
    spec = Conv2dSpec(8, 16, kernel=3)
    a, b = init_params(spec, 42), init_params(spec, 42)
    assert a["weight"].data.tobytes() == b["weight"].data.tobytes()
    assert np.array_equal(a["bias"].data, np.zeros(16))
    assert not np.array_equal(a["weight"].data, init_params(spec, 43)["weight"].data)


def test_bn_init():
    p = init_params(BatchNormSpec(5), 0)
    assert np.array_equal(p["weight"].data, np.ones(5))
    assert np.array_equal(p["bias"].data, np.zeros(5))
    assert p["weight"].requires_grad and not p["running_var"].requires_grad


def test_xavier_bound_and_sample_statistics():
    spec = Conv2dSpec(16, 16, kernel=3, groups=4)
    b = xavier_bound(spec)
    assert b == pytest.approx(np.sqrt(6.0 / (4 * 9 + 4 * 9)))
    w = init_params(Conv2dSpec(100, 100, kernel=1), 9)["weight"].data.reshape(-1)
    bw = xavier_bound(Conv2dSpec(100, 100, kernel=1))
    assert w.size == 10_000 and np.all(np.abs(w) <= bw)
    stderr = bw / np.sqrt(3) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * stderr
