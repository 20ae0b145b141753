import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gald import gtf
from gald.errors import CorruptFile, DomainError, NotScalar, ShapeMismatch
from gald.gradcheck import gradcheck
from gald.tensor import (
    Tape,
    Tensor,
    concat,
    elementwise,
    exp,
    log,
    matmul,
    mul,
    no_grad,
    ones_like,
    reduce,
    relu,
    sigmoid,
    softmax,
    split,
)


def weighted(t, seed=0):
    """Scalar probe sum(t * r) with fixed random weights r."""
    r = np.random.default_rng(seed).normal(size=t.shape)
    return (t * r).sum()


# -- elementwise ---------------------------------------------------------------


def test_sigmoid_of_zero_is_half():
    assert sigmoid(Tensor(0.0)).data == 0.5


def test_mul_by_ones_is_identity():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    assert np.array_equal(mul(x, ones_like(x)).data, x.data)


def test_mul_grad_matches_finite_difference():
    a = Tensor(2.0, requires_grad=True)
    b = Tensor(3.0)
    mul(a, b).backward()
    assert a.grad == 3.0
    eps = 1e-6
    num = ((2.0 + eps) * 3.0 - (2.0 - eps) * 3.0) / (2 * eps)
    assert abs(a.grad - num) / abs(num) < 1e-8


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeMismatch):
        elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        log(Tensor([-2.0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_raises():
    with pytest.raises(DomainError):
        exp(Tensor([1000.0]))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("shapes", [((2, 3, 4), (2, 3, 4)), ((2, 1, 4), (1, 3, 1)), ((3, 4), (4,))])
def test_broadcast_grad_equals_materialized_oracle(op, shapes):
    rng = np.random.default_rng(7)
    a0 = rng.uniform(0.5, 2.0, shapes[0])
    b0 = rng.uniform(0.5, 2.0, shapes[1])
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    weighted(elementwise(op, a, b)).backward()

    full = np.broadcast_shapes(a0.shape, b0.shape)
    am = Tensor(np.broadcast_to(a0, full).copy(), requires_grad=True)
    bm = Tensor(np.broadcast_to(b0, full).copy(), requires_grad=True)
    weighted(elementwise(op, am, bm)).backward()

    def fold(g, shape):
        lead = g.ndim - len(shape)
        g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, s in enumerate(shape) if s == 1)
        return g.sum(axis=axes, keepdims=True) if axes else g

    np.testing.assert_allclose(a.grad, fold(am.grad, a0.shape), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.grad, fold(bm.grad, b0.shape), rtol=1e-12, atol=1e-12)


# -- matmul ----------------------------------------------------------------------


def test_matmul_identity_and_hand_sum():
    x = Tensor(np.arange(9.0).reshape(3, 3))
    assert np.array_equal(matmul(Tensor(np.eye(3)), x).data, x.data)
    y = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(y.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(3)
    a0, b0 = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    b = Tensor(b0)
    assert gradcheck(lambda a: weighted(matmul(a, b)), a0, tol=1e-6).passed
    a = Tensor(a0)
    assert gradcheck(lambda b: weighted(matmul(a, b)), b0, tol=1e-6).passed


# -- softmax ---------------------------------------------------------------------


def test_softmax_constant_row_is_uniform():
    np.testing.assert_allclose(softmax(Tensor([4.0, 4.0, 4.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_analytic_pair():
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_jacobian_gradcheck():
    x0 = np.random.default_rng(5).normal(size=6)
    assert gradcheck(lambda x: weighted(softmax(x, 0)), x0, tol=1e-6).passed


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        softmax(Tensor(np.ones((2, 2))), axis=2)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12),
    st.integers(1, 4),
)
def test_softmax_rows_sum_to_one(values, rows):
    x = np.array(values * rows).reshape(rows, len(values))
    y = softmax(Tensor(x), axis=1).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((y >= 0) & (y <= 1))


# -- reductions ------------------------------------------------------------------


def test_reduce_mean_hand_value():
    assert reduce(Tensor([1.0, 2.0, 3.0, 6.0]), "mean", [0]).data == 3.0


def test_reduce_over_no_axes_is_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert reduce(x, "sum", []) is x


def test_max_backward_tie_goes_to_lowest_index():
    x = Tensor([2.0, 5.0, 5.0], requires_grad=True)
    reduce(x, "max", [0]).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_max_tie_break_over_multiple_axes():
    x0 = np.zeros((2, 2, 3))
    x0[1, 0, 1] = x0[0, 1, 2] = 4.0
    x = Tensor(x0, requires_grad=True)
    reduce(x, "max", [0, 2]).sum().backward()
    # per kept axis-1 slice, flat order over (axis0, axis2): first maximum wins
    expected = np.zeros_like(x0)
    expected[1, 0, 1] = 1.0
    expected[0, 1, 2] = 1.0
    assert np.array_equal(x.grad, expected)


def test_reduce_repeated_axes_rejected():
    with pytest.raises(ValueError):
        reduce(Tensor(np.ones((2, 2))), "sum", [0, 0])


def test_reduce_keepdims_shape():
    x = Tensor(np.ones((2, 3, 4)))
    assert reduce(x, "sum", [1], keepdims=True).shape == (2, 1, 4)
    assert reduce(x, "mean", [0, 2]).shape == (3,)


# -- concat ------------------------------------------------------------------------


def test_concat_shapes_and_identity():
    a, b = Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.ones((1, 3, 4, 4)))
    assert concat([a, b], axis=1).shape == (1, 5, 4, 4)
    assert concat([a], axis=1) is a


def test_concat_slice_round_trip():
    rng = np.random.default_rng(11)
    a, b = Tensor(rng.normal(size=(2, 3, 5))), Tensor(rng.normal(size=(2, 4, 5)))
    pa, pb = split(concat([a, b], axis=1), [3, 4], axis=1)
    assert np.array_equal(pa.data, a.data) and np.array_equal(pb.data, b.data)


def test_concat_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        concat([Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 4)))], axis=1)


# -- backward and tape -------------------------------------------------------------


def test_backward_of_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_fan_out_accumulates():
    x = Tensor(1.5, requires_grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_backward_requires_scalar():
    with pytest.raises(NotScalar):
        Tensor(np.ones(3), requires_grad=True).sum(axes=[]).backward()


def test_tape_is_topological_and_grads_populated():
    x = Tensor(np.ones(4), requires_grad=True)
    h = sigmoid(x * 2.0)
    loss = (h * h + relu(h)).sum()
    tape = Tape.from_root(loss)
    seen = set()
    for out, node in tape.entries:
        for inp in node.inputs:
            assert inp._node is None or id(inp) in seen
        seen.add(id(out))
    loss.backward()
    for out, node in tape.entries:
        for inp in node.inputs:
            if inp.requires_grad:
                assert inp.grad is not None and inp.grad.shape == inp.shape


def test_shared_subexpression_matches_duplicated_tree():
    x0 = np.random.default_rng(2).normal(size=5)
    x = Tensor(x0, requires_grad=True)
    s = sigmoid(x * 3.0)
    (s * s + exp(s)).sum().backward()
    dag = x.grad

    y = Tensor(x0, requires_grad=True)
    s1, s2, s3 = sigmoid(y * 3.0), sigmoid(y * 3.0), sigmoid(y * 3.0)
    (s1 * s2 + exp(s3)).sum().backward()
    np.testing.assert_allclose(dag, y.grad, rtol=1e-14, atol=0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = sigmoid(x)
    assert y._node is None and not y.requires_grad


# -- gradcheck ---------------------------------------------------------------------


def test_gradcheck_of_sum_is_exact():
    rep = gradcheck(lambda x: x.sum(), np.random.default_rng(0).normal(size=(3, 4)))
    assert rep.max_rel_err < 1e-10


def test_gradcheck_sigmoid_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    sigmoid(x).sum().backward()
    assert np.array_equal(x.grad, np.full(4, 0.25))
    assert gradcheck(lambda t: sigmoid(t).sum(), np.zeros(4)).passed


def test_gradcheck_detects_wrong_backward(monkeypatch):
    from gald import tensor as T

    fwd, _ = T.UNARY["sigmoid"]
    monkeypatch.setitem(T.UNARY, "sigmoid", (fwd, lambda x, y, g: 2 * g * y * (1 - y)))
    rep = gradcheck(lambda t: sigmoid(t).sum(), np.zeros(3))
    assert not rep.passed and rep.failures


DIFFERENTIABLE = {
    "add": lambda t, o: t + o,
    "sub": lambda t, o: t - o,
    "mul": lambda t, o: t * o,
    "div": lambda t, o: t / o,
    "sigmoid": lambda t, o: sigmoid(t),
    "relu": lambda t, o: relu(t),
    "exp": lambda t, o: exp(t),
    "log": lambda t, o: log(t * t + 0.5),
    "matmul": lambda t, o: matmul(t, o.transpose()),
    "softmax": lambda t, o: softmax(t, axis=1),
    "sum": lambda t, o: reduce(t, "sum", [1], keepdims=True) * o,
    "mean": lambda t, o: reduce(t, "mean", [0]),
    "max": lambda t, o: reduce(t, "max", [1]),
    "concat": lambda t, o: concat([t, o * t], axis=0),
    "slice": lambda t, o: t[1:, ::2],
    "reshape": lambda t, o: t.reshape(4, 3),
}


@pytest.mark.parametrize("name", sorted(DIFFERENTIABLE))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_op_passes_gradcheck(name, seed):
    rng = np.random.default_rng(100 + seed)
    x0 = rng.normal(size=(3, 4))
    if name == "relu":
        x0 = np.where(np.abs(x0) < 0.05, 0.3, x0)  # keep probes off the kink
    other = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
    f = DIFFERENTIABLE[name]
    rep = gradcheck(lambda t: weighted(f(t, other), seed), x0, eps=1e-5, tol=1e-4)
    assert rep.passed, rep.failures[:3]


# -- GTF files ---------------------------------------------------------------------


def test_gtf_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    gtf.save_gtf(tmp_path / "x.gtf", x)
    raw = (tmp_path / "x.gtf").read_bytes()
    assert raw[:4] == b"GTF1"
    assert int.from_bytes(raw[4:8], "little") == 3
    back = gtf.load_gtf(tmp_path / "x.gtf")
    assert back.dtype == np.float64 and back.shape == x.shape
    np.testing.assert_array_equal(back, x.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("mutate", ["magic", "truncate", "extra"])
def test_gtf_corrupt(tmp_path, mutate):
    raw = gtf.encode(np.ones((2, 2)))
    raw = {"magic": b"XTF1" + raw[4:], "truncate": raw[:-3], "extra": raw + b"\0\0\0\0"}[mutate]
    (tmp_path / "bad.gtf").write_bytes(raw)
    with pytest.raises(CorruptFile):
        gtf.load_gtf(tmp_path / "bad.gtf")
