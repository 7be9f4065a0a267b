import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loglinear_lab import autodiff as ad
from loglinear_lab.autodiff import Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(x, requires_grad=True)


def grads_of(fn, *xs):
    ts = [leaf(x) for x in xs]
    with ad.Tape():
        ad.backward(fn(*ts))
    return [t.grad for t in ts]


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_projector():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), a).data, a)
    out = ad.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0], [7.0]]).data
    np.testing.assert_array_equal(out, [[5.0], [0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(a, b).data, ref, atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(np.ones((3, 4)), np.ones((3, 2)))


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ga, gb = grads_of(lambda x, y: (x @ y).sum(), a, b)
    g = np.ones((3, 2))
    np.testing.assert_allclose(ga, g @ b.T)
    np.testing.assert_allclose(gb, a.T @ g)


# ---------------------------------------------------------------- softplus


def test_softplus_values():
    assert ad.softplus_np(np.array(0.0)) == pytest.approx(math.log(2), abs=1e-12)
    # ln(1 + e^0.54) at 40 digits is 0.99916273627089...
    ref = float(mpmath.log(1 + mpmath.exp(mpmath.mpf("0.54"))))
    assert abs(ad.softplus_np(np.array(0.54)) - ref) < 1e-15
    assert abs(ad.softplus_np(np.array(0.54)) - 1.0) < 1e-3
    ref = float(mpmath.log(1 + mpmath.exp(mpmath.mpf(40))))
    assert abs(ad.softplus_np(np.array(40.0)) - ref) < 1e-12
    assert ad.softplus_np(np.array(1000.0)) == 1000.0


@given(arrays(np.float64, 6, elements=st.floats(-700, 700)))
def test_softplus_bounds(x):
    y = ad.softplus_np(x)
    assert np.all(y >= np.maximum(x, 0.0))


def test_softplus_minus_x_decreases_to_zero():
    x = np.linspace(0, 60, 400)
    gap = ad.softplus_np(x) - x
    assert np.all(np.diff(gap) <= 0)
    assert gap[-1] < 1e-25


def test_softplus_grad_at_zero_is_half():
    (g,) = grads_of(lambda x: ad.softplus(x).sum(), np.zeros(5))
    np.testing.assert_allclose(g, 0.5)


# ---------------------------------------------------------------- softmax


def test_softmax_values():
    np.testing.assert_allclose(ad.softmax_np(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax_np(np.array([0.0, math.log(2)])), [1 / 3, 2 / 3], atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    p = ad.softmax_np(x, axis=1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax_np(x + c, axis=1), p, atol=1e-12)


# ---------------------------------------------------------------- gelu


def test_gelu_values():
    assert ad.gelu_np(np.array(0.0)) == 0.0
    assert abs(ad.gelu_np(np.array(10.0)) - 10.0) < 1e-6
    # exact-erf form, not the tanh approximation
    ref = float(0.5 * mpmath.mpf(1) * (1 + mpmath.erf(1 / mpmath.sqrt(2))))
    assert abs(ad.gelu_np(np.array(1.0)) - ref) < 1e-15


@pytest.mark.parametrize("x", [-1.0, 0.3, 2.0])
def test_gelu_grad_matches_finite_differences(x):
    (g,) = grads_of(lambda t: ad.gelu(t).sum(), np.array([x]))
    eps = 1e-5
    fd = (ad.gelu_np(np.array(x + eps)) - ad.gelu_np(np.array(x - eps))) / (2 * eps)
    assert abs(g[0] - fd) < 1e-6


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_is_log_v():
    loss = ad.cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]), np.ones(3, bool))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_confident_correct_is_zero():
    logits = np.zeros((2, 5))
    logits[0, 2] = logits[1, 4] = 30.0
    assert ad.cross_entropy(logits, np.array([2, 4]), np.ones(2, bool)).item() < 1e-12


def test_cross_entropy_matches_high_precision():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5)) * 3
    targets = np.array([4, 0, 2])
    mask = np.array([True, False, True])
    with mpmath.workdps(40):
        terms = []
        for t in np.flatnonzero(mask):
            row = [mpmath.mpf(float(v)) for v in logits[t]]
            lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in row))
            terms.append(lse - row[targets[t]])
        ref = float(mpmath.fsum(terms) / len(terms))
    assert abs(ad.cross_entropy(logits, targets, mask).item() - ref) < 1e-10


def test_cross_entropy_backward_is_softmax_minus_onehot_over_count():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 6))
    targets = np.array([1, 2, 3, 4])
    mask = np.array([1, 1, 0, 1], bool)
    (g,) = grads_of(lambda x: ad.cross_entropy(x, targets, mask), logits)
    expected = ad.softmax_np(logits, axis=-1)
    expected[np.arange(4), targets] -= 1
    expected[~mask] = 0
    np.testing.assert_allclose(g, expected / 3, atol=1e-15)


def test_cross_entropy_empty_mask():
    with pytest.raises(ValueError, match="no supervised positions"):
        ad.cross_entropy(np.zeros((2, 3)), np.zeros(2, int), np.zeros(2, bool))


@given(arrays(np.float64, (4, 6), elements=finite))
def test_cross_entropy_nonnegative(logits):
    assert ad.cross_entropy(logits, np.arange(4), np.ones(4, bool)).item() >= 0


# ---------------------------------------------------------------- backward


def test_identity_grad():
    (g,) = grads_of(lambda x: x.sum(), np.array([3.0]))
    np.testing.assert_array_equal(g, [1.0])


def test_shared_subexpression_accumulates():
    (g,) = grads_of(lambda x: (x + x).sum(), np.array([1.5, -2.0]))
    np.testing.assert_array_equal(g, [2.0, 2.0])
    (g,) = grads_of(lambda x: (x * x + x).sum(), np.array([3.0]))
    np.testing.assert_array_equal(g, [7.0])


def test_backward_rejects_non_scalar_root():
    x = leaf(np.ones(3))
    with ad.Tape():
        y = x * 2
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(y)


def test_backward_rejects_root_off_tape():
    x = leaf(np.ones(3))
    y = (x * 2).sum()
    with ad.Tape():
        with pytest.raises(RuntimeError, match="not recorded"):
            ad.backward(y)


def test_backward_resets_tape_unless_retained():
    x = leaf(np.ones(2))
    with ad.Tape() as tape:
        y = (x * 3).sum()
        ad.backward(y, retain=True)
        assert len(tape) == 2
        ad.backward(y)
        assert len(tape) == 0
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_tape_order_is_topological():
    x = leaf(np.ones(2))
    with ad.Tape() as tape:
        y = ad.exp(x * 2)
        z = (y + x).sum()
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp._node is None or id(inp) in seen
        seen.add(id(node.output))
    assert tape.nodes[-1].output is z


def test_no_recording_without_grad():
    with ad.Tape() as tape:
        ad.exp(Tensor(np.ones(3))) * 2
    assert len(tape) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises_with_op_and_shape():
    with pytest.raises(ad.NonFiniteError, match=r"log.*\(2,\)"):
        ad.log(np.array([1.0, -1.0]))
    with pytest.raises(ad.NonFiniteError) as info:
        ad.exp(np.full((2, 3), 1000.0))
    assert info.value.op == "exp" and info.value.shape == (2, 3)


# ---------------------------------------------------------------- per-op gradient checks

UNARY = {
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(x * x + 0.5),
    "softplus": ad.softplus,
    "gelu": ad.gelu,
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "power": lambda x: (x * x + 1.0) ** 1.5,
    "neg_div": lambda x: -(1.0 / (x * x + 1.0)),
    "sum_axis": lambda x: x.sum(axis=0, keepdims=True),
    "mean": lambda x: x.mean(axis=1),
    "reshape_transpose": lambda x: x.reshape(4, 3).transpose(),
    "getitem": lambda x: x[1:, ::2],
    "causal_shift": lambda x: ad.causal_shift(x.reshape(1, 3, 4), 2),
    "stack_concat": lambda x: ad.concat([ad.stack([x, x * 2]), ad.stack([x, x])], axis=1),
    "einsum": lambda x: ad.einsum("ij,kj->ik", x, x),
    "layer_norm": lambda x: ad.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradcheck(name):
    fn = UNARY[name]
    weights = np.random.default_rng(99).normal(size=64)
    for seed in range(20):
        x = leaf(np.random.default_rng(seed).normal(size=(3, 4)))

        def f():
            y = fn(x)
            return (y * weights[: y.size].reshape(y.shape)).sum()

        rep = ad.grad_check(f, {"x": x})
        assert rep.passed, f"{name} seed {seed}: {rep}"


BINARY = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:, :1],
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.transpose(),
    "batched_matmul": lambda a, b: a.reshape(3, 1, 4) @ b.reshape(3, 4, 1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradcheck(name):
    fn = BINARY[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        w = rng.normal(size=fn(a, b).shape)
        rep = ad.grad_check(lambda: (fn(a, b) * w).sum(), {"a": a, "b": b})
        assert rep.passed, f"{name} seed {seed}: {rep}"


def test_embedding_gradcheck():
    rng = np.random.default_rng(0)
    weight = leaf(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    w = rng.normal(size=(2, 3, 3))
    assert ad.grad_check(lambda: (ad.embedding(weight, ids) * w).sum(), {"w": weight}).passed


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(0)
    logits = leaf(rng.normal(size=(2, 3, 5)))
    targets = rng.integers(0, 5, (2, 3))
    mask = np.array([[1, 0, 1], [1, 1, 0]], bool)
    assert ad.grad_check(lambda: ad.cross_entropy(logits, targets, mask), {"l": logits}).passed


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_quadratic():
    theta = leaf(np.random.default_rng(0).normal(size=7))
    rep = ad.grad_check(lambda: (theta * theta).sum(), {"theta": theta})
    assert rep.passed and rep.max_error < 1e-9


def test_grad_check_detects_corrupted_rule(monkeypatch):
    def bad_exp(a):
        a = ad.as_tensor(a)
        out = np.exp(a.data)
        return ad._emit("exp", out, (a,), lambda g: (1.1 * g * out,))

    theta = leaf(np.array([0.2, -0.4]))
    rep = ad.grad_check(lambda: bad_exp(theta).sum(), {"theta": theta})
    assert not rep.passed
    assert "FAIL" in str(rep)


def test_grad_check_rejects_nondeterministic_f():
    theta = leaf(np.ones(2))
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError, match="not deterministic"):
        ad.grad_check(lambda: (theta * rng.normal()).sum(), {"theta": theta})


def test_relative_error_floor():
    err = ad.relative_error(np.array([0.0, 1.0]), np.array([1e-9, 1.0 + 1e-6]))
    assert err[0] == pytest.approx(1e-3)
    assert err[1] == pytest.approx(1e-6, rel=1e-3)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_tensor_invariants(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, rng.integers(1, 4)))
    x = leaf(rng.normal(size=shape))
    assert int(np.prod(x.shape)) == x.data.size
    with ad.Tape():
        ad.backward((ad.softplus(x) * 2).sum())
    assert x.grad.shape == x.shape
