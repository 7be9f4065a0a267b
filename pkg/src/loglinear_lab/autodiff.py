"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient. Outside a tape every op runs eagerly with no
bookkeeping, which is what evaluation code uses.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape():
...     y = (x * x).sum()
...     backward(y)
>>> x.grad
array([2., 4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, shape: tuple[int, ...]):
        super().__init__(f"{op} produced non-finite values (output shape {shape})")
        self.op = op
        self.shape = shape


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------- tape


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so the list is already in topological
    order and :func:`backward` simply walks it in reverse.
    """

    nodes: list[_Node] = field(default_factory=list)

    def record(self, node: _Node) -> None:
        node.output._node = node
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op, data.shape)
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(_Node(op, inputs, out, bw))
    return out


def backward(root: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    The tape is reset afterwards unless ``retain`` is set.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None or root._node is None or not any(n is root._node for n in reversed(tape.nodes)):
        raise RuntimeError("root was not recorded on the active tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    if not retain:
        tape.reset()


# ---------------------------------------------------------------- helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b) -> tuple[Tensor, Tensor]:
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _emit("power", a.data**p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _emit("softplus", softplus_np(a.data), (a,), lambda g: (g * sigmoid_np(a.data),))


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _emit("gelu", x * cdf, (a,), bw)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    out = softmax_np(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): fold the leading dims into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],)), (a, b), bw_flat)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bw)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum without ellipsis or repeated indices.

    Every index of an operand must also appear in the output or in another
    operand, so each operand gradient is itself a plain einsum.
    """
    ops = tuple(as_tensor(o) for o in operands)
    if "->" not in subscripts or "." in subscripts:
        raise ValueError(f"einsum needs explicit output and no ellipsis: {subscripts!r}")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError(f"einsum got {len(ops)} operands for {subscripts!r}")
    for i, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand {s!r}")
        others = set(out_sub).union(*(in_subs[j] for j in range(len(in_subs)) if j != i))
        if not set(s) <= others:
            raise ValueError(f"index of {s!r} appears nowhere else in {subscripts!r}")

    def bw(g):
        grads = []
        for i, t in enumerate(ops):
            if not t.requires_grad:
                grads.append(None)
                continue
            rest = [in_subs[j] for j in range(len(ops)) if j != i]
            spec = ",".join([out_sub, *rest]) + "->" + in_subs[i]
            grads.append(np.einsum(spec, g, *(ops[j].data for j in range(len(ops)) if j != i), optimize=True))
        return grads

    data = np.einsum(subscripts, *(o.data for o in ops), optimize=True)
    return _emit("einsum", np.asarray(data, dtype=np.float64), ops, bw)


# ---------------------------------------------------------------- reductions and shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(a.data[index]), (a,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _emit("embedding", weight.data[ids], (weight,), bw)


def causal_shift(a, shift: int, axis: int = 1) -> Tensor:
    """out[..., t, ...] = a[..., t - shift, ...] along ``axis``, zero-filled."""
    a = as_tensor(a)
    n = a.shape[axis]
    if shift == 0:
        return a
    if shift >= n:
        return Tensor._wrap(np.zeros_like(a.data))

    def moved(x, src, dst):
        out = np.zeros_like(x)
        idx_src = [slice(None)] * x.ndim
        idx_dst = [slice(None)] * x.ndim
        idx_src[axis], idx_dst[axis] = src, dst
        out[tuple(idx_dst)] = x[tuple(idx_src)]
        return out

    def bw(g):
        return (moved(g, slice(shift, None), slice(0, n - shift)),)

    return _emit("causal_shift", moved(a.data, slice(0, n - shift), slice(shift, None)), (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _emit("stack", np.stack([t.data for t in ts], axis=axis), ts, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------- composite layers


def layer_norm(x: Tensor, scale: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis; learned scale, no bias."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * scale


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean masked token cross-entropy over the last (vocab) axis."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape} vs mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no supervised positions")
    vocab = logits.shape[-1]
    if (targets[mask] < 0).any() or (targets[mask] >= vocab).any():
        raise ValueError(f"masked target outside [0, {vocab})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(x, safe_t[..., None], axis=-1)[..., 0]
    loss = float(((lse - picked) * mask).sum() / count)

    def bw(g):
        p = np.exp(x - lse[..., None])
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], -1) - 1.0, -1)
        return (p * (mask[..., None] * (float(g) / count)),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    eps: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_error:.3e} (tol {self.tol:g}, eps {self.eps:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is ~0 from turning
    finite-difference noise into huge ratios.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` against central differences."""
    first, second = f().item(), f().item()
    if first != second:
        raise RuntimeError(f"f is not deterministic: {first!r} != {second!r}")
    for p in params.values():
        p.grad = None
    with Tape():
        backward(f())
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
        errors[name] = float(relative_error(analytic, numeric, floor).max()) if p.size else 0.0
    return GradCheckReport(errors, tol, eps)
