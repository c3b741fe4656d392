"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node on the innermost active :class:`Tape` when at
least one operand requires gradients. ``Tape.backward`` replays the nodes in
reverse recording order, which is a valid reverse topological order.

Broadcasting is deliberately narrow: operands of a binary op must have equal
shapes, or one of them is a scalar, or one is a row vector ``(D,)``/``(1, D)``
against an ``(n, D)`` matrix. Anything else raises :class:`ShapeError`.
Use :func:`broadcast_to` when an expansion is intended.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from hcd import kernels

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)
_SQRT_FLOOR = 1e-12
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside the op's mathematical domain."""


class NumericError(FloatingPointError):
    """A computation produced non-finite or otherwise corrupt values."""


_TAPES: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class _Node:
    __slots__ = ("tape", "out", "inputs", "backward", "name")

    def __init__(self, tape, out, inputs, backward, name):
        self.tape = tape
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of primitive ops; use as a context manager.

    Example:
        >>> from hcd import diffcore as dc
        >>> x = dc.Tensor([1.0, 2.0], requires_grad=True)
        >>> with dc.Tape() as tape:
        ...     y = dc.sum(x * x)
        >>> tape.backward(y)
        >>> x.grad
        array([2., 4.])
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def op_names(self) -> list[str]:
        return [node.name for node in self._nodes]

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward, name: str) -> None:
        node = _Node(self, out, tuple(inputs), backward, name)
        out._node = node
        self._nodes.append(node)

    def clear(self) -> None:
        """Drop all recorded nodes; forward values stay valid."""
        for node in self._nodes:
            node.out._node = None
        self._nodes = []

    def backward(self, output: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``d output`` back through the recorded ops.

        Leaf tensors accumulate into ``.grad`` across calls; intermediate
        tensors have ``.grad`` overwritten with this pass's value.
        """
        if output._node is None or output._node.tape is not self:
            raise ValueError("output was not produced on this tape")
        if grad is None:
            if output.data.size != 1:
                raise ShapeError(f"implicit seed needs a scalar output, got shape {output.shape}")
            grad = np.ones_like(output.data)
        pending = {id(output): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


class Tensor:
    """Dense real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward, name: str) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward, name)
    return out


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor._wrap(x.data, False)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    for mat, row in ((sa, sb), (sb, sa)):
        if len(mat) == 2 and (row == (mat[1],) or row == (1, mat[1])):
            return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.sum(axis=0).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# elementwise unary


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0.0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so the output stays strictly inside (0, 1)."""
    v = x.data
    e = np.exp(-np.abs(v))
    hi, lo = 1.0 / (1.0 + e), e / (1.0 + e)
    out = np.clip(np.where(v >= 0.0, hi, lo), _SIGMOID_LO, _SIGMOID_HI)
    # 1 - out without cancellation, so the slope stays accurate when saturated
    comp = np.where(v >= 0.0, lo, hi)
    return _result(out, (x,), lambda g: (g * out * comp,), "sigmoid")


def log2(x: Tensor) -> Tensor:
    if np.any(~(x.data > 0.0)):
        raise DomainError("log2 of non-positive input")
    return _result(np.log2(x.data), (x,), lambda g: (g / (x.data * _LN2),), "log2")


def log(x: Tensor) -> Tensor:
    if np.any(~(x.data > 0.0)):
        raise DomainError("log of non-positive input")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g / (2.0 * np.maximum(out, _SQRT_FLOOR)),), "sqrt")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "sigmoid": sigmoid, "log2": log2, "exp": exp,
    "sqrt": sqrt, "square": square,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name; see :data:`ELEMENTWISE`."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(x: Tensor, axis) -> Optional[tuple]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not axes:
        raise ShapeError("empty axis")
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")
        out.append(ax % x.ndim)
    return tuple(sorted(set(out)))


def _expand_back(g: np.ndarray, shape: tuple, axes: Optional[tuple]) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, shape).copy()
    kept = list(shape)
    for ax in axes:
        kept[ax] = 1
    return np.broadcast_to(g.reshape(kept), shape).copy()


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(x, axis)
    out = np.asarray(x.data.sum(axis=axes))
    return _result(out, (x,), lambda g: (_expand_back(g, x.shape, axes),), "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(x, axis)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axes))
    return _result(out, (x,), lambda g: (_expand_back(g, x.shape, axes) / count,), "mean")


def batch_mean(x: Tensor) -> Tensor:
    """Mean over the leading (batch) axis."""
    return mean(x, axis=0)


def batch_var(x: Tensor) -> Tensor:
    """Population variance (divisor n) over the leading axis."""
    if x.ndim == 0 or x.shape[0] == 0:
        raise ShapeError("batch_var needs a non-empty batch axis")
    n = x.shape[0]
    centered = x.data - x.data.mean(axis=0)
    out = (centered * centered).mean(axis=0)
    return _result(out, (x,), lambda g: (g * centered * (2.0 / n),), "batch_var")


def trace(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"trace needs a square matrix, got {x.shape}")
    eye = np.eye(x.shape[0])
    return _result(np.asarray(np.trace(x.data)), (x,), lambda g: (g * eye,), "trace")


def frobenius_sq(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data * x.data))
    return _result(out, (x,), lambda g: (2.0 * g * x.data,), "frobenius_sq")


REDUCTIONS = {
    "sum": sum, "mean": mean, "batch_mean": batch_mean, "batch_var": batch_var,
    "trace": trace, "frobenius_sq": frobenius_sq,
}


def reduction(op: str, x: Tensor, axis=None) -> Tensor:
    try:
        fn = REDUCTIONS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    if op in ("sum", "mean"):
        return fn(x, axis)
    return fn(x)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit expansion along size-1 (or missing leading) axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim

    def backward(g):
        red = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and red.shape[i] != 1)
        if axes:
            red = red.sum(axis=axes, keepdims=True)
        return (red.reshape(x.shape),)

    return _result(out, (x,), backward, "broadcast_to")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(out, (x,), backward, "take")


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul of ``(B, m, k)`` by ``(B, k, n)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _result(a.data @ b.data, (a, b), backward, "bmm")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input, ``(C_out, C_in, kh, kw)`` weight."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    n, _, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(co, -1)
    flat = cols @ wmat.T
    if b is not None:
        flat = flat + b.data
    out = np.ascontiguousarray(flat.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = kernels.col2im(g2 @ wmat, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, backward, "conv2d")


def pairwise_sqdist(z: Tensor) -> Tensor:
    """``D[i, j] = ||z_i - z_j||^2`` for the rows of an ``(n, D)`` batch."""
    if z.ndim != 2:
        raise ShapeError(f"pairwise_sqdist needs (n, D), got {z.shape}")
    out = kernels.pairwise_sqdist(z.data)

    def backward(g):
        s = g + g.T
        return (2.0 * (s.sum(axis=1)[:, None] * z.data - s @ z.data),)

    return _result(out, (z,), backward, "pairwise_sqdist")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def backward(g):
        probs = expd / denom
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _result(out, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference certification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    rel_errors: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    failed_index: Optional[int] = None
    message: str = ""


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``; the check passes iff the maximum is
    below ``tol``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    empty = np.zeros(0)
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, math.inf, empty, empty, empty, None, "f is non-finite at x")
    tape.backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.copy()
    tape.clear()

    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(base.size):
        vals = []
        for step in (h, -h):
            shifted = flat.copy()
            shifted[i] += step
            v = f(Tensor(shifted.reshape(base.shape))).data
            if not np.isfinite(v).all():
                return GradCheckReport(False, math.inf, empty, analytic, numeric.reshape(base.shape), i,
                                       f"f is non-finite at coordinate {i}")
            vals.append(float(v.reshape(-1)[0]))
        numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
    numeric = numeric.reshape(base.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_err = float(rel.reshape(-1)[worst]) if rel.size else 0.0
    passed = max_err < tol
    msg = "" if passed else f"max relative error {max_err:.3e} at coordinate {worst}"
    return GradCheckReport(passed, max_err, rel, analytic, numeric, None if passed else worst, msg)
