"""Dense tensors with tape-recorded reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it; a
single ``tape.backward(loss)`` then replays the tape in reverse and leaves
exact analytic gradients in ``.grad`` of every participating leaf tensor.
Outside a tape nothing is recorded, which is how evaluation runs.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = F.sum(F.matmul(x, w))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every method routes through the op registry
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("elementwise_mul", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return apply_primitive("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    @property
    def T(self):
        return apply_primitive("transpose", [self])


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    output: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, output: Tensor, inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(output, inputs, backward))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad``.

        Tensors in ``wrt`` always end up with a gradient array, all zeros if
        the loss does not depend on them.
        """
        if loss.value.size != 1:
            raise ShapeError("backward", loss.shape, ())
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
        for t in wrt:
            if t.grad is None:
                t.grad = np.zeros_like(t.value)


# ---------------------------------------------------------------------------
# op registry

OPS: dict[str, Callable] = {}

# when set, dropout ignores its mode flag and acts as identity (gradient checks)
_force_eval = threading.local()


class force_eval:
    """Context manager that turns every dropout into the identity."""

    def __enter__(self):
        self._prev = getattr(_force_eval, "on", False)
        _force_eval.on = True
        return self

    def __exit__(self, *exc):
        _force_eval.on = self._prev


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def primitive(name: str):
    """Register ``fn(*values, **attrs) -> (out_value, backward)`` as an op."""

    def deco(fn):
        def op(*inputs, **attrs):
            like = next((t for t in inputs if isinstance(t, Tensor)), None)
            tensors = tuple(_as_tensor(t, like) for t in inputs)
            out_value, backward = fn(*(t.value for t in tensors), **attrs)
            tape = active_tape()
            needs = tape is not None and any(t.requires_grad for t in tensors)
            out = Tensor(out_value, requires_grad=needs)
            if needs:
                tape.record(out, tensors, backward)
            return out

        op.__name__ = name
        op.__doc__ = fn.__doc__
        OPS[name] = op
        return op

    return deco


def apply_primitive(op_name: str, inputs: Sequence, **attrs) -> Tensor:
    try:
        op = OPS[op_name]
    except KeyError:
        raise ValueError(f"unknown op {op_name!r}") from None
    return op(*inputs, **attrs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


@primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)

    return out, backward


@primitive("add")
def _add(a, b):
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a + b, backward


@primitive("sub")
def _sub(a, b):
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return a - b, backward


@primitive("scale")
def _scale(a, factor: float):
    return a * factor, lambda g: (g * factor,)


@primitive("elementwise_mul")
def _elementwise_mul(a, b):
    _broadcast_shape("elementwise_mul", a, b)

    def backward(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return a * b, backward


@primitive("transpose")
def _transpose(a, axes: tuple | None = None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        return _swap(a), lambda g: (_swap(g),)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = np.argsort(axes)
    return np.transpose(a, axes), lambda g: (np.transpose(g, inverse),)


@primitive("reshape")
def _reshape(a, shape: tuple):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return out, lambda g: (g.reshape(a.shape),)


def _concat(op: str, axis: int, *xs):
    if not xs:
        raise ValueError(f"{op}: needs at least one input")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(x.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(op, ref, x.shape)
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return np.concatenate(xs, axis=axis), backward


@primitive("concat_rows")
def _concat_rows(*xs):
    return _concat("concat_rows", -2, *xs)


@primitive("concat_cols")
def _concat_cols(*xs):
    return _concat("concat_cols", -1, *xs)


@primitive("mean_rows")
def _mean_rows(a):
    """Mean over the row axis (-2); the row axis is dropped."""
    if a.ndim < 2:
        raise ShapeError("mean_rows", a.shape)
    n = a.shape[-2]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / n, a.shape).copy(),)

    return a.mean(axis=-2), backward


@primitive("sum")
def _sum(a, axis=None, keepdims: bool = False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, backward


@primitive("row_slice")
def _row_slice(a, rows):
    """Select rows along axis -2 by slice, integer, or index array."""
    if a.ndim < 2:
        raise ShapeError("row_slice", a.shape)
    key = (Ellipsis, rows, slice(None))
    try:
        out = a[key]
    except IndexError:
        raise ShapeError("row_slice", a.shape, (rows,)) from None

    def backward(g):
        full = np.zeros_like(a)
        if isinstance(rows, (slice, int, np.integer)):
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return out.copy(), backward


@primitive("embedding_gather")
def _embedding_gather(table, indices=None):
    """Rows of ``table`` at integer ``indices`` (an attr, any shape)."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding_gather", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding_gather", table.shape, idx.shape)
    out = table[idx]

    def backward(g):
        full = np.zeros_like(table)
        kernels.scatter_add_rows(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return out, backward


@dataclass
class SparseMatrix:
    """Constant CSR matrix; a left operand of ``sparse_matmul``."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple
    _t: "SparseMatrix | None" = field(default=None, repr=False)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(np.cumsum(indptr), cols, vals, tuple(shape))

    def transpose(self) -> "SparseMatrix":
        if self._t is None:
            rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
            self._t = SparseMatrix.from_coo(self.indices, rows, self.data, self.shape[::-1])
        return self._t

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.data)
        return out


def sparse_matmul(sp: SparseMatrix, dense) -> Tensor:
    """``sp @ dense`` for a constant sparse ``sp`` and a 2-D tensor."""
    dense = _as_tensor(dense)
    if dense.ndim != 2 or dense.shape[0] != sp.shape[1]:
        raise ShapeError("sparse_matmul", sp.shape, dense.shape)
    return OPS["sparse_matmul"](dense, sparse=sp)


@primitive("sparse_matmul")
def _sparse_matmul(dense, sparse: SparseMatrix):
    out = kernels.csr_matmul(sparse.indptr, sparse.indices, sparse.data, dense)

    def backward(g):
        t = sparse.transpose()
        return (kernels.csr_matmul(t.indptr, t.indices, t.data, g),)

    return out, backward


# ---------------------------------------------------------------------------
# normalisation and nonlinearities


def _mask_like(x, mask):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(m, x.shape)
    except ValueError:
        raise ShapeError("softmax_rows", x.shape, m.shape) from None


@primitive("softmax_rows")
def _softmax_rows(x, mask=None):
    """Softmax over the last axis.  Entries where ``mask`` is False get
    exactly zero weight; a fully masked row is all zeros."""
    m = _mask_like(x, mask)
    if m is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        filled = np.where(m, x, -np.inf)
        top = filled.max(axis=-1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, x, 0.0) - top), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return y, backward


@primitive("log_softmax_rows")
def _log_softmax_rows(x, mask=None):
    """Log-softmax over the last axis; masked entries are reported as 0 and
    receive no gradient."""
    m = _mask_like(x, mask)
    if m is None:
        z = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        p = np.exp(out)

        def backward(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return out, backward
    filled = np.where(m, x, -np.inf)
    top = filled.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    z = np.where(m, x, 0.0) - top
    e = np.where(m, np.exp(z), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    lse = np.log(np.where(s > 0, s, 1.0))
    out = np.where(m, z - lse, 0.0)
    p = e / np.where(s > 0, s, 1.0)

    def backward(g):
        g = np.where(m, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return out, backward


@primitive("layer_norm_rows")
def _layer_norm_rows(x, gain=None, bias=None, eps: float = 1e-12):
    """Normalise each row over the last axis, then ``* gain + bias``."""
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm_rows", x.shape, p.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias

    def backward(g):
        gx = g * gain if gain is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, d)
        dgain = (g * xhat).reshape(flat).sum(axis=0) if gain is not None else None
        dbias = g.reshape(flat).sum(axis=0) if bias is not None else None
        return dx, dgain, dbias

    return out, backward


def layer_norm_rows(x, gain=None, bias=None, eps: float = 1e-12) -> Tensor:
    inputs = [x]
    if gain is not None:
        inputs.append(gain)
    if bias is not None:
        if gain is None:
            raise ValueError("layer_norm_rows: bias requires gain")
        inputs.append(bias)
    return OPS["layer_norm_rows"](*inputs, eps=eps)


@primitive("relu")
def _relu(x):
    on = x > 0
    return np.where(on, x, 0.0).astype(x.dtype), lambda g: (g * on,)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@primitive("gelu")
def _gelu(x):
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return (x * cdf).astype(x.dtype), backward


@primitive("sigmoid")
def _sigmoid(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, lambda g: (g * y * (1.0 - y),)


@primitive("exp")
def _exp(x):
    y = np.exp(x)
    return y, lambda g: (g * y,)


@primitive("log")
def _log(x):
    if np.any(x <= 0):
        raise ValueError(f"log: non-positive input (min {x.min()!r})")
    return np.log(x), lambda g: (g / x,)


@primitive("dropout")
def _dropout(x, keep: float = 1.0, train: bool = False, rng: np.random.Generator | None = None):
    """Inverted dropout: in train mode zero entries with prob ``1 - keep``
    and rescale survivors by ``1 / keep``; identity otherwise."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout: keep probability must be in (0, 1], got {keep}")
    if not train or keep == 1.0 or getattr(_force_eval, "on", False):
        return x.copy(), lambda g: (g,)
    if rng is None:
        raise ValueError("dropout: train mode needs an rng")
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, lambda g: (g * mask,)


# ---------------------------------------------------------------------------
# functional aliases

matmul = OPS["matmul"]
add = OPS["add"]
sub = OPS["sub"]
elementwise_mul = OPS["elementwise_mul"]
concat_rows = OPS["concat_rows"]
concat_cols = OPS["concat_cols"]
mean_rows = OPS["mean_rows"]
relu = OPS["relu"]
gelu = OPS["gelu"]
sigmoid = OPS["sigmoid"]
exp = OPS["exp"]
log = OPS["log"]


def scale(x, factor: float) -> Tensor:
    return OPS["scale"](x, factor=float(factor))


def reshape(x, shape) -> Tensor:
    return OPS["reshape"](x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return OPS["transpose"](x, axes=axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return OPS["sum"](x, axis=axis, keepdims=keepdims)


def row_slice(x, rows) -> Tensor:
    return OPS["row_slice"](x, rows=rows)


def softmax_rows(x, mask=None) -> Tensor:
    return OPS["softmax_rows"](x, mask=mask)


def log_softmax_rows(x, mask=None) -> Tensor:
    return OPS["log_softmax_rows"](x, mask=mask)


def embedding_gather(table, indices) -> Tensor:
    return OPS["embedding_gather"](table, indices=indices)


def dropout(x, keep: float, train: bool, rng=None) -> Tensor:
    return OPS["dropout"](x, keep=keep, train=train, rng=rng)
