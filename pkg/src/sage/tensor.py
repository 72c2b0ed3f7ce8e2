"""Dense float64 tensors with tape-based reverse-mode differentiation.

Just enough machinery to run a small vision-language transformer forward
and backpropagate one scalar decoder logit to the vision activations.
Arrays are numpy; gradient rules are written out per primitive so they
stay auditable. No broadcasting beyond scalar-times-tensor: callers
reshape explicitly.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Backward-pass misuse: detached scalar, double backward, etc."""


class DegenerateMaskError(ValueError):
    """A softmax row has no allowed positions."""


_LN_EPS = 1e-5
# tanh-form gelu constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class DiffTensor:
    """A dense n-d float64 array, optionally tracked for reverse-mode grads.

    ``grad`` is populated (same shape as ``values``) by a backward pass
    when this tensor is a ``requires_grad`` leaf or an intermediate on
    the active tape. Frozen tensors (no pending tape) are immutable by
    convention and safe to share across decodes.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _TapeOp:
    """One recorded primitive: output, inputs, and a local gradient rule.

    ``backward`` maps the output cotangent to one cotangent per input
    (None for non-differentiable slots).
    """

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: DiffTensor, inputs: tuple[DiffTensor, ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_tls = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of primitives from one forward pass.

    Ops append in execution order, so the reversed list is a topological
    order and backward visits each node once. A tape is confined to the
    worker that built it.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = self._prev
        return False

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: DiffTensor, inputs: tuple[DiffTensor, ...],
               backward: Callable[[np.ndarray], tuple]) -> None:
        out._tape = self
        self._ops.append(_TapeOp(out, inputs, backward))

    def reset_grads(self) -> None:
        """Clear grads on every tensor the tape touches and re-arm backward."""
        for op in self._ops:
            op.out.grad = None
            for t in op.inputs:
                t.grad = None
        self.consumed = False

    def backward(self, root: DiffTensor) -> None:
        if root._tape is not self:
            raise TapeError("scalar is detached from this tape")
        if root.values.shape != (1,):
            raise TapeError(f"backward root must have shape [1], got {root.values.shape}")
        if self.consumed:
            raise TapeError("backward already ran on this tape; reset_grads() first")
        self.consumed = True
        root.grad = np.ones(1, dtype=np.float64)
        for op in reversed(self._ops):
            g = op.out.grad
            if g is None:
                continue
            gins = op.backward(g)
            for t, gi in zip(op.inputs, gins):
                if gi is None:
                    continue
                if t.requires_grad or t._tape is self:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.values)
                    t.grad += gi


def backward(scalar: DiffTensor) -> None:
    """Reverse pass from a shape-[1] scalar to every requires_grad ancestor."""
    if scalar._tape is None:
        raise TapeError("scalar was not recorded on any tape")
    scalar._tape.backward(scalar)


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _unary(a: DiffTensor, out_values: np.ndarray,
           grad_fn: Callable[[np.ndarray], np.ndarray]) -> DiffTensor:
    out = DiffTensor(out_values)
    tape = _active_tape()
    if tape is not None and (a.requires_grad or a._tape is tape):
        out.requires_grad = True
        tape.record(out, (a,), lambda g: (grad_fn(g),))
    return out


def _binary(a: DiffTensor, b: DiffTensor, out_values: np.ndarray,
            grad_fn: Callable[[np.ndarray], tuple]) -> DiffTensor:
    out = DiffTensor(out_values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in (a, b)):
        out.requires_grad = True
        tape.record(out, (a, b), grad_fn)
    return out


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _binary(a, b, av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _binary(a, b, a.values + b.values, lambda g: (g, g))


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    return _binary(a, b, av * bv, lambda g: (g * bv, g * av))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return _unary(a, a.values * c, lambda g: g * c)


def relu(a: DiffTensor) -> DiffTensor:
    pos = a.values > 0
    return _unary(a, np.where(pos, a.values, 0.0), lambda g: g * pos)


def gelu(a: DiffTensor) -> DiffTensor:
    x = a.values
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner)

    return _unary(a, out, grad)


def softmax_rows(x: DiffTensor, mask: Optional[np.ndarray] = None) -> DiffTensor:
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction.

    ``mask`` (bool, same shape) marks allowed positions; disallowed
    positions get exactly 0. A fully masked row is an error.
    """
    if x.values.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {x.shape}")
    xv = x.values
    if mask is None:
        allowed = np.ones_like(xv, dtype=bool)
    else:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != xv.shape:
            raise ShapeError(f"mask shape {allowed.shape} != input shape {xv.shape}")
        if not allowed.any(axis=1).all():
            raise DegenerateMaskError("softmax row with no allowed positions")
    shifted = np.where(allowed, xv, -np.inf)
    rowmax = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - rowmax)
    e = np.where(allowed, e, 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return y * (g - dot)

    return _unary(x, y, grad)


def layer_norm(x: DiffTensor) -> DiffTensor:
    """Parameter-free row-wise layer norm: (x - mean) / sqrt(var + eps)."""
    if x.values.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got shape {x.shape}")
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = (xv - mu) * inv

    def grad(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gy)

    return _unary(x, y, grad)


def embedding_lookup(table: DiffTensor, ids: Sequence[int]) -> DiffTensor:
    idx = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if idx.ndim != 1:
        raise ShapeError("ids must be a flat index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"id out of range for table with {table.shape[0]} rows")
    out_values = table.values[idx]

    def grad(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    out = DiffTensor(out_values)
    tape = _active_tape()
    if tape is not None and (table.requires_grad or table._tape is tape):
        out.requires_grad = True
        tape.record(out, (table,), grad)
    return out


def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    return _unary(x, x.values.reshape(shape), lambda g: g.reshape(old))


def transpose(x: DiffTensor) -> DiffTensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {x.shape}")
    return _unary(x, x.values.T.copy(), lambda g: g.T.copy())


def concat_rows(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows shapes incompatible: {a.shape} + {b.shape}")
    m = a.shape[0]
    return _binary(a, b, np.concatenate([a.values, b.values], axis=0),
                   lambda g: (g[:m], g[m:]))


def concat_cols(parts: Sequence[DiffTensor]) -> DiffTensor:
    if not parts:
        raise ShapeError("concat_cols of an empty list")
    widths = [p.shape[1] for p in parts]
    out_values = np.concatenate([p.values for p in parts], axis=1)
    splits = np.cumsum(widths)[:-1]

    def grad(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    out = DiffTensor(out_values)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad or p._tape is tape for p in parts):
        out.requires_grad = True
        tape.record(out, tuple(parts), grad)
    return out


def col_slice(x: DiffTensor, j0: int, j1: int) -> DiffTensor:
    if x.values.ndim != 2 or not (0 <= j0 < j1 <= x.shape[1]):
        raise ShapeError(f"col_slice [{j0}:{j1}] invalid for shape {x.shape}")

    def grad(g):
        gx = np.zeros_like(x.values)
        gx[:, j0:j1] = g
        return gx

    return _unary(x, x.values[:, j0:j1].copy(), grad)


def row_slice(x: DiffTensor, i0: int, i1: int) -> DiffTensor:
    if x.values.ndim != 2 or not (0 <= i0 < i1 <= x.shape[0]):
        raise ShapeError(f"row_slice [{i0}:{i1}] invalid for shape {x.shape}")

    def grad(g):
        gx = np.zeros_like(x.values)
        gx[i0:i1] = g
        return gx

    return _unary(x, x.values[i0:i1].copy(), grad)


def normalize_rows(x: DiffTensor) -> DiffTensor:
    """y = x / rowsum(x). Rows must have nonzero sums."""
    if x.values.ndim != 2:
        raise ShapeError(f"normalize_rows needs a 2-D tensor, got shape {x.shape}")
    s = x.values.sum(axis=1, keepdims=True)
    if (s == 0).any():
        raise ZeroDivisionError("normalize_rows: row sums to zero")
    y = x.values / s

    def grad(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (g - dot) / s

    return _unary(x, y, grad)


def global_mean(x: DiffTensor) -> DiffTensor:
    """Mean over the spatial (row) axis of a 2-D tensor: [P, D] -> [1, D]."""
    if x.values.ndim != 2:
        raise ShapeError(f"global_mean needs a 2-D tensor, got shape {x.shape}")
    p = x.shape[0]
    return _unary(x, x.values.mean(axis=0, keepdims=True),
                  lambda g: np.repeat(g, p, axis=0) / p)


def sum_all(x: DiffTensor) -> DiffTensor:
    shp = x.shape
    return _unary(x, np.asarray([x.values.sum()]),
                  lambda g: np.full(shp, g[0]))


def take(x: DiffTensor, index: tuple[int, int]) -> DiffTensor:
    """Extract one entry of a 2-D tensor as a shape-[1] scalar."""
    i, j = index
    if x.values.ndim != 2 or not (0 <= i < x.shape[0] and 0 <= j < x.shape[1]):
        raise ShapeError(f"take index {index} invalid for shape {x.shape}")

    def grad(g):
        gx = np.zeros_like(x.values)
        gx[i, j] = g[0]
        return gx

    return _unary(x, np.asarray([x.values[i, j]]), grad)
