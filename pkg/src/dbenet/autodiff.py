"""Dense tensors with tape-based reverse-mode differentiation, named
parameters and ADAM.

Ops record themselves on the innermost active :class:`Tape`; with no tape
active they only compute. Broadcasting is limited to a (1, C) row vector, an
(N, 1) column vector or a scalar against an (N, C) operand.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DBENetError, InvalidArgument, ShapeError

_local = threading.local()
_PERTURBED: set[str] = set()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def const(x, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


class Node(NamedTuple):
    op: str
    out: Tensor
    inputs: tuple
    vjp: Callable


class Tape:
    """Append-only record of executed ops, in execution (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, op: str, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.nodes.append(Node(op, out, inputs, vjp))

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(id(t))


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    needs = any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=needs)
    stack = _tape_stack()
    if needs and stack:
        stack[-1].record(op, out, inputs, vjp)
    return out


@contextlib.contextmanager
def perturb_backward(op: str, factor: float = 1.01):
    """Test hook: scale the backward rule of ``op`` to simulate a broken gradient."""
    _PERTURBED.add(op)
    _local.perturb_factor = factor
    try:
        yield
    finally:
        _PERTURBED.discard(op)


def _run_backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise InvalidArgument(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.vjp(g)
        if node.op in _PERTURBED:
            f = getattr(_local, "perturb_factor", 1.01)
            in_grads = tuple(None if ig is None else ig * f for ig in in_grads)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
                keep[key] = x
    tape._grads = grads
    return grads


def backward(tape: Tape, loss: Tensor, params: "ParamSet | None" = None) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` keyed by parameter name.

    With ``params`` given, every trainable parameter gets an entry (zeros when
    unreachable from the loss) and frozen parameters are omitted.
    """
    grads = _run_backward(tape, loss)
    out: dict[str, np.ndarray] = {}
    if params is not None:
        for name, p in params.items():
            if not p.trainable:
                continue
            g = grads.get(id(p.tensor))
            out[name] = g.astype(p.tensor.dtype) if g is not None else np.zeros_like(p.tensor.data)
        return out
    seen = set()
    for node in tape.nodes:
        for x in node.inputs:
            if isinstance(x, Tensor) and x.name and x.requires_grad and id(x) not in seen:
                seen.add(id(x))
                if id(x) in grads:
                    out[x.name] = grads[id(x)]
    return out


def gradients(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    grads = _run_backward(tape, loss)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------- helpers

def _check_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {x.shape}")


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or b == () or a == ():
        return True
    if len(a) != 2 or len(b) != 2:
        return False
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)
    return _record("matmul", A @ B, (a, b), vjp)


def _binary(op: str, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    out = fwd(A, B)

    def vjp(g):
        return (_unbroadcast(da(g, A, B), a.shape) if a.requires_grad else None,
                _unbroadcast(db(g, A, B), b.shape) if b.requires_grad else None)
    return _record(op, out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, A, B: g, lambda g, A, B: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, A, B: g, lambda g, A, B: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, A, B: g * B, lambda g, A, B: g * A)


def scale(x: Tensor, s: float) -> Tensor:
    s_ = x.data.dtype.type(s)
    return _record("scale", x.data * s_, (x,), lambda g: (g * s_,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    return _record("add_scalar", x.data + x.data.dtype.type(s), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    X = x.data
    mask = X > 0
    return _record("relu", np.where(mask, X, 0).astype(X.dtype), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _record("square", X * X, (x,), lambda g: (2 * g * X,))


def sqrt(x: Tensor) -> Tensor:
    """Square root with zero gradient at zero."""
    X = x.data
    if np.any(X < 0):
        raise InvalidArgument("sqrt of negative value")
    Y = np.sqrt(X)

    def vjp(g):
        safe = np.where(Y > 0, Y, 1)
        return (np.where(Y > 0, g / (2 * safe), 0).astype(X.dtype),)
    return _record("sqrt", Y, (x,), vjp)


def abs_(x: Tensor) -> Tensor:
    X = x.data
    return _record("abs", np.abs(X), (x,), lambda g: (g * np.sign(X),))


def transpose(x: Tensor) -> Tensor:
    _check_2d(x, "transpose")
    return _record("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    X = x.data
    if axis is None:
        out = np.asarray(X.sum(), dtype=X.dtype)
        return _record("reduce_sum", out, (x,), lambda g: (np.broadcast_to(g, X.shape).copy(),))
    out = X.sum(axis=axis, keepdims=True)
    return _record("reduce_sum", out, (x,), lambda g: (np.broadcast_to(g, X.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / max(x.data.size, 1))


def softmax_rows(x: Tensor) -> Tensor:
    _check_2d(x, "softmax_rows")
    X = x.data
    if X.shape[1] == 0:
        raise InvalidArgument("softmax over an empty row")
    e = np.exp(X - X.max(axis=1, keepdims=True))
    Y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (Y * (g - (g * Y).sum(axis=1, keepdims=True)),)
    return _record("softmax_rows", Y, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    _check_2d(x, "log_softmax_rows")
    X = x.data
    if X.shape[1] == 0:
        raise InvalidArgument("softmax over an empty row")
    Z = X - X.max(axis=1, keepdims=True)
    Y = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    P = np.exp(Y)

    def vjp(g):
        return (g - P * g.sum(axis=1, keepdims=True),)
    return _record("log_softmax_rows", Y, (x,), vjp)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Unit-norm rows; zero rows stay zero with zero gradient."""
    _check_2d(x, "l2_normalize_rows")
    X = x.data
    n = np.sqrt((X * X).sum(axis=1, keepdims=True))
    nz = n > 0
    safe = np.where(nz, n, 1)
    Y = np.where(nz, X / safe, 0).astype(X.dtype)

    def vjp(g):
        gx = (g - Y * (g * Y).sum(axis=1, keepdims=True)) / safe
        return (np.where(nz, gx, 0).astype(X.dtype),)
    return _record("l2_normalize_rows", Y, (x,), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]``; index -1 yields a zero row."""
    _check_2d(x, "gather_rows")
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n, c = x.shape
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise InvalidArgument(f"gather index out of range for {n} rows")
    valid = idx >= 0
    out = np.zeros((idx.size, c), dtype=x.dtype)
    out[valid] = x.data[idx[valid]]

    def vjp(g):
        gx = np.zeros((n, c), dtype=g.dtype)
        np.add.at(gx, idx[valid], g[valid])
        return (gx,)
    return _record("gather_rows", out, (x,), vjp)


def scatter_sum_rows(x: Tensor, idx, n_out: int) -> Tensor:
    """``out[idx[i]] += x[i]``; index -1 drops the row."""
    _check_2d(x, "scatter_sum_rows")
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size != x.shape[0]:
        raise ShapeError(f"scatter index length {idx.size} vs rows {x.shape[0]}")
    if idx.size and idx.max() >= n_out:
        raise InvalidArgument(f"scatter index out of range for {n_out} rows")
    valid = idx >= 0
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    np.add.at(out, idx[valid], x.data[valid])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[valid] = g[idx[valid]]
        return (gx,)
    return _record("scatter_sum_rows", out, (x,), vjp)


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {[x.shape for x in xs]}")
    widths = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))
    return _record("concat_cols", np.concatenate([x.data for x in xs], axis=1), tuple(xs), vjp)


def spmm(S: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times ``x``."""
    _check_2d(x, "spmm")
    if S.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {S.shape} @ {x.shape}")
    S = S.tocsr().astype(x.dtype)
    St = S.T.tocsr()
    return _record("spmm", np.asarray(S @ x.data), (x,), lambda g: (np.asarray(St @ g),))


def instance_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-column standardisation over the rows of ``x``."""
    _check_2d(x, "instance_norm_rows")
    X = x.data
    n = X.shape[0]
    if n == 0:
        return _record("instance_norm_rows", X.copy(), (x,), lambda g: (g,))
    mu = X.mean(axis=0, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    Y = ((X - mu) * inv).astype(X.dtype)

    def vjp(g):
        gm = g.mean(axis=0, keepdims=True)
        gym = (g * Y).mean(axis=0, keepdims=True)
        return ((inv * (g - gm - Y * gym)).astype(X.dtype),)
    return _record("instance_norm_rows", Y, (x,), vjp)


# ---------------------------------------------------------------- parameters

@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data


class ParamSet:
    """Ordered, uniquely named parameter collection."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self._params[name] = Parameter(name, t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.data for k, p in self._params.items()}

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._params.items() if p.trainable]

    def set_value(self, name: str, value) -> None:
        p = self._params[name]
        value = np.asarray(value)
        if value.shape != p.tensor.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {p.tensor.shape}")
        p.tensor.data = np.array(value, dtype=self.dtype)

    def set_trainable(self, prefixes: Iterable[str], trainable: bool) -> list[str]:
        hit = []
        for prefix in prefixes:
            for k, p in self._params.items():
                if k == prefix or k.startswith(prefix + "."):
                    p.trainable = trainable
                    p.tensor.requires_grad = trainable
                    hit.append(k)
        return hit

    def copy(self, dtype=None) -> "ParamSet":
        out = ParamSet(self.dtype if dtype is None else dtype)
        for k, p in self._params.items():
            out.add(k, p.tensor.data.copy(), p.trainable)
        return out


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState) -> ParamSet:
    """One bias-corrected ADAM update of every trainable parameter, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if not p.trainable:
            continue
        if name not in grads:
            raise DBENetError(f"internal error: no gradient for trainable parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.tensor.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.tensor.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(g.shape)
            v = np.zeros(g.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        upd = state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.tensor.data = (p.tensor.data - upd).astype(params.dtype)
    return params
