"""Dense float64 tensors with tape-based reverse-mode autodiff.

Operations execute eagerly on numpy arrays. While a :class:`Tape` is active
(``with Tape() as tape:``) every op whose inputs require gradients appends a
node to it; ``tape.backward(root)`` replays the nodes in reverse and adds
``d root / d leaf`` into ``leaf.grad``. A tape is built fresh for each
forward pass and discarded afterwards.

A tape created with ``capture_linear=True`` additionally keeps, for every
:func:`linear` call, the layer input and the gradient flowing into the layer
output. Those two matrices are enough to recover per-row gradients of the
weight and bias (see :func:`per_row_grads` and :func:`grouped_sq_norms`).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


@contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._index = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._index = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self):
        return None if self._tape is None else id(self._tape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self):
        if self._tape is None:
            raise TapeError("backward() called on a tensor that was not recorded on a tape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` starts at zero and accumulates."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Records differentiable ops executed while it is the active tape."""

    def __init__(self, capture_linear: bool = False):
        self.nodes: list = []
        self.capture_linear = capture_linear
        self.captured: dict = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable):
        out.requires_grad = True
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((parents, vjp))

    def backward(self, root: Tensor, seed: np.ndarray | None = None):
        if root._tape is not self:
            raise TapeError("root tensor was not recorded on this tape")
        if seed is None:
            if root.size != 1:
                raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
            seed = np.ones_like(root.data)
        grads = {root._index: np.asarray(seed, dtype=np.float64)}
        for i in range(root._index, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            parents, vjp = self.nodes[i]
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    j = p._index
                    grads[j] = grads[j] + pg if j in grads else pg
                elif p._tape is None:
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=np.float64)
                    else:
                        p.grad += pg


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(arr: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(x),))


# ----------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def concat(items: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in items]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for a ``(rows, in)`` input.

    On a capturing tape the input and the output gradient are stored under
    the parameter names so per-row weight gradients can be rebuilt later.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    tape = active_tape()

    def vjp(g):
        if tape is not None and tape.capture_linear:
            if isinstance(w, Parameter):
                tape.captured[w.name] = (xd, g)
            if isinstance(b, Parameter):
                tape.captured[b.name] = (None, g)
        gx = g @ wd.T if x.requires_grad else None
        grads = (gx, xd.T @ g)
        if b is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, vjp)


# ------------------------------------------------------------ per-row helpers

def per_row_grads(tape: Tape, names: Iterable[str]) -> dict:
    """Per-row gradients ``{name: (rows, *param_shape)}`` from a capturing tape."""
    out = {}
    for name in names:
        if name not in tape.captured:
            raise TapeError(f"no captured linear input/grad for parameter {name!r}")
        xd, g = tape.captured[name]
        out[name] = g.copy() if xd is None else np.einsum("ri,ro->rio", xd, g)
    return out


def grouped_sq_norms(tape: Tape, names: Iterable[str], group_size: int) -> dict:
    """Squared Frobenius norms of gradients summed over consecutive row groups.

    Rows ``[k*group_size, (k+1)*group_size)`` form group ``k``. For a weight,
    the group gradient is ``X_k^T G_k`` and its squared norm equals
    ``sum((X_k X_k^T) * (G_k G_k^T))``, so nothing of size ``in*out`` per
    group is ever materialised.
    """
    out = {}
    for name in names:
        if name not in tape.captured:
            raise TapeError(f"no captured linear input/grad for parameter {name!r}")
        xd, g = tape.captured[name]
        rows = g.shape[0]
        if rows % group_size:
            raise ShapeError(f"{rows} rows do not split into groups of {group_size}")
        gg = g.reshape(rows // group_size, group_size, -1)
        if xd is None:
            s = gg.sum(axis=1)
            out[name] = np.einsum("ko,ko->k", s, s)
        else:
            xx = xd.reshape(rows // group_size, group_size, -1)
            gram_x = np.einsum("kri,ksi->krs", xx, xx)
            gram_g = np.einsum("kro,kso->krs", gg, gg)
            out[name] = np.einsum("krs,krs->k", gram_x, gram_g)
    return out


def weighted_row_grad_sum(tape: Tape, names: Iterable[str], weights) -> dict:
    """``sum_r weights[r] * per_row_grad[r]`` for each parameter, without per-row tensors."""
    w = np.asarray(weights, dtype=np.float64)
    out = {}
    for name in names:
        if name not in tape.captured:
            raise TapeError(f"no captured linear input/grad for parameter {name!r}")
        xd, g = tape.captured[name]
        wg = g * w[:, None]
        out[name] = wg.sum(axis=0) if xd is None else xd.T @ wg
    return out


# ------------------------------------------------------------------ checking

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    For each parameter the error is ``||ad - fd|| / (||fd|| + 1e-12)`` over
    all of its elements; the maximum over parameters is returned.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    saved = [p.grad for p in params]
    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        out = f()
    tape.backward(out)
    autodiff = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, ad in zip(params, autodiff):
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fdf = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fdf[i] = (fp - fm) / (2.0 * h)
        err = np.linalg.norm(ad - fd) / (np.linalg.norm(fd) + 1e-12)
        worst = max(worst, float(err))
    return worst
