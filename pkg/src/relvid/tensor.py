"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation executed while recording is enabled
links its output to its inputs, and ``Tensor.backward`` on a scalar
walks that implicit graph once in reverse topological order.  Gradients
accumulate additively into ``.grad`` buffers, so training code must
zero them between steps.  Storage and arithmetic are numpy; the graph
machinery lives here.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy float64 array plus an optional gradient buffer.

    Tensors built by operations under recording carry parent links and
    a backward closure; leaves carry ``requires_grad`` set by the
    caller.  ``backward`` may be called once per recorded graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw", "_used")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None
        self._used = False

    # ---- introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # ---- backward ----

    def backward(self):
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._used:
            raise GraphError(
                "backward was already called on this graph; "
                "rebuild the graph before calling it again"
            )
        # iterative postorder so deep graphs cannot hit the recursion limit
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)
        self._used = True

    # ---- operator sugar (definitions below) ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return pow_(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


# ---- wiring helpers ----


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _live(*ts) -> bool:
    return _grad_enabled and any(t.requires_grad for t in ts)


def _node(data, parents, bw) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._bw = bw
    out._used = False
    return out


def _acc(t: Tensor, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    if not _live(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data
    if not _live(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, -_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    if not _live(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data
    if not _live(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), bw)


def neg(a):
    a = _wrap(a)
    data = -a.data
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, -g)

    return _node(data, (a,), bw)


def pow_(a, k):
    a = _wrap(a)
    k = float(k)
    data = a.data ** k
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, g * k * a.data ** (k - 1.0))

    return _node(data, (a,), bw)


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, g * data)

    return _node(data, (a,), bw)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, g / a.data)

    return _node(data, (a,), bw)


def sqrt(a):
    a = _wrap(a)
    data = np.sqrt(a.data)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, g * 0.5 / data)

    return _node(data, (a,), bw)


def tanh(a):
    a = _wrap(a)
    data = np.tanh(a.data)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, g * (1.0 - data * data))

    return _node(data, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a):
    """tanh-form GELU as a single graph node."""
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _acc(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _node(data, (a,), bw)


# ---- linear algebra ----


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data
    if not _live(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), bw)


def matmul_t(x, w):
    """x @ w.T with a 2-d weight, the common projection layout."""
    x, w = _wrap(x), _wrap(w)
    if w.data.ndim != 2:
        raise ShapeError(f"matmul_t weight must be 2-d, got {w.data.shape}")
    if x.data.ndim < 2 or x.data.shape[-1] != w.data.shape[-1]:
        raise ShapeError(
            f"matmul_t shapes disagree: {x.data.shape} @ {w.data.shape}.T"
        )
    data = x.data @ w.data.T
    if not _live(x, w):
        return Tensor(data)

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data)
        if w.requires_grad:
            gw = np.swapaxes(g, -1, -2) @ x.data
            if gw.ndim > 2:
                gw = gw.reshape(-1, *gw.shape[-2:]).sum(axis=0)
            _acc(w, gw)

    return _node(data, (x, w), bw)


def transpose(a, axes=None):
    a = _wrap(a)
    data = np.transpose(a.data, axes)
    if not _live(a):
        return Tensor(data)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        _acc(a, np.transpose(g, inv))

    return _node(data, (a,), bw)


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(data, (a,), bw)


def getitem(a, key):
    a = _wrap(a)
    data = a.data[key]
    if isinstance(data, np.ndarray):
        data = np.ascontiguousarray(data)
    else:
        data = np.asarray(data, dtype=np.float64)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _node(data, (a,), bw)


def concat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    if not _live(*ts):
        return Tensor(data)

    def bw(g):
        off = 0
        for t in ts:
            n = t.data.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + n)
            if t.requires_grad:
                _acc(t, g[tuple(sl)])
            off += n

    return _node(data, tuple(ts), bw)


def gather_rows(table, ids):
    """Row lookup (embedding): table[ids] with scatter-add backward."""
    table = _wrap(table)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows table must be 2-d, got {table.data.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]
    if not _live(table):
        return Tensor(data)

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _node(data, (table,), bw)


# ---- reductions ----


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _node(np.asarray(data, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not _live(a):
        return Tensor(np.asarray(data, dtype=np.float64))
    count = a.data.size / max(np.asarray(data).size, 1)

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape) / count)

    return _node(np.asarray(data, dtype=np.float64), (a,), bw)


# ---- normalizations ----


def softmax(a, axis=-1):
    """Numerically stable softmax along one axis."""
    a = _wrap(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (g - dot))

    return _node(data, (a,), bw)


def l2_normalize(a, axis=-1):
    """Scale slices to unit L2 norm; exact zero-norm slices map to zero."""
    a = _wrap(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    zero = n == 0.0
    if zero.any():
        warnings.warn(
            "l2_normalize: zero-norm slice mapped to the zero vector",
            RuntimeWarning,
            stacklevel=2,
        )
    safe = np.where(zero, 1.0, n)
    data = x / safe
    if not _live(a):
        return Tensor(data)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        gx = (g - data * dot) / safe
        if zero.any():
            gx = np.where(zero, 0.0, gx)
        _acc(a, gx)

    return _node(data, (a,), bw)


# ---- seeded initializers ----


def gaussian(shape, rng: np.random.Generator, mean=0.0, std=1.0,
             requires_grad=False) -> Tensor:
    return Tensor(rng.normal(mean, std, size=shape), requires_grad=requires_grad)


def uniform(shape, rng: np.random.Generator, low=0.0, high=1.0,
            requires_grad=False) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def zero_grads(params):
    """Clear gradient buffers on an iterable of tensors."""
    for p in params:
        p.zero_grad()
