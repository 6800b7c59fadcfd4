"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable values: every operation returns a fresh node that
remembers its parents and how to push gradients back to them.  The graph is
topologically ordered by construction (a global creation counter), so the
backward pass is a single reverse sweep that visits each reachable node once.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "grad",
    "grad_tensors",
    "add", "sub", "mul", "div", "neg", "matmul",
    "tsum", "tmean", "reshape", "transpose", "concat", "broadcast_to", "take",
    "sqrt", "square", "reciprocal", "exp", "log", "tanh", "sigmoid", "relu",
    "powi", "clip_min", "l2norm",
]

_SEQ = itertools.count()


class Tensor:
    """An immutable float64 array, optionally tracked on the implicit tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_n", "_slice_info")

    __array_ufunc__ = None  # keep numpy from hijacking mixed expressions

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        track = requires_grad or any(p.requires_grad for p in _parents)
        self.data = arr
        self.requires_grad = track
        self._parents = tuple(_parents) if track else ()
        self._vjp = _vjp if track else None
        self._n = next(_SEQ)
        self._slice_info = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return powi(self, p)

    def __getitem__(self, key):
        return _slice(self, key)

    # shape/reduction conveniences ------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy trailing-axis broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# binary ops ----------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise ValueError("domain error: division by zero")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"shape mismatch: matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"shape mismatch: cannot matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


# reductions & shape ops ------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if a.ndim else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def transpose(a, axes=None):
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(out, _parents=tuple(parts), _vjp=vjp)


def _slice(a, key):
    a = _as_tensor(a)
    out = a.data[key]
    if out.base is not None or out is a.data:
        out = out.copy()

    def vjp(g):
        ga = np.zeros(a.shape)
        ga[key] = g
        return (ga,)

    t = Tensor(out, _parents=(a,), _vjp=vjp)
    if t.requires_grad:
        # the backward pass scatters straight into the parent's buffer
        # instead of materializing a full-size zero gradient per slice
        t._slice_info = key
    return t


def take(a, indices, axis=0):
    """Gather along an axis with an arbitrary integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros(a.shape)
        gam = np.moveaxis(ga, axis, 0)
        g2 = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(gam, idx, g2)
        return (ga,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


# elementwise ops -------------------------------------------------------------

def neg(a):
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return Tensor(-a.data, _parents=(a,), _vjp=vjp)


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("domain error: sqrt of negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def square(a):
    a = _as_tensor(a)

    def vjp(g):
        return (g * (2.0 * a.data),)

    return Tensor(a.data * a.data, _parents=(a,), _vjp=vjp)


def reciprocal(a):
    a = _as_tensor(a)
    if np.any(a.data == 0.0):
        raise ValueError("domain error: reciprocal of zero")
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("domain error: log of non-positive value")
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def sigmoid(a):
    a = _as_tensor(a)
    out = expit(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def powi(a, p):
    """Elementwise power by a Python scalar exponent."""
    a = _as_tensor(a)
    p = float(p)
    if p != round(p) and np.any(a.data < 0.0):
        raise ValueError("domain error: fractional power of negative value")
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def clip_min(a, lo):
    """max(a, lo) with zero gradient in the clamped region."""
    a = _as_tensor(a)
    lo = float(lo)
    mask = a.data > lo
    out = np.where(mask, a.data, lo)

    def vjp(g):
        return (g * mask,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def l2norm(a, axis, keepdims=False):
    """Euclidean norm over one axis."""
    return sqrt(tsum(square(a), axis=axis, keepdims=keepdims))


# tape and gradients ----------------------------------------------------------

class Tape:
    """Registry of named trainable leaf tensors.

    The computation trace itself lives on the tensors (creation-ordered
    parent links); the tape owns which leaves count as parameters.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def assign(self, name: str, value) -> Tensor:
        """Replace a parameter with a fresh leaf (tensors are immutable)."""
        if name not in self._params:
            raise KeyError(name)
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict):
        for k, v in state.items():
            if k in self._params:
                self.assign(k, v)
            else:
                self.parameter(k, v)


def _backward(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ValueError(f"contract violation: loss must be scalar, got shape {loss.shape}")
    # reachable tracked subgraph, then one reverse sweep in creation order
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t._n, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    # ids whose buffer this sweep allocated itself and may mutate in place;
    # vjp outputs can alias other nodes' gradients, so they start un-owned
    owned = {id(loss)}

    def accumulate(parent, pg):
        pid = id(parent)
        acc = grads.get(pid)
        if acc is None:
            grads[pid] = pg
            owned.discard(pid)
        elif pid in owned:
            np.add(acc, pg, out=acc)
        else:
            grads[pid] = acc + pg
            owned.add(pid)

    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        if node._slice_info is not None:
            parent = node._parents[0]
            pid = id(parent)
            buf = grads.get(pid)
            if buf is None:
                buf = np.zeros(parent.shape)
                grads[pid] = buf
                owned.add(pid)
            elif pid not in owned:
                buf = buf.copy()
                grads[pid] = buf
                owned.add(pid)
            buf[node._slice_info] += g
            del grads[id(node)]
            continue
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if parent.requires_grad:
                accumulate(parent, pg)
        del grads[id(node)]
    return grads


def grad(loss: Tensor, tape: Tape) -> dict[str, Tensor]:
    """d(loss)/d(parameter) for every registered parameter.

    Parameters the loss does not reach get zero gradients of matching shape.
    """
    grads = _backward(loss)
    out = {}
    for name, p in tape.items():
        g = grads.get(id(p))
        out[name] = Tensor(g if g is not None else np.zeros(p.shape))
    return out


def grad_tensors(loss: Tensor, tensors) -> list[Tensor]:
    """d(loss)/d(t) for an explicit list of tracked tensors."""
    grads = _backward(loss)
    out = []
    for t in tensors:
        g = grads.get(id(t))
        out.append(Tensor(g if g is not None else np.zeros(t.shape)))
    return out
