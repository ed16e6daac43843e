"""Dense float64 tensors and a define-by-run reverse-mode autodiff engine.

Every differentiable op builds its output eagerly and, when any input
requires a gradient, attaches the inputs and a vector-Jacobian closure to
the output.  :func:`backward` walks that record in reverse topological order.

Tensors are immutable: the value buffer is a read-only numpy array and
gradients are returned from :func:`backward` instead of being stored on the
tensors themselves.
"""

import contextlib
import itertools
import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericalError

__all__ = [
    "Tensor",
    "tensor_of",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "exp",
    "log",
    "relu",
    "elementwise",
    "conv2d",
    "log_softmax",
    "softmax",
]

_ids = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "op", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _freeze(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    @classmethod
    def _wrap(cls, arr, op, parents=(), vjp=None):
        # Internal constructor: takes ownership of ``arr`` without copying.
        arr = np.asarray(arr, dtype=np.float64)
        _freeze(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.id = next(_ids)
        t.op = op
        track = vjp is not None and grad_enabled() and any(p.requires_grad for p in parents)
        t.requires_grad = track
        t._parents = tuple(parents) if track else ()
        t._vjp = vjp if track else None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor._wrap(self.data, "detach")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)


def _freeze(arr, op):
    if arr.size and not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(op, f"{bad} of {arr.size} elements are NaN/Inf")
    arr.setflags(write=False)


def tensor_of(shape, values, requires_grad=False):
    """Build a tensor from an extent list and a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ContractError(f"negative extent in shape {list(shape)}")
    values = np.asarray(values, dtype=np.float64).ravel()
    if math.prod(shape) != values.size:
        raise ContractError(
            f"shape {list(shape)} needs {math.prod(shape)} values, got {values.size}"
        )
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    # Sum a broadcast gradient back down to ``shape``.
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._wrap(a.data + b.data, "add", (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor._wrap(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(a.data * b.data, "mul", (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return Tensor._wrap(-a.data, "neg", (a,), lambda g: (-g,))


def elementwise(x, fn, dfn, name):
    """Apply ``fn`` elementwise; the backward pass scales by ``dfn(x)``."""
    x = as_tensor(x)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fn(x.data)
    _check(out, name)

    def vjp(g):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return (g * dfn(x.data),)

    return Tensor._wrap(out, name, (x,), vjp)


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    _check(out, "exp")
    return Tensor._wrap(out, "exp", (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    if x.size and (x.data <= 0).any():
        raise NumericalError("log", "argument must be positive")
    return Tensor._wrap(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._wrap(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------ structure

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._wrap(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        "transpose",
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: {exc}") from None
    return Tensor._wrap(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._wrap(out, "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    if count == 0:
        raise ContractError("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor._wrap(out, "mean", (a,), vjp)


# ---------------------------------------------------------------- convolution

def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation.  x: [n, c, h, w]; w: [out, c, kh, kw]; b: [out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ContractError(f"conv2d: kernel expects {ci} input channels, input has {c}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(wd, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ContractError(
            f"conv2d: non-positive output extent {oh}x{ow} for input {h}x{wd}, kernel {kh}x{kw}"
        )
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # [n, c, oh, ow, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [n, oh, ow, o]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ContractError(f"conv2d: bias shape {b.shape} != ({o},)")
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gwin = np.tensordot(g, w.data, axes=([1], [0]))  # [n, oh, ow, c, kh, kw]
            gxp = np.zeros(xp.shape)
            hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gwin[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [o, c, kh, kw]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._wrap(out, "conv2d", parents, vjp)


# -------------------------------------------------------------------- softmax

def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._wrap(out, "log_softmax", (x,), vjp)


def softmax(x, axis=-1):
    """Row softmax with max-subtraction; rows sum to one."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(out, "softmax", (x,), vjp)


# ------------------------------------------------------------------- backward

def _check(arr, op):
    if np.size(arr) and not np.isfinite(arr).all():
        raise NumericalError(op)


def _topo_order(root):
    order, seen = [], {root.id}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and parent.id not in seen:
                seen.add(parent.id)
                stack.append((parent, iter(parent._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss, wrt=()):
    """Gradients of a scalar ``loss`` for every leaf that requires grad.

    Returns a dict keyed by leaf ``id``.  Tensors listed in ``wrt`` that did
    not take part in the computation get an all-zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    grads = {}
    leaves = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones(loss.shape)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(node.id, None)
            if node.is_leaf:
                leaves[node.id] = g if g is not None else np.zeros(node.shape)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if np.size(pg) and not np.isfinite(pg).all():
                    raise NumericalError(f"backward of {node.op}")
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = np.array(pg, dtype=np.float64)
    out = {k: Tensor(v) for k, v in leaves.items()}
    for t in wrt:
        if t.id not in out:
            out[t.id] = Tensor(np.zeros(t.shape))
    return out


def grad_check(f, point, epsilon=1e-5):
    """Largest relative disagreement between backward() and central differences.

    ``point`` is a Tensor or a sequence of Tensors; ``f`` receives the same
    structure and returns a scalar Tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    single = isinstance(point, Tensor) or not isinstance(point, (list, tuple))
    base = [np.array(as_tensor(p).data, dtype=np.float64) for p in ([point] if single else point)]

    def call(arrays, requires_grad):
        ts = [Tensor(a, requires_grad=requires_grad) for a in arrays]
        out = f(ts[0] if single else ts)
        if out.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        value = out.item()
        if not math.isfinite(value):
            raise NumericalError("grad_check", "f returned a non-finite value")
        return ts, out

    inputs, out = call(base, True)
    grads = backward(out, wrt=inputs)
    worst = 0.0
    for k, arr in enumerate(base):
        analytic = grads[inputs[k].id].data.ravel()
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                fp = call(base, False)[1].item()
            flat[i] = orig - epsilon
            with no_grad():
                fm = call(base, False)[1].item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
