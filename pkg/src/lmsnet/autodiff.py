"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the segmentation network needs are provided. Every op
records its parents and a closure that maps the upstream gradient to
gradients for each parent; ``backward`` walks the graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Working dtype for every Tensor. float64 everywhere except inside
# ``extended_precision``, which the finite-difference oracle uses.
_DTYPE = [np.float64]


@contextlib.contextmanager
def extended_precision():
    """Evaluate new Tensors in long double (80-bit on x86) inside the block."""
    _DTYPE.append(np.longdouble)
    try:
        yield
    finally:
        _DTYPE.pop()


class NonFiniteError(FloatingPointError):
    """Raised when a graph node holds NaN or inf values."""


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the Tensor side

    def __init__(self, data, parents=(), backward_fn=None, op="const",
                 requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_DTYPE[-1])
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param", name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def plain(result, *inputs):
    """Return ``result.data`` unless one of ``inputs`` was a Tensor."""
    if any(isinstance(x, Tensor) for x in inputs):
        return result
    return result.data


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, op, requires_grad=True)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k: float):
    a = as_tensor(a)
    return _node(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a):
    a = as_tensor(a)
    on = a.data > 0
    return _node(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def maximum(a, floor: float):
    """max(a, floor) against a constant floor; ties send no gradient to ``a``."""
    a = as_tensor(a)
    on = a.data > floor
    return _node(np.where(on, a.data, floor), (a,), lambda g: (g * on,), "maximum")


def clip(a, lo: float, hi: float):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def _sigmoid(x):
    x = np.asarray(x, dtype=_DTYPE[-1])
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logit_skip_sigmoid(r, c):
    """sigmoid(r + logit(c)) for c in (0, 1), evaluated in ratio form.

    c / (c + (1 - c) e^-r) is used instead of composing sigmoid and logit so
    that r == 0 returns c bit for bit.
    """
    r, c = as_tensor(r), as_tensor(c)
    rd, cd = np.broadcast_arrays(r.data, c.data)
    pos = rd >= 0
    e = np.exp(-np.abs(rd))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(pos, cd / (cd + (1.0 - cd) * e), cd * e / (cd * e + (1.0 - cd)))
    out = np.asarray(out, dtype=_DTYPE[-1])

    def back(g):
        ds = out * (1.0 - out)
        return (_unbroadcast(g * ds, r.shape),
                _unbroadcast(g * ds / (cd * (1.0 - cd)), c.shape))

    return _node(out, (r, c), back, "logit_skip_sigmoid")


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back, "getitem")


def stack(items, axis=0):
    items = [as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _node(out, items, back, "stack")


def concat(items, axis=0):
    items = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, items, back, "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), back, "matmul")


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gamma + beta


# -- convolution ----------------------------------------------------------------

def conv2d(x, w, b=None, stride=1):
    """3x3 (or kxk, odd k) convolution with replicate padding, channel-last.

    x: (B, H, W, Cin), w: (k, k, Cin, Cout), b: (Cout,).
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, Ho, Wo, Cin, k, k)
    out = np.tensordot(win, w.data, axes=([3, 4, 5], [2, 0, 1]))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)
    ho, wo = out.shape[1], out.shape[2]

    def back(g):
        gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # (Cin, k, k, Cout)
        gw = np.transpose(gw, (1, 2, 0, 3))
        gx = None
        if x.requires_grad:
            gwin = np.tensordot(g, w.data, axes=([3], [3]))  # (B, Ho, Wo, k, k, Cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gwin[:, :, :, i, j, :]
            gx = _fold_edge_pad(gxp, pad)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _node(out, parents, back, "conv2d")


def _fold_edge_pad(gp, pad):
    """Adjoint of replicate padding along axes 1 and 2."""
    if pad == 0:
        return gp
    g = gp.copy()
    g[:, pad, :, :] += g[:, :pad, :, :].sum(axis=1)
    g[:, -pad - 1, :, :] += g[:, -pad:, :, :].sum(axis=1)
    g = g[:, pad:-pad]
    g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
    g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
    return g[:, :, pad:-pad]


# -- backward -------------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, params=None, seed_grad=None):
    """Reverse-mode gradients of a scalar ``loss``.

    ``params`` maps names to leaf tensors; the result maps the same names to
    gradient arrays (zeros for leaves the loss does not depend on). Without
    ``params`` a dict keyed by ``id(tensor)`` is returned.
    """
    loss = as_tensor(loss)
    if seed_grad is None:
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss or an explicit seed_grad")
        seed_grad = np.ones_like(loss.data)
    order = _topo(loss) if loss.requires_grad else []
    for i, node in enumerate(order):
        if not np.all(np.isfinite(node.data)):
            raise NonFiniteError(f"non-finite value at node #{i} (op={node.op}, "
                                 f"name={node.name}, shape={node.data.shape})")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"non-finite loss (op={loss.op})")

    grads = {id(loss): np.asarray(seed_grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    if params is None:
        return grads
    return {name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
            for name, t in params.items()}
