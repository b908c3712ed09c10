"""Dense float64 arrays with reverse-mode automatic differentiation.

Every operation returns a :class:`Node` holding its forward value and a
closure that maps the output gradient to gradients for each parent.  Only two
kinds of broadcasting are supported: a Python scalar against any array, and
the explicit row-vector ops :func:`add_rowvec` / :func:`linear`.
"""
import math

import numpy as np
from scipy.special import erf

from posmask import kernels

DTYPE = np.float64
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "name", "op")

    def __init__(self, value, parents=(), backward_fn=None, name=None, op="leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self._grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.value)

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name=None):
    return Node(np.array(value, dtype=DTYPE), name=name)


def constant(value):
    return Node(value, op="const")


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from ``loss``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g if node._grad is not None else g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    if not isinstance(b, Node):
        a = _as_node(a)
        return Node(a.value + b, (a,), lambda g: (g,), op="add")
    a = _as_node(a)
    _check_same("add", a, b)
    return Node(a.value + b.value, (a, b), lambda g: (g, g), op="add")


def sub(a, b):
    if not isinstance(b, Node):
        return Node(a.value - b, (a,), lambda g: (g,), op="sub")
    _check_same("sub", a, b)
    return Node(a.value - b.value, (a, b), lambda g: (g, -g), op="sub")


def scale(a, c):
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,), op="scale")


def mul(a, b):
    if not isinstance(b, Node):
        return scale(a, b)
    a = _as_node(a)
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (g * bv, g * av), op="mul")


def exp(a):
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,), op="exp")


def log(a):
    av = a.value
    return Node(np.log(av), (a,), lambda g: (g / av,), op="log")


def tanh(a):
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),), op="tanh")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def gelu(a):
    # exact erf form, as in BERT
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return Node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), op="gelu")


def elementwise(op, *args):
    """Dispatch by name: add, sub, mul, scale, exp, tanh, gelu (plus log, sigmoid)."""
    table = {
        "add": add, "sub": sub, "mul": mul, "scale": scale,
        "exp": exp, "tanh": tanh, "gelu": gelu, "log": log, "sigmoid": sigmoid,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions / shape


def sum_all(a):
    shape = a.shape
    return Node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), op="sum")


def mean_all(a):
    n = a.value.size
    shape = a.shape
    return Node(a.value.mean(), (a,), lambda g: (np.full(shape, float(g) / n),), op="mean")


def reshape(a, shape):
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), op="reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return Node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), op="transpose")


def gather_rows(table, idx):
    """Rows ``table[idx]`` of a 2-D node; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        label = table.name or "table"
        raise IndexError(f"index {bad} out of range for {label} with {n_rows} rows")
    flat = idx.ravel()
    d = table.shape[1]

    def bw(g):
        return (kernels.scatter_add_rows(n_rows, flat, g.reshape(-1, d)),)

    return Node(table.value[flat].reshape(idx.shape + (d,)), (table,), bw, op="gather")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are incompatible")

    def bw(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return Node(av @ bv, (a, b), bw, op="matmul")


def add_rowvec(x, b):
    """``x + b`` with ``b`` a 1-D node matching the last dimension of ``x``."""
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} and {b.shape}")
    axes = tuple(range(x.value.ndim - 1))
    return Node(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=axes)), op="add_rowvec")


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add_rowvec(out, b)


def softmax(x, additive_mask=None):
    """Row softmax over the last axis; ``additive_mask`` is a constant array."""
    z = x.value if additive_mask is None else x.value + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Node(out, (x,), bw, op="softmax")


def layer_norm(x, gain, bias, eps=1e-12):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {d}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    axes = tuple(range(xv.ndim - 1))

    def bw(g):
        gh = g * gv
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Node(xhat * gv + bias.value, (x, gain, bias), bw, op="layer_norm")


def dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Node(x.value * keep, (x,), lambda g: (g * keep,), op="dropout")


# ---------------------------------------------------------------- losses


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets, ignore_index=-100):
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {lv.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (lv.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} vs logits {lv.shape}")
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        return Node(0.0, (logits,), lambda g: (np.zeros_like(lv),), op="cross_entropy")
    rows = np.nonzero(keep)[0]
    cls = targets[rows]
    if cls.min() < 0 or cls.max() >= lv.shape[1]:
        raise IndexError(f"cross entropy target outside [0, {lv.shape[1]})")
    logp = log_softmax_np(lv[rows])
    loss = -logp[np.arange(n), cls].mean()

    def bw(g):
        d = np.zeros_like(lv)
        p = np.exp(logp)
        p[np.arange(n), cls] -= 1.0
        d[rows] = p * (float(g) / n)
        return (d,)

    return Node(loss, (logits,), bw, op="cross_entropy")


def smooth_l1(pred, target, beta=1.0):
    """Mean Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta outside."""
    if beta <= 0:
        raise ValueError("smooth_l1 needs beta > 0")
    pv = pred.value
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pv.shape:
        raise ShapeError(f"smooth_l1: pred {pv.shape} vs target {target.shape}")
    n = pv.size
    if n == 0:
        return Node(0.0, (pred,), lambda g: (np.zeros_like(pv),), op="smooth_l1")
    d = pv - target
    ad = np.abs(d)
    small = ad < beta
    per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    slope = np.where(small, d / beta, np.sign(d))
    return Node(per.mean(), (pred,), lambda g: (slope * (float(g) / n),), op="smooth_l1")
