"""Define-by-run reverse-mode differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its inputs and a
local gradient rule. Nodes carry a global creation sequence number, so the
creation order is a valid topological order and :func:`backward` just walks
the reachable nodes from newest to oldest.

All arithmetic is float64.
"""
import contextlib
import itertools
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import DimensionError, UsageError, ValidationError

_seq = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("inputs", "backward_fn", "seq", "op")

    def __init__(self, inputs, backward_fn, op):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.op = op


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._node = None
        self.name = name

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

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(data, inputs, backward_fn, op="custom"):
    """Wrap ``data`` as the output of an operation.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    This is also the hook for registering new operations.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = Node(tuple(inputs), backward_fn, op)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- MAC accounting ---------------------------------------------------------

_mac_counters = []


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every matmul in the block by ``kind``."""
    counter = Counter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(kind, n):
    for c in _mac_counters:
        c[kind] += n
        c["total"] += n


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return apply_op(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)
    return apply_op(ad / bd, (a, b), bw, "div")


def exp(x):
    y = np.exp(x.data)
    return apply_op(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    return apply_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)
    return apply_op(xd * cdf, (x,), bw, "gelu")


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return apply_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- shape ------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return apply_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a1, a2):
    return apply_op(np.swapaxes(x.data, a1, a2), (x,),
                    lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, key):
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)
    return apply_op(x.data[key], (x,), bw, "getitem")


def permute_rows(x, order):
    """Reorder axis 1 of a (batch, n, ...) tensor by per-batch ``order`` (batch, n)."""
    order = np.asarray(order, dtype=np.int64)
    bidx = np.arange(x.shape[0])[:, None]
    inverse = np.argsort(order, axis=1)

    def bw(g):
        return (g[bidx, inverse],)
    return apply_op(x.data[bidx, order], (x,), bw, "permute_rows")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return apply_op(np.concatenate([t.data for t in tensors], axis=axis),
                    tuple(tensors), bw, "concat")


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return apply_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b, kind="projection"):
    """Matrix product with numpy broadcasting over leading (batch) axes.

    ``kind`` labels the multiply-accumulates for :func:`count_macs`.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    if _mac_counters:
        _record_macs(kind, int(np.prod(out.shape)) * ad.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return apply_op(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalization and probabilities ----------------------------------------

def softmax(x, axis=-1):
    """Max-subtracted softmax; NaN inputs propagate to NaN outputs."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return apply_op(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return apply_op(y, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs a last axis of at least 2, got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return apply_op(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits, targets, smoothing=0.0):
    """Mean label-smoothed cross-entropy of ``logits`` (b x c) against class indices."""
    if not 0.0 <= smoothing < 1.0:
        raise ValidationError(f"smoothing must lie in [0, 1), got {smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    b, c = logits.shape
    if targets.shape != (b,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValidationError(f"class index out of range for {c} classes: {targets.tolist()}")
    q = np.full((b, c), smoothing / c)
    q[np.arange(b), targets] += 1.0 - smoothing
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(q * logp).sum() / b

    def bw(g):
        return (g * (np.exp(logp) - q) / b,)
    return apply_op(np.asarray(loss), (logits,), bw, "cross_entropy")


def embedding(table, indices):
    """Gather rows of ``table``; backward scatter-adds into the rows used."""
    idx = np.asarray(indices, dtype=np.int64)
    rows, dim = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ValidationError(f"embedding index out of range for table with {rows} rows")

    def bw(g):
        full = np.zeros((rows, dim))
        kernels.scatter_add_rows(full, np.ascontiguousarray(idx.ravel()),
                                 np.ascontiguousarray(g.reshape(-1, dim)))
        return (full,)
    return apply_op(table.data[idx], (table,), bw, "embedding")


# -- backward ---------------------------------------------------------------

@dataclass
class Graph:
    """Operation records reachable from an output, in creation order."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out):
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append((node.seq, node, t))
            stack.extend(node.inputs)
        found.sort(key=lambda item: item[0])
        return cls(nodes=[n for _, n, _ in found], outputs=[t for _, _, t in found])


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node, out in zip(reversed(graph.nodes), reversed(graph.outputs)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = inp.grad + ig if inp.grad is not None else np.array(ig, dtype=np.float64)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    worst: dict
    tolerance: float

    @property
    def failures(self):
        return {k: v for k, v in self.worst.items() if not v <= self.tolerance}

    @property
    def ok(self):
        return not self.failures

    @property
    def max_error(self):
        return max(self.worst.values()) if self.worst else 0.0


def grad_check(fn, inputs, step=1e-5, tolerance=1e-6, floor=1e-6, names=None):
    """Compare analytic gradients of scalar ``fn()`` to central differences.

    ``inputs`` are the leaf tensors to perturb in place. The relative error of
    each element is ``|a - n| / max(|a|, |n|, floor)``; the report keeps the
    worst one per input.
    """
    inputs = list(inputs)
    if names is None:
        names = [t.name or f"input{i}" for i, t in enumerate(inputs)]
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() for t in inputs]
    worst = {}
    with no_grad():
        for name, t, ana in zip(names, inputs, analytic):
            flat = t.data.reshape(-1)
            num = np.empty(flat.shape[0])
            for i in range(flat.shape[0]):
                orig = flat[i]
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * step)
            a = ana.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            err = np.abs(a - num) / denom
            worst[name] = float(err.max()) if err.size else 0.0
    return GradCheckReport(worst=worst, tolerance=tolerance)
