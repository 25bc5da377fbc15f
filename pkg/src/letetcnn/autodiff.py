"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus a closure that maps the output cotangent to
parent cotangents. The op set is exactly what the network needs: dense
algebra, ReLU, sparse matvec, row gather, segment reductions, a grouped
softmax, and a numerically-stable binary cross-entropy. Gradients accumulate
into ``.grad`` of every tensor created with ``requires_grad=True``
(parameters and any tap the caller wants to inspect).
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self, seed=None):
        """Reverse pass from this tensor; seeds with ones unless given."""
        if seed is None:
            seed = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        cotangents = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if id(parent) in cotangents:
                    cotangents[id(parent)] = cotangents[id(parent)] + pg
                else:
                    cotangents[id(parent)] = pg


def _needs(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(g, shape):
    """Sum a gradient back down to the pre-broadcast shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(
        out,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(
        out,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(
        out,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    if not _needs(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(
        out,
        _parents=(a, b),
        _vjp=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    if not _needs(a):
        return Tensor(out)
    mask = a.data > 0
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * mask,))


def spmm(S, x: Tensor) -> Tensor:
    """Sparse (constant) matrix times dense tensor; gradient flows through x."""
    out = S.matmat(x.data)
    if not _needs(x):
        return Tensor(out)
    return Tensor(out, _parents=(x,), _vjp=lambda g: (S.csr_t @ g,))


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]
    if not _needs(x):
        return Tensor(out)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(out, _parents=(x,), _vjp=vjp)


def segment_sum(x: Tensor, seg_ids, n_segments: int) -> Tensor:
    """Sum rows of x into n_segments buckets."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    out = np.zeros((n_segments,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out, seg_ids, x.data)
    if not _needs(x):
        return Tensor(out)
    return Tensor(out, _parents=(x,), _vjp=lambda g: (g[seg_ids],))


def segment_mean(x: Tensor, seg_ids, n_segments: int) -> Tensor:
    """Average rows of x per bucket; every bucket must be non-empty."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    counts = np.bincount(seg_ids, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    sums = np.zeros((n_segments,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(sums, seg_ids, x.data)
    inv = (1.0 / counts).reshape((n_segments,) + (1,) * (x.data.ndim - 1))
    out = sums * inv
    if not _needs(x):
        return Tensor(out)
    return Tensor(out, _parents=(x,), _vjp=lambda g: ((g * inv)[seg_ids],))


def mean_rows(x: Tensor) -> Tensor:
    """Column means: (n, d) -> (d,)."""
    n = x.data.shape[0]
    if n < 1:
        raise ValueError("mean_rows: empty input")
    out = x.data.mean(axis=0)
    if not _needs(x):
        return Tensor(out)
    return Tensor(
        out, _parents=(x,), _vjp=lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),)
    )


def segment_softmax(e: Tensor, seg_ids, n_segments: int) -> Tensor:
    """Per-channel softmax within each segment of rows.

    Segment ids must be sorted ascending and cover every segment at least
    once (the radius graph's self-loops guarantee this).
    """
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    if np.any(np.diff(seg_ids) < 0):
        raise ValueError("segment_softmax: segment ids must be sorted")
    counts = np.bincount(seg_ids, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError("segment_softmax: empty segment")
    starts = np.zeros(n_segments, dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]

    m = np.maximum.reduceat(e.data, starts, axis=0)
    z = np.exp(e.data - m[seg_ids])
    denom = np.add.reduceat(z, starts, axis=0)
    out = z / denom[seg_ids]
    if not _needs(e):
        return Tensor(out)

    def vjp(g):
        inner = np.add.reduceat(out * g, starts, axis=0)
        return (out * (g - inner[seg_ids]),)

    return Tensor(out, _parents=(e,), _vjp=vjp)


def concat1d(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 1-D tensors."""
    av, bv = np.atleast_1d(a.data), np.atleast_1d(b.data)
    out = np.concatenate([av, bv])
    if not _needs(a, b):
        return Tensor(out)
    na = av.shape[0]
    return Tensor(
        out,
        _parents=(a, b),
        _vjp=lambda g: (g[:na].reshape(a.data.shape), g[na:].reshape(b.data.shape)),
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    out = np.asarray(a.data @ b.data)
    if not _needs(a, b):
        return Tensor(out)
    return Tensor(out, _parents=(a, b), _vjp=lambda g: (g * b.data, g * a.data))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logit: Tensor, label: float) -> Tensor:
    """Binary cross-entropy on a raw logit, log(1 + exp(-|z|)) formulation."""
    z = logit.data
    out = np.maximum(z, 0.0) - z * label + np.log1p(np.exp(-np.abs(z)))
    if not _needs(logit):
        return Tensor(out)
    return Tensor(
        out, _parents=(logit,), _vjp=lambda g: (g * (_sigmoid(z) - label),)
    )


def sigmoid_value(logit: Tensor) -> float:
    """Probability for a scalar logit (no tape participation)."""
    return float(_sigmoid(np.asarray(logit.data, dtype=np.float64).reshape(1))[0])
