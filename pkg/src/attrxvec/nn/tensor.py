"""A small reverse-mode differentiation engine over numpy arrays.

Graph nodes are created by the functions in this module; each keeps a
closure that maps the output gradient to parent gradients.  Only the
operations the TDNN/x-vector/cross-stitch networks need are provided, several
of them fused (splice, batch norm, statistics pooling, softmax cross-entropy)
so their backward passes stay cheap.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError, NumericError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}>"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DataError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(x, w):
    """x (..., K) @ w (K, M)."""
    x, w = as_tensor(x), as_tensor(w)

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _node(x.data @ w.data, (x, w), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,))


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def total(x):
    x = as_tensor(x)
    return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def splice(x, offsets):
    """Concatenate frames ``t + o`` for each offset along the feature axis.

    x is (B, T, D); the result is (B, T - span, len(offsets) * D) where
    span = max(offsets) - min(offsets) (valid convolution, no padding).
    """
    x = as_tensor(x)
    offsets = [int(o) for o in offsets]
    lo, hi = min(offsets), max(offsets)
    B, T, D = x.shape
    t_out = T - (hi - lo)
    if t_out < 1:
        raise DataError(f"input of {T} frames is shorter than the receptive field ({hi - lo + 1})")
    parts = [x.data[:, o - lo: o - lo + t_out] for o in offsets]
    out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)

    def backward(g):
        gx = np.zeros_like(x.data)
        for k, o in enumerate(offsets):
            gx[:, o - lo: o - lo + t_out] += g[:, :, k * D:(k + 1) * D]
        return (gx,)

    return _node(out, (x,), backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training=True, eps=1e-5,
              momentum=0.1, update_running=True):
    """Normalize over every axis but the last.

    ``running_mean``/``running_var`` are numpy buffers updated in place in
    training mode when ``update_running`` is set.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.data.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    if training:
        if n < 2:
            raise DataError("batch norm in training mode needs at least 2 samples")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv_std / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx, gg, gb

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def stats_pool(x, eps=1e-10):
    """(B, T, D) -> (B, 2D): per-dimension mean and population std over frames.

    The variance is floored at ``eps`` so the std never drops below sqrt(eps).
    """
    x = as_tensor(x)
    if x.shape[1] < 1:
        raise DataError("statistics pooling over zero frames")
    T = x.shape[1]
    mu = x.data.mean(axis=1)
    centered = x.data - mu[:, None, :]
    var = (centered ** 2).mean(axis=1)
    floored = var < eps
    std = np.sqrt(np.where(floored, eps, var))
    out = np.concatenate([mu, std], axis=1)

    def backward(g):
        D = x.shape[2]
        gmu, gstd = g[:, :D], g[:, D:]
        gvar = np.where(floored, 0.0, gstd / (2.0 * std))
        gx = gmu[:, None, :] / T + centered * (2.0 / T) * gvar[:, None, :]
        return (gx,)

    return _node(out, (x,), backward)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label], and the gradient wrt logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    single = logits.ndim == 1
    if single:
        logits, labels = logits[None, :], labels.reshape(1)
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise DataError(f"invalid labels for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad[0] if single else grad


def softmax_xent(logits, labels):
    """Tensor op: mean softmax cross-entropy of (N, C) logits."""
    logits = as_tensor(logits)
    loss, grad = softmax_cross_entropy(logits.data, labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), lambda g: (g * grad,))
