"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the operations a small bidirectional encoder needs:
matmul, softmax, layer norm, GELU, embedding lookup, cross entropy and
the elementwise glue between them. Buffers are numpy float64 throughout;
gradients accumulate additively into ``Tensor.grad`` until cleared.

A computation graph is confined to one thread; tensors without recorded
history are freely shareable read-only.
"""
from __future__ import annotations

import math

import numpy as np

# tanh-approximation constant for GELU
_GELU_C = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Operations on tensors record a backward closure so that calling
    ``backward()`` on a scalar result fills ``grad`` on every
    participating tensor with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Gradients of ``requires_grad`` tensors accumulate additively
        across calls until ``zero_grad``.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                if g is not None and node.requires_grad:
                    _accumulate(node, g)
                continue
            if node.requires_grad:
                # a graph-internal tensor can itself be a tracked leaf
                if not node._parents:
                    _accumulate(node, g)
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves left in the map received no backward hook of their own
        for node in order:
            if id(node) in grads and node.requires_grad:
                _accumulate(node, grads.pop(id(node)))


def _accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_graph(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _record(out, parents, backward):
    if _needs_graph(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- primitive ops ------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _record(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _record(out, (a, b), backward)


def scale(a, factor):
    a = _as_tensor(a)
    out = Tensor(a.data * factor)

    def backward(g):
        return ((a, g * factor),)

    return _record(out, (a,), backward)


def matmul(a, b):
    """Matrix product; supports numpy-style batched operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.data.shape)), (b, _unbroadcast(gb, b.data.shape)))

    return _record(out, (a, b), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return ((a, g.reshape(a.data.shape)),)

    return _record(out, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def backward(g):
        return ((a, np.transpose(g, inverse)),)

    return _record(out, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp, a.data.shape).copy()),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def backward(g):
        return ((a, g * (1.0 - y * y)),)

    return _record(out, (a,), backward)


def gelu(a):
    """GELU with the tanh approximation (constant 0.044715)."""
    a = _as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return ((a, g * dx),)

    return _record(out, (a,), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((a, y * (g - dot)),)

    return _record(out, (a,), backward)


def layer_norm(a, gain, bias, eps=1e-12):
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    out = Tensor(x_hat * gain.data + bias.data)
    n = x.shape[-1]

    def backward(g):
        d_hat = g * gain.data
        term = d_hat - d_hat.mean(axis=-1, keepdims=True) - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        dx = term * inv_std
        reduce_axes = tuple(range(g.ndim - 1))
        d_gain = (g * x_hat).sum(axis=reduce_axes) if reduce_axes else g * x_hat
        d_bias = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        return (
            (a, dx),
            (gain, _unbroadcast(np.asarray(d_gain), gain.data.shape)),
            (bias, _unbroadcast(np.asarray(d_bias), bias.data.shape)),
        )

    return _record(out, (a, gain, bias), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; the gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _record(out, (table,), backward)


def select_position(a, pos):
    """Pick one sequence position from a [batch, positions, ...] tensor."""
    a = _as_tensor(a)
    out = Tensor(a.data[:, pos])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, pos] = g
        return ((a, ga),)

    return _record(out, (a,), backward)


def dropout(a, rate, rng):
    """Inverted dropout. ``rate`` 0 is the identity (default in tests)."""
    a = _as_tensor(a)
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)

    def backward(g):
        return ((a, g * keep),)

    return _record(out, (a,), backward)


def cross_entropy(logits, targets, ignore_id=-100):
    """Mean negative log-probability over positions not equal to ``ignore_id``.

    ``logits`` has class scores on the last axis; ``targets`` holds class ids
    of the matching leading shape. Raises if every position is ignored.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ValueError("targets shape must match logits leading dimensions")
    flat_logits = logits.data.reshape(-1, logits.data.shape[-1])
    flat_targets = targets.reshape(-1)
    keep = flat_targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored, mean undefined")
    if flat_targets[keep].min() < 0 or flat_targets[keep].max() >= flat_logits.shape[1]:
        raise ValueError("cross_entropy target id out of range")

    shifted = flat_logits - flat_logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(flat_logits.shape[0]), np.where(keep, flat_targets, 0)]
    loss = -(picked * keep).sum() / count
    out = Tensor(loss)

    def backward(g):
        probs = np.exp(log_probs)
        grad = probs.copy()
        grad[np.arange(flat_logits.shape[0]), np.where(keep, flat_targets, 0)] -= 1.0
        grad *= keep[:, None]
        grad *= float(g) / count
        return ((logits, grad.reshape(logits.data.shape)),)

    return _record(out, (logits,), backward)
