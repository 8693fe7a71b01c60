"""Dense float64 tensors with a reverse-mode tape.

Only the handful of ops the LSTM equations need are provided.  Vectors may carry
a leading batch dimension: an op defined on ``[n]`` also accepts ``[B, n]`` and
acts row-wise.

Usage::

    with Tape() as tape:
        y = affine(W, b, x)
        loss = total(y)
    backward(tape, loss)

Gradients accumulate (``+=``) into every leaf tensor with ``requires_grad``;
call :func:`zero_grad` between steps.  Once a tape has been backpropagated it
refuses new records until :meth:`Tape.reset`.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError, UsageError

__all__ = [
    "Tensor", "Tape", "Node", "backward", "zero_grad", "active_tape",
    "affine", "elementwise", "sigm", "tanh", "multiply", "add",
    "concat_rows", "slice_cols", "stack_rows", "embedding", "mask_multiply",
    "lstm_pointwise", "softmax_cross_entropy", "total", "scale", "softmax",
    "log_softmax",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded op: ``outputs = op(inputs)`` plus the rule mapping output grads to input grads."""

    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op, inputs, outputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


_STACK: list[Tape] = []


def active_tape():
    return _STACK[-1] if _STACK else None


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._producer: dict[int, int] = {}

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.remove(self)
        return False

    def reset(self):
        self.nodes.clear()
        self._producer.clear()
        self.consumed = False

    def record(self, op, inputs, outputs, backward_fn):
        if self.consumed:
            raise UsageError("tape was already backpropagated; call reset() before recording")
        self._producer.update((id(t), len(self.nodes)) for t in outputs)
        self.nodes.append(Node(op, inputs, outputs, backward_fn))

    def producer(self, tensor):
        """Index of the node that produced ``tensor``, or ``None`` for leaves."""
        return self._producer.get(id(tensor))

    def __len__(self):
        return len(self.nodes)


def _record(op, inputs, outputs, backward_fn):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for t in outputs:
        t.requires_grad = True
    tape.record(op, inputs, outputs, backward_fn)


def backward(tape, loss, grad=None):
    """Backpropagate from ``loss`` (a scalar produced on ``tape``)."""
    idx = tape.producer(loss)
    if idx is None:
        raise UsageError("loss tensor was not produced on this tape")
    if grad is None:
        if loss.data.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=np.float64).reshape(loss.shape)}
    for node in reversed(tape.nodes[:idx + 1]):
        outs = [grads.pop(id(t), None) for t in node.outputs]
        if all(g is None for g in outs):
            continue
        outs = [np.zeros_like(t.data) if g is None else g
                for g, t in zip(outs, node.outputs)]
        in_grads = node.backward_fn(*outs)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if tape.producer(t) is None:
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad += g
            else:
                key = id(t)
                grads[key] = g if key not in grads else grads[key] + g
    tape.consumed = True


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------- ops

def affine(W, b, x):
    """``x @ W.T + b`` for ``W[m, n]``, ``b[m]`` and ``x[n]`` or ``x[B, n]``."""
    if W.data.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != W.shape[1:]:
        raise DimensionError(
            f"affine: W{W.shape}, b{b.shape}, x{x.shape} are incompatible")
    out = Tensor(x.data @ W.data.T + b.data)

    def bw(g):
        x2 = np.atleast_2d(x.data)
        g2 = np.atleast_2d(g)
        return g2.T @ x2, g2.sum(axis=0), g @ W.data

    _record("affine", (W, b, x), (out,), bw)
    return out


def sigm(x):
    y = kernels.np_sigm(x.data)
    out = Tensor(y)
    _record("sigm", (x,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)
    _record("tanh", (x,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def multiply(a, b):
    _check_same(a, b, "multiply")
    out = Tensor(a.data * b.data)
    _record("multiply", (a, b), (out,), lambda g: (g * b.data, g * a.data))
    return out


def add(a, b):
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)
    _record("add", (a, b), (out,), lambda g: (g, g))
    return out


_ELEMENTWISE = {"sigm": sigm, "tanh": tanh, "multiply": multiply, "add": add}


def elementwise(op, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def concat_rows(a, b):
    """Stack two vectors end to end: ``a`` first, then ``b`` (per batch row)."""
    if a.shape[:-1] != b.shape[:-1] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: width mismatch {a.shape} vs {b.shape}")
    k = a.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    _record("concat", (a, b), (out,), lambda g: (g[..., :k], g[..., k:]))
    return out


def slice_cols(x, start, stop):
    out = Tensor(x.data[..., start:stop])

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    _record("slice", (x,), (out,), bw)
    return out


def stack_rows(xs):
    """Concatenate ``k`` tensors of shape ``[B, n]`` into ``[k*B, n]``."""
    widths = {x.shape[1:] for x in xs}
    if len(widths) != 1:
        raise DimensionError(f"stack_rows: inconsistent shapes {[x.shape for x in xs]}")
    sizes = [x.shape[0] for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=0))

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0))

    _record("stack", tuple(xs), (out,), bw)
    return out


def embedding(E, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {E.shape[0]}")
    out = Tensor(E.data[ids])

    def bw(g):
        dE = np.zeros_like(E.data)
        kernels.embedding_backward(ids.reshape(-1), g.reshape(-1, E.shape[1]), dE)
        return (dE,)

    _record("embedding", (E,), (out,), bw)
    return out


def mask_multiply(x, mask, op="mask"):
    """``x * mask`` with a constant mask; ``op`` labels the node on the tape."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise DimensionError(f"{op}: mask {mask.shape} vs input {x.shape}")
    out = Tensor(x.data * mask)
    _record(op, (x,), (out,), lambda g: (g * mask,))
    return out


def lstm_pointwise(pre, c_prev):
    """Fused gate nonlinearities and cell update.

    ``pre`` holds the four preactivation blocks ``(i, f, o, g)`` side by side;
    returns ``(h, c)``.
    """
    pre2 = np.atleast_2d(pre.data)
    cp2 = np.atleast_2d(c_prev.data)
    if pre2.shape[0] != cp2.shape[0] or pre2.shape[1] != 4 * cp2.shape[1]:
        raise DimensionError(
            f"lstm_pointwise: preactivations {pre.shape} vs cell {c_prev.shape}")
    acts, c, tanh_c, h = kernels.lstm_forward(np.ascontiguousarray(pre2),
                                              np.ascontiguousarray(cp2))
    shape = c_prev.shape
    h_out = Tensor(h.reshape(shape))
    c_out = Tensor(c.reshape(shape))

    def bw(dh, dc):
        dpre, dcp = kernels.lstm_backward(
            acts, cp2, tanh_c,
            np.ascontiguousarray(dh.reshape(cp2.shape)),
            np.ascontiguousarray(dc.reshape(cp2.shape)))
        return dpre.reshape(pre.shape), dcp.reshape(shape)

    _record("lstm", (pre, c_prev), (h_out, c_out), bw)
    return h_out, c_out


def softmax_cross_entropy(logits, target):
    """Per-row ``-log softmax(logits)[target]``; scalar for a single row."""
    single = logits.data.ndim == 1
    z = np.atleast_2d(logits.data)
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (z.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: {t.shape[0]} targets for {z.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError(f"target id out of range for {z.shape[1]} classes")
    losses, probs = kernels.xent_forward(np.ascontiguousarray(z), t)
    out = Tensor(losses[0] if single else losses)

    def bw(g):
        d = kernels.xent_backward(probs, t, np.atleast_1d(g).astype(np.float64))
        return (d[0] if single else d,)

    _record("xent", (logits,), (out,), bw)
    return out


def total(x):
    out = Tensor(x.data.sum())
    _record("sum", (x,), (out,), lambda g: (np.full_like(x.data, g),))
    return out


def scale(x, c):
    c = float(c)
    out = Tensor(x.data * c)
    _record("scale", (x,), (out,), lambda g: (g * c,))
    return out


def log_softmax(z):
    """Row-wise log-softmax of a plain array (no tape)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    shifted = np.exp(z - z.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)
