"""Classical RNN and LSTM cells and the deep LSTM language model.

Gate blocks inside a layer's fused affine map are ordered ``(i, f, o, g)``:
rows ``[0, n)`` feed the input gate, ``[n, 2n)`` the forget gate, ``[2n, 3n)``
the output gate and ``[3n, 4n)`` the tanh modulation.  The columns take the
layer-below activation first and the layer's own previous hidden state second.
Checkpoints depend on this order.

Dropout touches only the vertical connections: the embedding output entering
layer 1, each ``h^{l-1}_t`` entering layer ``l``, and ``h^L_t`` entering the
softmax head.  Recurrent inputs ``h^l_{t-1}`` and ``c^l_{t-1}`` are never masked.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dropout as dropout_mod
from .errors import ConfigError, DimensionError
from .numerics import (
    Tensor, add, affine, concat_rows, embedding, lstm_pointwise, multiply, sigm,
    slice_cols, softmax_cross_entropy, stack_rows, tanh,
)

GATE_ORDER = ("i", "f", "o", "g")


@dataclass
class LayerParams:
    W: Tensor
    b: Tensor

    @property
    def n(self):
        return self.b.shape[0] // 4

    def gate_rows(self, gate):
        k = GATE_ORDER.index(gate)
        return slice(k * self.n, (k + 1) * self.n)


@dataclass
class ModelParams:
    embedding: Tensor
    layers: list
    output_W: Tensor
    output_b: Tensor

    def __post_init__(self):
        self.validate()

    @property
    def V(self):
        return self.embedding.shape[0]

    @property
    def n(self):
        return self.embedding.shape[1]

    @property
    def L(self):
        return len(self.layers)

    def validate(self):
        V, n = self.embedding.shape
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.W.shape != (4 * n, 2 * n) or layer.b.shape != (4 * n,):
                raise DimensionError(
                    f"layer {k + 1}: W{layer.W.shape}, b{layer.b.shape}; expected ({4 * n}, {2 * n}), ({4 * n},)")
        if self.output_W.shape != (V, n) or self.output_b.shape != (V,):
            raise DimensionError(
                f"output head W{self.output_W.shape}, b{self.output_b.shape}; expected ({V}, {n}), ({V},)")

    def named_tensors(self):
        """Every parameter tensor in checkpoint order."""
        out = [("embedding", self.embedding)]
        for k, layer in enumerate(self.layers, start=1):
            out += [(f"layer{k}.W", layer.W), (f"layer{k}.b", layer.b)]
        out += [("output.W", self.output_W), ("output.b", self.output_b)]
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None

    def copy(self):
        def c(t):
            return Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
        return ModelParams(c(self.embedding), [LayerParams(c(l.W), c(l.b)) for l in self.layers],
                           c(self.output_W), c(self.output_b))

    @classmethod
    def zeros(cls, V, n, L):
        def z(*shape, name):
            return Tensor(np.zeros(shape), requires_grad=True, name=name)
        layers = [LayerParams(z(4 * n, 2 * n, name=f"layer{k}.W"), z(4 * n, name=f"layer{k}.b"))
                  for k in range(1, L + 1)]
        return cls(z(V, n, name="embedding"), layers, z(V, n, name="output.W"), z(V, name="output.b"))


@dataclass
class LstmState:
    h: list = field(default_factory=list)
    c: list = field(default_factory=list)

    @classmethod
    def zeros(cls, L, B, n):
        return cls([Tensor(np.zeros((B, n))) for _ in range(L)],
                   [Tensor(np.zeros((B, n))) for _ in range(L)])

    @property
    def L(self):
        return len(self.h)

    def detach(self):
        """Value-equal copy cut off from any tape (truncated BPTT boundary)."""
        return LstmState([t.detach() for t in self.h], [t.detach() for t in self.c])

    def shapes(self):
        return [t.shape for t in self.h + self.c]


@dataclass
class RnnLayerParams:
    """Two ``T_{n,n}`` maps of a classical RNN layer: from below and recurrent."""

    W_below: Tensor
    b_below: Tensor
    W_rec: Tensor
    b_rec: Tensor


def rnn_cell(h_below, h_prev, params, f="tanh"):
    pre = add(affine(params.W_below, params.b_below, h_below),
              affine(params.W_rec, params.b_rec, h_prev))
    if f == "tanh":
        return tanh(pre)
    if f == "sigm":
        return sigm(pre)
    raise ValueError(f"unknown activation {f!r}")


def lstm_cell(h_below, h_prev, c_prev, params):
    """One LSTM transition ``(h^{l-1}_t, h^l_{t-1}, c^l_{t-1}) -> (h^l_t, c^l_t)``."""
    if h_below.shape != h_prev.shape or h_prev.shape != c_prev.shape:
        raise DimensionError(
            f"lstm_cell: h_below{h_below.shape}, h_prev{h_prev.shape}, c_prev{c_prev.shape}")
    pre = affine(params.W, params.b, concat_rows(h_below, h_prev))
    return lstm_pointwise(pre, c_prev)


def lstm_cell_unfused(h_below, h_prev, c_prev, params):
    """Same map as :func:`lstm_cell`, spelled out with elementwise primitives."""
    n = params.n
    pre = affine(params.W, params.b, concat_rows(h_below, h_prev))
    i = sigm(slice_cols(pre, 0, n))
    f = sigm(slice_cols(pre, n, 2 * n))
    o = sigm(slice_cols(pre, 2 * n, 3 * n))
    g = tanh(slice_cols(pre, 3 * n, 4 * n))
    c = add(multiply(f, c_prev), multiply(i, g))
    h = multiply(o, tanh(c))
    return h, c


def _check_state(state, params):
    if state.L != params.L:
        raise ConfigError(f"state has {state.L} layers but model has {params.L}")


def _stack_step(x_emb, state, params, drop, t):
    """Run every layer for one timestep; return the dropped-out top activation and new state."""
    below = dropout_mod.apply(x_emb, drop, stream=(t, 0))
    hs, cs = [], []
    for l, layer in enumerate(params.layers):
        h, c = lstm_cell(below, state.h[l], state.c[l], layer)
        hs.append(h)
        cs.append(c)
        below = dropout_mod.apply(h, drop, stream=(t, l + 1))
    return below, LstmState(hs, cs)


def regularized_step(x_emb, state, params, drop, t=0):
    """One timestep of the regularized deep LSTM.

    ``drop`` may be ``None`` (no dropout code at all) or a ``DropoutConfig``.
    ``t`` only selects the mask stream.  Returns ``(logits, new_state)``.
    """
    _check_state(state, params)
    top, new_state = _stack_step(x_emb, state, params, drop, t)
    return affine(params.output_W, params.output_b, top), new_state


class SequenceTrace:
    """Per-timestep handles into the unrolled graph, for path instrumentation."""

    def __init__(self):
        self.inputs = []
        self.heads = []
        self.states = []


def forward_sequence(inputs, targets, init, params, drop, trace=None):
    """Unroll over a ``[T, B]`` window.

    Returns ``(losses, final_state)``; ``losses`` is a tensor of shape
    ``[T * B]`` ordered time-major (row ``t * B + b``).
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if inputs.ndim != 2 or inputs.shape != targets.shape:
        raise DimensionError(f"inputs {inputs.shape} and targets {targets.shape} must be equal [T, B]")
    state = init
    _check_state(state, params)
    T = inputs.shape[0]
    heads = []
    for t in range(T):
        x = embedding(params.embedding, inputs[t])
        top, state = _stack_step(x, state, params, drop, t)
        heads.append(top)
        if trace is not None:
            trace.inputs.append(x)
            trace.heads.append(top)
            trace.states.append(state)
    logits = affine(params.output_W, params.output_b, stack_rows(heads))
    losses = softmax_cross_entropy(logits, targets.reshape(-1))
    return losses, state
