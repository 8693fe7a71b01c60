"""Hot pointwise kernels: fused LSTM gate math, softmax cross-entropy, embedding scatter.

Every kernel exists twice, as a vectorized numpy function and as an explicit-loop
numba ``@njit`` function.  The numba variants are used when numba imports and
``LSTMDROP_DISABLE_NUMBA`` is unset (or ``0``); otherwise the numpy variants are
bound.  The two paths agree to rounding, not bit-for-bit, so a run is only
reproducible within one backend.

The numba backend still binds the numpy LSTM forward: its cost is five tanh
calls per unit, and numpy's SIMD tanh beats numba's scalar libm calls several
times over (see benchmarks/bench_kernels.py).  The njit version is kept for
the benchmark and the cross-backend tests.
"""
import os

import numpy as np

__all__ = [
    "BACKEND",
    "lstm_forward",
    "lstm_backward",
    "xent_forward",
    "xent_backward",
    "embedding_backward",
]


# ---------------------------------------------------------------- numpy path

def np_sigm(x):
    # tanh form: saturates to exact 0/1 without overflow warnings
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def np_lstm_forward(pre, c_prev):
    n = c_prev.shape[1]
    acts = np.empty_like(pre)
    acts[:, :3 * n] = np_sigm(pre[:, :3 * n])
    acts[:, 3 * n:] = np.tanh(pre[:, 3 * n:])
    i = acts[:, :n]
    f = acts[:, n:2 * n]
    o = acts[:, 2 * n:3 * n]
    g = acts[:, 3 * n:]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return acts, c, tanh_c, h


def np_lstm_backward(acts, c_prev, tanh_c, dh, dc):
    n = c_prev.shape[1]
    i = acts[:, :n]
    f = acts[:, n:2 * n]
    o = acts[:, 2 * n:3 * n]
    g = acts[:, 3 * n:]
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dpre = np.empty_like(acts)
    dpre[:, :n] = dct * g * i * (1.0 - i)
    dpre[:, n:2 * n] = dct * c_prev * f * (1.0 - f)
    dpre[:, 2 * n:3 * n] = dh * tanh_c * o * (1.0 - o)
    dpre[:, 3 * n:] = dct * i * (1.0 - g * g)
    return dpre, dct * f


def np_xent_forward(logits, targets):
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    z = ex.sum(axis=1)
    probs = ex / z[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(z) - shifted[rows, targets]
    return losses, probs


def np_xent_backward(probs, targets, g):
    d = probs * g[:, None]
    d[np.arange(probs.shape[0]), targets] -= g
    return d


def np_embedding_backward(ids, grad, out):
    np.add.at(out, ids, grad)


# ---------------------------------------------------------------- numba path

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def sigm(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    @njit(cache=True)
    def lstm_forward(pre, c_prev):
        rows, n = c_prev.shape
        acts = np.empty_like(pre)
        c = np.empty_like(c_prev)
        tanh_c = np.empty_like(c_prev)
        h = np.empty_like(c_prev)
        for r in range(rows):
            for j in range(n):
                i = sigm(pre[r, j])
                f = sigm(pre[r, n + j])
                o = sigm(pre[r, 2 * n + j])
                g = np.tanh(pre[r, 3 * n + j])
                acts[r, j] = i
                acts[r, n + j] = f
                acts[r, 2 * n + j] = o
                acts[r, 3 * n + j] = g
                cc = f * c_prev[r, j] + i * g
                tc = np.tanh(cc)
                c[r, j] = cc
                tanh_c[r, j] = tc
                h[r, j] = o * tc
        return acts, c, tanh_c, h

    @njit(cache=True)
    def lstm_backward(acts, c_prev, tanh_c, dh, dc):
        rows, n = c_prev.shape
        dpre = np.empty_like(acts)
        dc_prev = np.empty_like(c_prev)
        for r in range(rows):
            for j in range(n):
                i = acts[r, j]
                f = acts[r, n + j]
                o = acts[r, 2 * n + j]
                g = acts[r, 3 * n + j]
                tc = tanh_c[r, j]
                dct = dc[r, j] + dh[r, j] * o * (1.0 - tc * tc)
                dpre[r, j] = dct * g * i * (1.0 - i)
                dpre[r, n + j] = dct * c_prev[r, j] * f * (1.0 - f)
                dpre[r, 2 * n + j] = dh[r, j] * tc * o * (1.0 - o)
                dpre[r, 3 * n + j] = dct * i * (1.0 - g * g)
                dc_prev[r, j] = dct * f
        return dpre, dc_prev

    @njit(cache=True)
    def xent_forward(logits, targets):
        rows, v = logits.shape
        probs = np.empty_like(logits)
        losses = np.empty(rows)
        for r in range(rows):
            m = logits[r, 0]
            for k in range(1, v):
                if logits[r, k] > m:
                    m = logits[r, k]
            z = 0.0
            for k in range(v):
                e = np.exp(logits[r, k] - m)
                probs[r, k] = e
                z += e
            for k in range(v):
                probs[r, k] /= z
            losses[r] = np.log(z) - (logits[r, targets[r]] - m)
        return losses, probs

    @njit(cache=True)
    def xent_backward(probs, targets, g):
        rows, v = probs.shape
        d = np.empty_like(probs)
        for r in range(rows):
            for k in range(v):
                d[r, k] = probs[r, k] * g[r]
            d[r, targets[r]] -= g[r]
        return d

    @njit(cache=True)
    def embedding_backward(ids, grad, out):
        rows, n = grad.shape
        for r in range(rows):
            t = ids[r]
            for j in range(n):
                out[t, j] += grad[r, j]

    return lstm_forward, lstm_backward, xent_forward, xent_backward, embedding_backward


NUMPY_KERNELS = (np_lstm_forward, np_lstm_backward, np_xent_forward,
                 np_xent_backward, np_embedding_backward)

try:
    NUMBA_KERNELS = _build_numba()
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    NUMBA_KERNELS = None


def _want_numba():
    flag = os.environ.get("LSTMDROP_DISABLE_NUMBA", "0").strip().lower()
    return NUMBA_KERNELS is not None and flag in ("", "0", "false", "no")


if _want_numba():
    BACKEND = "numba"
    (_, lstm_backward, xent_forward,
     xent_backward, embedding_backward) = NUMBA_KERNELS
    lstm_forward = np_lstm_forward
else:
    BACKEND = "numpy"
    (lstm_forward, lstm_backward, xent_forward,
     xent_backward, embedding_backward) = NUMPY_KERNELS
