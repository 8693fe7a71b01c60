"""Truncated BPTT with state carryover, clipped SGD and staged learning-rate decay."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .data import batchify
from .dropout import DropoutConfig
from .errors import ConfigError, NumericError, UsageError
from .model import LayerParams, LstmState, ModelParams, forward_sequence
from .numerics import Tape, Tensor, backward, total

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    n: int = 200
    L: int = 2
    unroll: int = 20
    batch_size: int = 20
    init_range: float = 0.1
    dropout: float = 0.0
    lr: float = 1.0
    decay_start: int = 4
    decay_factor: float = 2.0
    epochs: int = 13
    clip: float = 5.0
    seed: int = 0
    vocab_size: int = 10_000

    def validate(self):
        problems = []
        if self.n < 1 or self.L < 1 or self.unroll < 1 or self.batch_size < 1:
            problems.append("n, L, unroll and batch_size must be >= 1")
        if self.init_range < 0:
            problems.append(f"init_range must be >= 0, got {self.init_range}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.decay_factor <= 1.0:
            problems.append(f"decay_factor must exceed 1, got {self.decay_factor}")
        if self.clip <= 0:
            problems.append(f"clip must be positive, got {self.clip}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        elif self.epochs > 0 and not 1 <= self.decay_start <= self.epochs:
            problems.append(
                f"decay_start={self.decay_start} must lie in [1, epochs={self.epochs}]")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "medium": TrainConfig(n=650, L=2, unroll=35, batch_size=20, init_range=0.05, dropout=0.5,
                          lr=1.0, decay_start=6, decay_factor=1.2, epochs=39, clip=5.0),
    "large": TrainConfig(n=1500, L=2, unroll=35, batch_size=20, init_range=0.04, dropout=0.65,
                         lr=1.0, decay_start=14, decay_factor=1.15, epochs=55, clip=10.0),
    "baseline-small": TrainConfig(n=200, L=2, unroll=20, batch_size=20, init_range=0.1, dropout=0.0,
                                  lr=1.0, decay_start=4, decay_factor=2.0, epochs=13, clip=5.0),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides).validate()


def init_params(cfg, V, rng=None):
    """Uniform ``[-r, r]`` weights and embeddings, zero biases.

    Draw order follows the checkpoint tensor order, so a seed fixes every entry.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    r, n = cfg.init_range, cfg.n

    def u(*shape, name):
        return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True, name=name)

    def z(*shape, name):
        return Tensor(np.zeros(shape), requires_grad=True, name=name)

    emb = u(V, n, name="embedding")
    layers = [LayerParams(u(4 * n, 2 * n, name=f"layer{k}.W"), z(4 * n, name=f"layer{k}.b"))
              for k in range(1, cfg.L + 1)]
    return ModelParams(emb, layers, u(V, n, name="output.W"), z(V, name="output.b"))


def grad_norm(params, B):
    sq = math.fsum(float(np.vdot(t.grad, t.grad)) for t in params.tensors() if t.grad is not None)
    return math.sqrt(sq) / B


def clip_gradients(params, B, threshold):
    """Rescale all gradients jointly so that ``||grad / B||_2 <= threshold``.

    Gradients are loss-summed over the window; dividing by ``B`` gives the
    per-stream mean whose global norm is compared with ``threshold``.  Returns
    the factor applied (1.0 when nothing was clipped).
    """
    norm = grad_norm(params, B)
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for t in params.tensors():
        if t.grad is not None:
            t.grad *= factor
    return factor


def sgd_step(params, lr, B):
    for t in params.tensors():
        if t.grad is not None:
            t.data -= lr * (t.grad / B)


def lr_at_epoch(epoch, cfg):
    if not 1 <= epoch <= cfg.epochs:
        raise UsageError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.decay_start:
        return cfg.lr
    return cfg.lr / cfg.decay_factor ** (epoch - cfg.decay_start)


@dataclass
class EpochStats:
    mean_loss: float
    tokens: int
    clip_events: int
    windows: int

    @property
    def perplexity(self):
        return math.exp(self.mean_loss)


def window_gradients(params, inputs, targets, state, drop):
    """Forward + backward on one window; returns ``(summed NLL, final state)``.

    Gradients of ``sum(token losses)`` are accumulated into ``params``;
    :func:`clip_gradients` and :func:`sgd_step` apply the ``1 / B``.
    """
    with Tape() as tape:
        losses, final = forward_sequence(inputs, targets, state, params, drop)
        objective = total(losses)
    backward(tape, objective)
    return float(losses.data.sum()), final


def train_epoch(params, batched, state, cfg, lr, drop=None):
    """One pass over ``batched`` windows.  Returns ``(EpochStats, final_state)``."""
    T, B = cfg.unroll, batched.batch_size
    nll, tokens, clips, k = 0.0, 0, 0, 0
    for k, (inputs, targets) in enumerate(batched.windows(T)):
        params.zero_grad()
        window_nll, final = window_gradients(params, inputs, targets, state, drop)
        if not math.isfinite(window_nll):
            raise NumericError(f"non-finite training loss {window_nll} at window {k}")
        if clip_gradients(params, B, cfg.clip) < 1.0:
            clips += 1
        sgd_step(params, lr, B)
        params.zero_grad()
        state = final.detach()
        nll += window_nll
        tokens += inputs.size
    if tokens == 0:
        raise UsageError(f"corpus too short for a single {T}x{B} window")
    return EpochStats(nll / tokens, tokens, clips, k + 1), state


def train(cfg, corpus, checkpoint_sink=None, params=None, start_epoch=1, drop_counter=0):
    """Run epochs ``start_epoch..cfg.epochs``; returns ``(params, metrics)``.

    ``checkpoint_sink(epoch, params, progress, row)`` is called after every
    epoch; ``progress`` carries what a resumed run needs.  Passing ``params``,
    ``start_epoch`` and ``drop_counter`` from such a checkpoint continues the
    run exactly.
    """
    from .inference import perplexity

    cfg.validate()
    V = len(corpus.vocab)
    if params is None:
        params = init_params(cfg, V)
    if params.V != V:
        raise ConfigError(f"model vocabulary {params.V} != corpus vocabulary {V}")
    batched = batchify(corpus.train, cfg.batch_size)
    drop = DropoutConfig(cfg.dropout, training=True, seed=cfg.seed, counter=drop_counter)
    metrics = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg)
        state = LstmState.zeros(cfg.L, cfg.batch_size, cfg.n)
        stats, _ = train_epoch(params, batched, state, cfg, lr, drop)
        valid_ppl = None
        if corpus.valid is not None:
            valid_ppl = perplexity(params, corpus.valid, cfg.batch_size, cfg.unroll)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_ppl": stats.perplexity,
            "valid_ppl": valid_ppl,
            "wall_seconds": time.perf_counter() - t0,
            "grad_clip_events": stats.clip_events,
        }
        metrics.append(row)
        log.info("epoch %d lr %.4g train ppl %.3f valid ppl %s", epoch, lr, stats.perplexity,
                 "n/a" if valid_ppl is None else f"{valid_ppl:.3f}")
        if checkpoint_sink is not None:
            checkpoint_sink(epoch, params, {"epoch": epoch, "dropout_counter": drop.counter}, row)
    return params, metrics
