"""Inverted dropout with counter-addressed, reproducible masks.

A mask is a pure function of ``(seed, counter, stream)``: the seed and draw
counter feed a ``SeedSequence`` whose spawn key also carries an optional
``stream`` tuple naming the site (the model passes ``(timestep, layer)``).
Philox then generates the uniforms, and an element survives when its uniform is
``>= p``.  Survivors are scaled by ``1 / (1 - p)`` so evaluation is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .numerics import mask_multiply

__all__ = ["DropoutConfig", "MaskTrace", "draw_mask", "apply", "mask_path_counts"]


@dataclass
class DropoutConfig:
    p: float = 0.0
    training: bool = True
    seed: int = 0
    counter: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p}")

    @property
    def mode(self):
        return "train" if self.training else "eval"

    def eval(self):
        """Evaluation-mode copy sharing the seed; never draws."""
        return DropoutConfig(self.p, False, self.seed, self.counter)

    def snapshot(self):
        return self.counter

    def restore(self, counter):
        self.counter = counter


def _rng(seed, counter, stream):
    key = (int(counter),) + tuple(int(s) for s in stream)
    ss = np.random.SeedSequence(int(seed) % (1 << 64), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def draw_mask(shape, cfg, stream=()):
    if not cfg.training:
        raise UsageError("draw_mask called in eval mode")
    if not 0.0 <= cfg.p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {cfg.p}")
    if np.ndim(shape) == 0:
        shape = (int(shape),)
    if min(shape, default=0) <= 0:
        raise UsageError(f"mask shape must be positive, got {shape}")
    u = _rng(cfg.seed, cfg.counter, stream).random(shape)
    cfg.counter += 1
    if cfg.p == 0.0:
        return np.ones(shape)
    return np.where(u >= cfg.p, 1.0 / (1.0 - cfg.p), 0.0)


def apply(x, cfg, stream=()):
    """``D(x)``: identity in eval mode (or with ``p == 0``), else ``x * mask``."""
    if cfg is None or not cfg.training or cfg.p == 0.0:
        return x
    return mask_multiply(x, draw_mask(x.shape, cfg, stream), op="dropout")


@dataclass(frozen=True)
class MaskTrace:
    """Fewest and most dropout applications over all graph paths between two tensors."""

    min_count: int
    max_count: int

    @property
    def count(self):
        if self.min_count != self.max_count:
            raise ValueError(f"path-dependent count: {self.min_count}..{self.max_count}")
        return self.min_count


def mask_path_counts(tape, source, target, op="dropout"):
    """Count ``op`` nodes on every path from ``source`` to ``target`` through ``tape``.

    Returns ``None`` if ``target`` does not depend on ``source``.
    """
    reach = {id(source): (0, 0)}
    for node in tape.nodes:
        hits = [reach[id(t)] for t in node.inputs if id(t) in reach]
        if not hits:
            continue
        bump = int(node.op == op)
        lo = min(h[0] for h in hits) + bump
        hi = max(h[1] for h in hits) + bump
        for t in node.outputs:
            prev = reach.get(id(t))
            reach[id(t)] = (lo, hi) if prev is None else (min(prev[0], lo), max(prev[1], hi))
    got = reach.get(id(target))
    return None if got is None else MaskTrace(*got)
