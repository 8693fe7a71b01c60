"""Perplexity, ensembles, sampling and beam search.

Everything here runs in evaluation mode: dropout is the identity and no tape is
recorded.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .data import batchify
from .errors import ConfigError, SamplingError, UsageError
from .model import LstmState, _stack_step, forward_sequence, regularized_step
from .numerics import Tensor, affine, embedding, log_softmax, softmax, stack_rows


def _as_list(models):
    return list(models) if isinstance(models, (list, tuple)) else [models]


def _check_compatible(models, vocabs=None):
    sizes = {m.V for m in models}
    if len(sizes) != 1:
        raise ConfigError(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")
    if vocabs is not None and any(v != vocabs[0] for v in vocabs[1:]):
        raise ConfigError("ensemble members were trained on different vocabularies")


def window_logits(params, inputs, state, drop=None):
    """Eval-mode logits ``[T*B, V]`` for one window plus the carried state."""
    heads = []
    for t in range(inputs.shape[0]):
        top, state = _stack_step(embedding(params.embedding, inputs[t]), state, params, drop, t)
        heads.append(top)
    logits = affine(params.output_W, params.output_b, stack_rows(heads))
    return logits.data, state


def token_nlls(models, tokens, B, T, drop=None):
    """Per-token NLL ``[windows, T, B]`` with states carried across windows.

    One model uses its log-softmax directly; several are combined by averaging
    their softmax distributions.
    """
    models = _as_list(models)
    _check_compatible(models)
    batched = batchify(tokens, B)
    if batched.num_windows(T) == 0:
        raise UsageError(f"corpus of {len(tokens)} tokens is too short for {T}x{B} windows")
    states = [LstmState.zeros(m.L, B, m.n) for m in models]
    out = []
    for inputs, targets in batched.windows(T):
        if len(models) == 1:
            losses, states[0] = forward_sequence(inputs, targets, states[0], models[0], drop)
            out.append(losses.data.reshape(T, B))
            continue
        mean = None
        for k, m in enumerate(models):
            logits, states[k] = window_logits(m, inputs, states[k], drop)
            p = softmax(logits)
            mean = p if mean is None else mean + p
        mean /= len(models)
        picked = mean[np.arange(mean.shape[0]), targets.reshape(-1)]
        out.append(-np.log(picked).reshape(T, B))
    return np.stack(out)


def perplexity(models, tokens, B, T, drop=None):
    """``exp(total NLL / predicted tokens)``; a list of models is evaluated as an ensemble."""
    if drop is not None and drop.training:
        raise UsageError("perplexity needs an eval-mode dropout config (or None)")
    nll = token_nlls(models, tokens, B, T, drop)
    return math.exp(math.fsum(nll.ravel()) / nll.size)


def ensemble_eval(models, tokens, B, T, vocabs=None):
    models = _as_list(models)
    if not models:
        raise UsageError("ensemble needs at least one model")
    _check_compatible(models, vocabs)
    return perplexity(models, tokens, B, T)


# ----------------------------------------------------------------- sampling

@dataclass
class SamplerConfig:
    prefix: list
    max_len: int = 50
    temperature: float = 1.0
    forbidden: frozenset = frozenset()
    seed: int = 0

    def validate(self, vocab):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_len < 0:
            raise ConfigError(f"max_len must be >= 0, got {self.max_len}")
        if vocab.eos in self.forbidden:
            raise ConfigError("<eos> cannot be forbidden")
        return self


def _feed(params, ids, state):
    logits = None
    for t, tok in enumerate(ids):
        x = embedding(params.embedding, np.array([tok]))
        logits, state = regularized_step(x, state, params, None, t)
    return logits, state


def filtered_distribution(logits, forbidden, temperature=1.0):
    """Softmax over permitted tokens only; forbidden entries are exactly 0."""
    z = np.array(logits, dtype=np.float64)
    allowed = np.ones(z.shape[-1], dtype=bool)
    allowed[list(forbidden)] = False
    if not allowed.any():
        raise SamplingError("every token is forbidden")
    z = np.where(allowed, z / temperature if temperature > 0 else z, -np.inf)
    p = softmax(z)
    p[~allowed] = 0.0
    return p


def sample(params, vocab, cfg):
    """Continue ``cfg.prefix`` (token ids).  Returns the generated ids.

    The prefix is fed after an ``<eos>`` so it is read as a sentence start.

    ``temperature == 0`` takes the argmax of the filtered distribution instead
    of sampling.  Generation stops after ``<eos>`` or ``max_len`` tokens.
    """
    cfg.validate(vocab)
    rng = np.random.default_rng(cfg.seed)
    prefix = [vocab.eos] + list(cfg.prefix)
    logits, state = _feed(params, prefix, LstmState.zeros(params.L, 1, params.n))
    out = []
    while len(out) < cfg.max_len:
        p = filtered_distribution(logits.data[0], cfg.forbidden, cfg.temperature)
        if cfg.temperature == 0:
            tok = int(np.argmax(p))
        else:
            tok = int(rng.choice(len(p), p=p))
        out.append(tok)
        if tok == vocab.eos:
            break
        logits, state = _feed(params, [tok], state)
    return out


# -------------------------------------------------------------- beam search

@dataclass
class BeamHypothesis:
    tokens: tuple
    logprob: float
    state: LstmState = field(repr=False, default=None)
    complete: bool = False

    def score(self, length_norm=False):
        return self.logprob / max(1, len(self.tokens)) if length_norm else self.logprob


def _rank_key(h, length_norm):
    return (-h.score(length_norm), h.tokens)


def _slice_state(state, rows):
    return LstmState([Tensor(h.data[rows]) for h in state.h], [Tensor(c.data[rows]) for c in state.c])


def beam_search(params, prefix, beam_width, max_len, eos, length_norm=False):
    """Best completed continuation of ``prefix`` under a width-``beam_width`` beam.

    Candidates are ranked by cumulative log-probability (optionally divided by
    length); equal scores fall back to lexicographic order of the token ids.
    Hypotheses that emit ``eos`` are set aside and the search continues until
    no live hypothesis remains or ``max_len`` tokens have been generated.  When
    nothing completed, the best live hypothesis is returned with
    ``complete=False``.
    """
    if beam_width < 1:
        raise UsageError(f"beam width must be >= 1, got {beam_width}")
    prefix = list(prefix)
    if not prefix:
        raise UsageError("beam search needs a non-empty prefix")
    logits, state = _feed(params, prefix, LstmState.zeros(params.L, 1, params.n))
    live = [BeamHypothesis((), 0.0, state)]
    lp = log_softmax(logits.data)
    done = []
    for step in range(max_len):
        base = np.array([h.logprob for h in live])
        scores = base[:, None] + lp
        flat = scores.ravel()
        k = min(beam_width, flat.size)
        if length_norm:
            ranked = flat / (step + 1)
        else:
            ranked = flat
        cut = np.partition(ranked, flat.size - k)[flat.size - k]
        idx = np.flatnonzero(ranked >= cut)
        V = lp.shape[1]
        cands = [BeamHypothesis(live[i // V].tokens + (int(i % V),), float(flat[i]),
                                None, int(i % V) == eos)
                 for i in idx]
        parents = {c.tokens: int(i // V) for c, i in zip(cands, idx)}
        chosen = heapq.nsmallest(k, cands, key=lambda h: _rank_key(h, length_norm))
        nxt = []
        for c in chosen:
            (done if c.complete else nxt).append(c)
        if not nxt:
            live = []
            break
        rows = np.array([parents[c.tokens] for c in nxt])
        toks = np.array([c.tokens[-1] for c in nxt])
        st = LstmState([Tensor(np.concatenate([h.state.h[l].data for h in live])) for l in range(params.L)],
                       [Tensor(np.concatenate([h.state.c[l].data for h in live])) for l in range(params.L)])
        st = _slice_state(st, rows)
        step_logits, st = regularized_step(embedding(params.embedding, toks), st, params, None)
        lp = log_softmax(step_logits.data)
        live = [BeamHypothesis(c.tokens, c.logprob, _slice_state(st, [j]))
                for j, c in enumerate(nxt)]
    if done:
        return min(done, key=lambda h: _rank_key(h, length_norm))
    return min(live, key=lambda h: _rank_key(h, length_norm))


def greedy_decode(params, prefix, max_len, eos):
    """Argmax continuation; stops after ``eos``."""
    logits, state = _feed(params, list(prefix), LstmState.zeros(params.L, 1, params.n))
    out, total_lp = [], 0.0
    for _ in range(max_len):
        lp = log_softmax(logits.data[0])
        tok = int(np.argmax(lp))
        out.append(tok)
        total_lp += float(lp[tok])
        if tok == eos:
            return BeamHypothesis(tuple(out), total_lp, state, True)
        logits, state = _feed(params, [tok], state)
    return BeamHypothesis(tuple(out), total_lp, state, False)


def sequence_logprob(params, prefix, tokens):
    """Sum of per-step log-softmax terms of ``tokens`` following ``prefix``."""
    logits, state = _feed(params, list(prefix), LstmState.zeros(params.L, 1, params.n))
    total_lp = 0.0
    for tok in tokens:
        total_lp += float(log_softmax(logits.data[0])[tok])
        logits, state = _feed(params, [tok], state)
    return total_lp
