"""Corpus ingestion, vocabularies and continuous batching.

Text files are whitespace-tokenized with one sentence per line; every line
contributes its tokens followed by ``<eos>``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError

EOS = "<eos>"
UNK = "<unk>"
SEP = "<sep>"
DEFAULT_VOCAB_SIZE = 10_000


class Vocabulary:
    """Bijective token <-> id map.  Reserved tokens take the lowest ids."""

    def __init__(self, tokens):
        self.itos = list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("vocabulary contains duplicate tokens")
        for tok in (EOS, UNK):
            if tok not in self.stoi:
                raise ConfigError(f"vocabulary lacks reserved token {tok}")

    @classmethod
    def build(cls, lines, max_size=DEFAULT_VOCAB_SIZE, translation=False):
        """Frequency-ordered vocabulary; ties break lexicographically."""
        reserved = [EOS, UNK] + ([SEP] if translation else [])
        if max_size < len(reserved):
            raise ConfigError(f"vocabulary size {max_size} cannot hold reserved tokens")
        counts = Counter(tok for line in lines for tok in line.split())
        for tok in reserved:
            counts.pop(tok, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [tok for tok, _ in ranked[:max_size - len(reserved)]]
        return cls(reserved + words)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def eos(self):
        return self.stoi[EOS]

    @property
    def unk(self):
        return self.stoi[UNK]

    @property
    def sep(self):
        try:
            return self.stoi[SEP]
        except KeyError:
            raise UsageError("vocabulary was not built in translation mode (no <sep>)") from None

    @property
    def translation(self):
        return SEP in self.stoi

    def encode(self, tokens):
        unk = self.unk
        return [self.stoi.get(tok, unk) for tok in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def detokenize(self, ids):
        return " ".join(self.decode(ids))

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def read_lines(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise UsageError(f"corpus {path} is empty")
    return lines


def encode_lines(lines, vocab):
    out = []
    for line in lines:
        out.extend(vocab.encode(line.split()))
        out.append(vocab.eos)
    return np.asarray(out, dtype=np.int64)


def load_corpus(path, vocab=None, max_size=DEFAULT_VOCAB_SIZE):
    """Read ``path`` into an id array; builds the vocabulary when none is given."""
    lines = read_lines(path)
    if vocab is None:
        vocab = Vocabulary.build(lines, max_size)
    return encode_lines(lines, vocab), vocab


def concat_pairs(source_lines, target_lines, vocab):
    """Chain ``source <sep> target <eos>`` for every aligned pair."""
    if len(source_lines) != len(target_lines):
        raise UsageError(
            f"{len(source_lines)} source lines but {len(target_lines)} target lines")
    sep, eos = vocab.sep, vocab.eos
    out = []
    for src, tgt in zip(source_lines, target_lines):
        out.extend(vocab.encode(src.split()))
        out.append(sep)
        out.extend(vocab.encode(tgt.split()))
        out.append(eos)
    return np.asarray(out, dtype=np.int64)


def load_pairs(source_path, target_path, vocab=None, max_size=DEFAULT_VOCAB_SIZE):
    src, tgt = read_lines(source_path), read_lines(target_path)
    if vocab is None:
        vocab = Vocabulary.build(src + tgt, max_size, translation=True)
    return concat_pairs(src, tgt, vocab), vocab


@dataclass(frozen=True)
class BatchedCorpus:
    """``[rows, B]`` id matrix; column ``c`` is one contiguous slice of the corpus."""

    matrix: np.ndarray

    @property
    def batch_size(self):
        return self.matrix.shape[1]

    @property
    def rows(self):
        return self.matrix.shape[0]

    def num_windows(self, T):
        return (self.rows - 1) // T

    def windows(self, T):
        """Yield ``(inputs, targets)`` pairs of shape ``[T, B]``; targets lead by one row."""
        for k in range(self.num_windows(T)):
            lo = k * T
            yield self.matrix[lo:lo + T], self.matrix[lo + 1:lo + T + 1]

    def num_targets(self, T):
        return self.num_windows(T) * T * self.batch_size


def batchify(tokens, B):
    tokens = np.asarray(tokens, dtype=np.int64)
    if B < 1:
        raise UsageError(f"batch size must be >= 1, got {B}")
    if len(tokens) < 2 * B:
        raise UsageError(f"{len(tokens)} tokens cannot fill {B} streams of length >= 2")
    rows = len(tokens) // B
    return BatchedCorpus(np.ascontiguousarray(tokens[:rows * B].reshape(B, rows).T))


@dataclass
class Corpus:
    """Train/validation/test id arrays sharing one vocabulary."""

    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray | None = None
    test: np.ndarray | None = None

    def split(self, name):
        arr = getattr(self, name, None)
        if arr is None:
            raise UsageError(f"corpus has no {name!r} split")
        return arr


_SPLIT_FILES = {
    "train": ("ptb.train.txt", "train.txt"),
    "valid": ("ptb.valid.txt", "valid.txt"),
    "test": ("ptb.test.txt", "test.txt"),
}


def find_split(data_dir, split, suffix=None):
    data_dir = Path(data_dir)
    if suffix is not None:
        p = data_dir / f"{split}.{suffix}"
        return p if p.exists() else None
    for name in _SPLIT_FILES[split]:
        if (data_dir / name).exists():
            return data_dir / name
    return None


def is_translation_dir(data_dir):
    return find_split(data_dir, "train", "src") is not None


def load_data_dir(data_dir, vocab=None, max_size=DEFAULT_VOCAB_SIZE):
    """Load a directory of ``{train,valid,test}`` text files (or ``.src``/``.tgt`` pairs)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise OSError(f"data directory {data_dir} does not exist")
    if is_translation_dir(data_dir):
        train, vocab = load_pairs(data_dir / "train.src", data_dir / "train.tgt", vocab, max_size)
        splits = {}
        for name in ("valid", "test"):
            src = find_split(data_dir, name, "src")
            splits[name] = None if src is None else load_pairs(
                src, data_dir / f"{name}.tgt", vocab)[0]
        return Corpus(vocab, train, **splits)
    path = find_split(data_dir, "train")
    if path is None:
        raise OSError(f"no training file in {data_dir} (expected one of {_SPLIT_FILES['train']})")
    train, vocab = load_corpus(path, vocab, max_size)
    splits = {}
    for name in ("valid", "test"):
        p = find_split(data_dir, name)
        splits[name] = None if p is None else load_corpus(p, vocab)[0]
    return Corpus(vocab, train, **splits)


# ------------------------------------------------------------ generated text

def toy_lines(num_tokens, vocab_size=20, period=50, sentence=10, seed=0):
    """Periodic text of ``num_tokens`` tokens (``<eos>`` included).

    One random passage of ``period`` tokens repeats, so a model can drive the
    training perplexity close to 1.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{k}" for k in range(vocab_size)]
    n_sent = max(1, period // sentence)
    passage = [" ".join(words[k] for k in rng.choice(vocab_size, size=sentence - 1))
               for _ in range(n_sent)]
    lines, count, k = [], 0, 0
    while count < num_tokens:
        toks = passage[k % n_sent].split()[:num_tokens - count - 1]
        lines.append(" ".join(toks))
        count += len(toks) + 1
        k += 1
    return lines


def markov_lines(num_tokens, vocab_size=2000, fanout=12, mix=0.15,
                 mean_len=20, seed=0):
    """Sentences from a sparse random first-order Markov source over Zipfian words.

    Each word moves to one of ``fanout`` successors (Zipf-weighted over a
    uniformly drawn private set) with probability ``1 - mix``, else to a global
    Zipf draw.  Sentence length is
    geometric with mean ``mean_len``.  Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, vocab_size + 1)
    unigram = 1.0 / ranks
    unigram /= unigram.sum()
    succ = np.stack([rng.choice(vocab_size, size=fanout, replace=False)
                     for _ in range(vocab_size)])
    w_succ = 1.0 / np.arange(1, fanout + 1)
    w_succ /= w_succ.sum()
    words = [f"t{k}" for k in range(vocab_size)]
    lines, count = [], 0
    while count < num_tokens:
        length = min(int(rng.geometric(1.0 / mean_len)), num_tokens - count - 1)
        cur = rng.choice(vocab_size, p=unigram)
        toks = []
        for _ in range(length):
            toks.append(words[cur])
            if rng.random() < mix:
                cur = rng.choice(vocab_size, p=unigram)
            else:
                cur = succ[cur, rng.choice(fanout, p=w_succ)]
        lines.append(" ".join(toks))
        count += len(toks) + 1
    return lines


def copy_task_lines(num_pairs, alphabet=4, max_len=3, seed=0):
    """Aligned (source, target) lines where target == source."""
    rng = np.random.default_rng(seed)
    letters = [chr(ord("a") + k) for k in range(alphabet)]
    src = []
    for _ in range(num_pairs):
        k = int(rng.integers(1, max_len + 1))
        src.append(" ".join(letters[j] for j in rng.integers(0, alphabet, size=k)))
    return src, list(src)
