"""Command-line entry point: ``lstmdrop {prepare,train,eval,sample,translate}``.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .data import (
    DEFAULT_VOCAB_SIZE, Corpus, Vocabulary, encode_lines, is_translation_dir, load_data_dir,
    toy_lines,
)
from .errors import CheckpointError, ConfigError, LabError, UsageError
from .inference import SamplerConfig, beam_search, ensemble_eval, sample
from .training import PRESETS, TrainConfig, init_params, train

log = logging.getLogger("lstmdrop")

DEFAULT_FORBID = ("<unk>", "N", "$")
METRIC_FIELDS = ("epoch", "lr", "train_ppl", "valid_ppl", "grad_clip_events")

# flag dest -> TrainConfig field
OVERRIDES = {
    "epochs": "epochs", "dropout": "dropout", "unroll": "unroll", "batch_size": "batch_size",
    "lr": "lr", "clip": "clip", "seed": "seed", "hidden": "n", "layers": "L",
    "init_range": "init_range", "decay_start": "decay_start", "decay_factor": "decay_factor",
    "vocab_size": "vocab_size",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Interrupted(Exception):
    pass


def parse_count(text):
    """``"1k"`` -> 1000, ``"2M"`` -> 2000000, plain integers pass through."""
    m = re.fullmatch(r"\s*(\d+)\s*([kKmM]?)\s*", str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"not a token count: {text!r}")
    return int(m.group(1)) * {"": 1, "k": 1000, "m": 1_000_000}[m.group(2).lower()]


def build_parser():
    p = _Parser(prog="lstmdrop",
                description="Train, evaluate and decode deep LSTM language models with dropout.",
                epilog="exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error, 3 I/O error")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pr = sub.add_parser("prepare", help="build the vocabulary and report token counts")
    pr.add_argument("--data-dir", required=True)
    pr.add_argument("--vocab-size", type=int, default=None)
    pr.add_argument("--out-dir")

    tr = sub.add_parser("train", help="train a model, writing checkpoints and metrics")
    tr.add_argument("--data-dir")
    tr.add_argument("--toy-corpus", type=parse_count, metavar="N",
                    help="train on a generated periodic corpus of N tokens instead of --data-dir")
    tr.add_argument("--preset", choices=sorted(PRESETS))
    tr.add_argument("--config", help="JSON file of TrainConfig fields")
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--stop-after", type=int, metavar="EPOCH",
                    help="stop after this epoch (resume later with --resume)")
    tr.add_argument("--checkpoint-every", type=int, default=1, metavar="K",
                    help="write a checkpoint every K epochs; the last epoch is always written")
    for flag, typ in [("--seed", int), ("--epochs", int), ("--dropout", float), ("--unroll", int),
                      ("--batch-size", int), ("--lr", float), ("--clip", float), ("--hidden", int),
                      ("--layers", int), ("--init-range", float), ("--decay-start", int),
                      ("--decay-factor", float), ("--vocab-size", int)]:
        tr.add_argument(flag, type=typ)

    ev = sub.add_parser("eval", help="perplexity of one checkpoint or an ensemble")
    ev.add_argument("--checkpoint", action="append", required=True)
    ev.add_argument("--data-dir")
    ev.add_argument("--toy-corpus", type=parse_count, metavar="N")
    ev.add_argument("--split", action="append", choices=["train", "valid", "test"])
    ev.add_argument("--batch-size", type=int)
    ev.add_argument("--unroll", type=int)
    ev.add_argument("--out-dir")

    sa = sub.add_parser("sample", help="sample a continuation of a prefix")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--prefix", default="")
    sa.add_argument("--max-len", type=int, default=50)
    sa.add_argument("--temperature", type=float, default=1.0)
    sa.add_argument("--forbid", action="append")
    sa.add_argument("--seed", type=int, default=0)

    tl = sub.add_parser("translate", help="beam-decode targets for a file of source lines")
    tl.add_argument("--checkpoint", required=True)
    tl.add_argument("--source", required=True)
    tl.add_argument("--output")
    tl.add_argument("--beam-width", type=int, default=12)
    tl.add_argument("--max-len", type=int, default=50)
    return p


# ------------------------------------------------------------------ helpers

def resolve_config(args):
    """Preset, then ``--config`` file, then explicit flags; validated."""
    cfg = PRESETS[args.preset] if args.preset else PRESETS["baseline-small"]
    if args.config:
        try:
            fields = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        cfg = TrainConfig.from_dict(cfg.to_dict() | fields)
    flags = {field: getattr(args, dest) for dest, field in OVERRIDES.items()
             if getattr(args, dest, None) is not None}
    cfg = cfg.replace(**flags)
    try:
        return cfg.validate()
    except ConfigError as exc:
        origin = f"preset {args.preset!r} with overrides {flags}" if args.preset else "config"
        raise ConfigError(f"{origin}: {exc}") from None


def _load_corpus(args, vocab=None, vocab_size=DEFAULT_VOCAB_SIZE):
    if getattr(args, "toy_corpus", None):
        lines = toy_lines(args.toy_corpus)
        if vocab is None:
            vocab = Vocabulary.build(lines, vocab_size)
        ids = encode_lines(lines, vocab)
        return Corpus(vocab, ids, ids, ids)
    if not args.data_dir:
        raise UsageError("one of --data-dir or --toy-corpus is required")
    data_dir = Path(args.data_dir)
    if vocab is None and (data_dir / "vocab.txt").exists():
        vocab = Vocabulary.load(data_dir / "vocab.txt")
    return load_data_dir(data_dir, vocab, vocab_size)


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _ckpt_path(out_dir, epoch):
    return Path(out_dir) / f"ckpt-{epoch:03d}.bin"


def _latest_checkpoint(out_dir):
    found = sorted(Path(out_dir).glob("ckpt-[0-9][0-9][0-9].bin"))
    return found[-1] if found else None


# ----------------------------------------------------------------- commands

def cmd_prepare(args):
    data_dir = Path(args.data_dir)
    size = args.vocab_size or DEFAULT_VOCAB_SIZE
    corpus = load_data_dir(data_dir, None, size)
    out_dir = Path(args.out_dir or data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out_dir / "vocab.txt")
    report = {"vocab_size": len(corpus.vocab), "translation": is_translation_dir(data_dir)}
    for name in ("train", "valid", "test"):
        arr = getattr(corpus, name)
        if arr is not None:
            report[f"{name}_tokens"] = int(arr.size)
            report[f"{name}_unk"] = int((arr == corpus.vocab.unk).sum())
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    if args.checkpoint_every < 1:
        raise UsageError(f"--checkpoint-every must be >= 1, got {args.checkpoint_every}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(args, vocab_size=cfg.vocab_size)
    if len(corpus.vocab) > cfg.vocab_size:
        raise ConfigError(f"vocabulary of {len(corpus.vocab)} exceeds vocab_size {cfg.vocab_size}")
    metrics_path, timing_path = out_dir / "metrics.jsonl", out_dir / "timing.jsonl"
    params, start, counter = None, 1, 0
    rows, timings = [], []
    if args.resume and (latest := _latest_checkpoint(out_dir)) is not None:
        ck = ckpt_io.load(latest)
        if ck.config != cfg:
            raise ConfigError(f"{latest} was written with a different config; refusing to resume")
        if ck.vocab != corpus.vocab:
            raise ConfigError(f"{latest} was written with a different vocabulary")
        params, counter = ck.params, ck.progress["dropout_counter"]
        start = ck.progress["epoch"] + 1
        if metrics_path.exists():
            rows = [json.loads(l) for l in metrics_path.read_text().splitlines()
                    if json.loads(l)["epoch"] < start]
        if timing_path.exists():
            timings = [json.loads(l) for l in timing_path.read_text().splitlines()
                       if json.loads(l)["epoch"] < start]
        log.info("resuming from %s at epoch %d", latest, start)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    corpus.vocab.save(out_dir / "vocab.txt")

    if params is None:
        params = init_params(cfg, len(corpus.vocab))
        ckpt_io.save(_ckpt_path(out_dir, 0),
                     ckpt_io.Checkpoint(params, cfg, corpus.vocab, {"epoch": 0, "dropout_counter": 0}))
    _write_jsonl(metrics_path, rows)
    _write_jsonl(timing_path, timings)

    def sink(epoch, p, progress, row):
        stopping = args.stop_after is not None and epoch >= args.stop_after
        if epoch % args.checkpoint_every == 0 or epoch == cfg.epochs or stopping:
            ckpt_io.save(_ckpt_path(out_dir, epoch),
                         ckpt_io.Checkpoint(p, cfg, corpus.vocab, progress))
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({k: row[k] for k in METRIC_FIELDS}, sort_keys=True) + "\n")
        with open(timing_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_seconds": row["wall_seconds"]}) + "\n")
        print(json.dumps(row, sort_keys=True), flush=True)
        if stopping:
            raise _Interrupted(epoch)

    try:
        train(cfg, corpus, sink, params=params, start_epoch=start, drop_counter=counter)
    except _Interrupted as stop:
        log.info("stopped after epoch %s", stop.args[0])
    return 0


def _load_checkpoints(paths):
    cks = [ckpt_io.load(p) for p in paths]
    for p, ck in zip(paths[1:], cks[1:]):
        if ck.vocab != cks[0].vocab:
            raise ConfigError(f"{p} uses a different vocabulary from {paths[0]}")
    return cks


def cmd_eval(args):
    cks = _load_checkpoints(args.checkpoint)
    vocab, cfg = cks[0].vocab, cks[0].config
    corpus = _load_corpus(args, vocab=vocab)
    B = args.batch_size or cfg.batch_size
    T = args.unroll or cfg.unroll
    report = {}
    for split in args.split or ["valid", "test"]:
        ppl = ensemble_eval([ck.params for ck in cks], corpus.split(split), B, T,
                            vocabs=[ck.vocab for ck in cks])
        report[f"{split}_ppl"] = ppl
        print(f"{split} perplexity {ppl:.6f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _encode_with_warning(vocab, tokens):
    missing = [t for t in tokens if t not in vocab]
    if missing:
        log.warning("prefix tokens not in vocabulary, mapped to <unk>: %s", " ".join(missing))
    return vocab.encode(tokens)


def cmd_sample(args):
    ck = ckpt_io.load(args.checkpoint)
    vocab = ck.vocab
    words = args.prefix.split()
    forbid = args.forbid if args.forbid is not None else list(DEFAULT_FORBID)
    forbidden = frozenset(vocab.stoi[w] for w in forbid if w in vocab)
    cfg = SamplerConfig(_encode_with_warning(vocab, words), args.max_len, args.temperature,
                        forbidden, args.seed)
    out = sample(ck.params, vocab, cfg)
    if out and out[-1] == vocab.eos:
        out = out[:-1]
    print(" ".join(words + vocab.decode(out)))
    return 0


def cmd_translate(args):
    ck = ckpt_io.load(args.checkpoint)
    vocab = ck.vocab
    if not vocab.translation:
        raise UsageError(f"{args.checkpoint} was not trained on source/target concatenations")
    try:
        lines = Path(args.source).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read source file {args.source}: {exc.strerror or exc}") from exc
    targets, meta = [], []
    for line in lines:
        # training streams always put <eos> before a source sentence
        prefix = [vocab.eos] + _encode_with_warning(vocab, line.split()) + [vocab.sep]
        hyp = beam_search(ck.params, prefix, args.beam_width, args.max_len, vocab.eos)
        toks = list(hyp.tokens[:-1] if hyp.complete else hyp.tokens)
        targets.append(vocab.detokenize(toks))
        meta.append({"logprob": hyp.logprob, "complete": hyp.complete})
    if args.output:
        out = Path(args.output)
        out.write_text("".join(t + "\n" for t in targets), encoding="utf-8")
        _write_jsonl(out.with_name(out.name + ".meta.jsonl"), meta)
    else:
        for t, m in zip(targets, meta):
            print(t)
            print(f"# logprob={m['logprob']:.6f} complete={str(m['complete']).lower()}")
    return 0


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "sample": cmd_sample, "translate": cmd_translate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CheckpointError, OSError) as exc:
        print(f"lstmdrop: I/O error: {exc}", file=sys.stderr)
        return 3
    except LabError as exc:
        print(f"lstmdrop: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (IndexError, ArithmeticError) as exc:
        print(f"lstmdrop: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
