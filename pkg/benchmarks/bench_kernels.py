"""Compare the numba and numpy kernel backends.

Two parts:
  * per-kernel timings at the preset sizes (both backends in one process)
  * one training window end to end, run once per backend in a subprocess so
    the LSTMDROP_DISABLE_NUMBA flag decides what the package binds

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --hidden 200 650 --vocab 10000 --repeat 20
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from lstmdrop import kernels


def make_inputs(B, n, V, rng):
    pre = rng.normal(size=(B, 4 * n))
    c_prev = rng.normal(size=(B, n))
    acts, c, tanh_c, h = kernels.np_lstm_forward(pre, c_prev)
    logits = rng.normal(size=(B, V))
    targets = rng.integers(0, V, size=B)
    _, probs = kernels.np_xent_forward(logits, targets)
    return {
        "lstm_forward": (pre, c_prev),
        "lstm_backward": (acts, c_prev, tanh_c, rng.normal(size=(B, n)), rng.normal(size=(B, n))),
        "xent_forward": (logits, targets),
        "xent_backward": (probs, targets, np.ones(B)),
    }


def bench_kernels(B, n, V, repeat, number):
    rng = np.random.default_rng(0)
    args = make_inputs(B, n, V, rng)
    names = ["lstm_forward", "lstm_backward", "xent_forward", "xent_backward"]
    rows = []
    for k, name in enumerate(names):
        best = {}
        for label, table in (("numpy", kernels.NUMPY_KERNELS), ("numba", kernels.NUMBA_KERNELS)):
            if table is None:
                continue
            fn = table[k]
            fn(*args[name])                 # compile / warm caches
            t = min(timeit.repeat(lambda: fn(*args[name]), repeat=repeat, number=number))
            best[label] = t / number
        rows.append((name, best))
    return rows


WINDOW_SCRIPT = """
import json, time, numpy as np
from lstmdrop import BACKEND
from lstmdrop.dropout import DropoutConfig
from lstmdrop.model import LstmState
from lstmdrop.training import TrainConfig, init_params, window_gradients
B, T, n, V, reps = {B}, {T}, {n}, {V}, {reps}
cfg = TrainConfig(n=n, L=2, unroll=T, batch_size=B, init_range=0.1)
params = init_params(cfg, V)
rng = np.random.default_rng(0)
inp, tgt = rng.integers(0, V, (T, B)), rng.integers(0, V, (T, B))
drop = DropoutConfig(0.5, seed=0)
window_gradients(params, inp, tgt, LstmState.zeros(2, B, n), drop)
times = []
for _ in range(reps):
    params.zero_grad()
    t0 = time.perf_counter()
    window_gradients(params, inp, tgt, LstmState.zeros(2, B, n), drop)
    times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": BACKEND, "seconds": min(times)}}))
"""


def bench_window(B, T, n, V, reps, disable_numba):
    env = dict(os.environ, LSTMDROP_DISABLE_NUMBA="1" if disable_numba else "0")
    code = WINDOW_SCRIPT.format(B=B, T=T, n=n, V=V, reps=reps)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=20)
    ap.add_argument("--unroll", type=int, default=20)
    ap.add_argument("--hidden", type=int, nargs="+", default=[200, 650, 1500])
    ap.add_argument("--vocab", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--window-hidden", type=int, default=200)
    ap.add_argument("--window-reps", type=int, default=5)
    args = ap.parse_args()

    if kernels.NUMBA_KERNELS is None:
        print("numba is not importable; only the numpy backend is timed")
    print(f"per-kernel time, B={args.batch}, V={args.vocab} (microseconds, best of {args.repeat})")
    print(f"{'kernel':<15}{'n':>6}{'numpy':>12}{'numba':>12}{'speedup':>9}")
    for n in args.hidden:
        for name, best in bench_kernels(args.batch, n, args.vocab, args.repeat, args.number):
            npy, nba = best["numpy"] * 1e6, best.get("numba")
            if nba is None:
                print(f"{name:<15}{n:>6}{npy:>12.1f}{'-':>12}{'-':>9}")
            else:
                print(f"{name:<15}{n:>6}{npy:>12.1f}{nba * 1e6:>12.1f}{npy / (nba * 1e6):>8.2f}x")

    print(f"\none training window: B={args.batch}, T={args.unroll}, n={args.window_hidden}, "
          f"L=2, V={args.vocab}, dropout 0.5")
    res = {}
    for disable in (True, False):
        r = bench_window(args.batch, args.unroll, args.window_hidden, args.vocab,
                         args.window_reps, disable)
        res[r["backend"]] = r["seconds"]
        print(f"  {r['backend']:<6} {r['seconds'] * 1e3:9.1f} ms")
    if len(res) == 2:
        print(f"  speedup {res['numpy'] / res['numba']:.2f}x")


if __name__ == "__main__":
    main()
