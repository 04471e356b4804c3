#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Usage:  python3 benchmarks/bench_kernels.py [--repeats N]

The recurrent forward/backward pair dominates training time and the
Levenshtein kernel dominates corpus-level WER scoring, so these three are
what the extension exists for.
"""

import argparse
import time

import numpy as np

from echotrap import _pykernels

try:
    from echotrap import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_rnn(backend, T, d, h, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((T, d))
    wx = rng.standard_normal((d, h)) * 0.1
    wh = rng.standard_normal((h, h)) * 0.1
    b = np.zeros(h)
    h0 = np.zeros(h)
    hidden = backend.rnn_tanh_forward(x, wx, wh, b, h0)
    dh = rng.standard_normal((T, h))
    fwd = timeit(lambda: backend.rnn_tanh_forward(x, wx, wh, b, h0), repeats)
    bwd = timeit(lambda: backend.rnn_tanh_backward(x, hidden, h0, wx, wh, dh), repeats)
    return fwd, bwd


def bench_levenshtein(backend, n, repeats):
    rng = np.random.default_rng(0)
    a = rng.integers(0, 30, size=n).astype(np.int32)
    b = rng.integers(0, 30, size=n).astype(np.int32)
    return timeit(lambda: backend.levenshtein(a, b), repeats)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = [("pure", _pykernels)]
    if _ckernels is not None:
        backends.append(("compiled", _ckernels))
    else:
        print("compiled extension not built; benchmarking the pure backend only")

    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    cases = [
        ("rnn fwd  T=100 d=32 h=32", lambda be: bench_rnn(be, 100, 32, 32, args.repeats)[0]),
        ("rnn bwd  T=100 d=32 h=32", lambda be: bench_rnn(be, 100, 32, 32, args.repeats)[1]),
        ("rnn fwd  T=500 d=32 h=64", lambda be: bench_rnn(be, 500, 32, 64, args.repeats)[0]),
        ("rnn bwd  T=500 d=32 h=64", lambda be: bench_rnn(be, 500, 32, 64, args.repeats)[1]),
        ("levenshtein n=200", lambda be: bench_levenshtein(be, 200, args.repeats)),
        ("levenshtein n=2000", lambda be: bench_levenshtein(be, 2000, max(3, args.repeats // 4))),
    ]
    for label, runner in cases:
        times = [runner(be) for _, be in backends]
        row = f"{label:<28}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2 and times[1] > 0:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
