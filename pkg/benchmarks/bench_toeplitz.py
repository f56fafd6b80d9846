"""Time the two Toeplitz hashing backends and locate their crossover.

Usage::

    python benchmarks/bench_toeplitz.py [--n 1000000] [--repeat 3]

Prints one CSV row per (backend, output length). The compiled kernel is
O(n*m/64), the FFT path O((n+m) log(n+m)), so for a fixed input length the
compiled kernel wins below some output length and loses above it;
``tbqkd.hashing.COMPILED_MAX_OUT`` should sit near that point.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from tbqkd.hashing import COMPILED_MAX_OUT, available_backends, toeplitz_hash


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=10**6, help="input length in bits")
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--out-lens", type=int, nargs="*",
                        default=[31, 10**3, 10**4, 3 * 10**4, 65536, 10**5, 3 * 10**5])
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, args.n, dtype=np.uint8)
    backends = available_backends()
    if "compiled" not in backends:
        print("compiled kernel not available; timing the numpy backend only", file=sys.stderr)

    w = csv.writer(sys.stdout)
    w.writerow(["backend", "n", "out_len", "seconds", "mbit_per_s"])
    best = {}
    for m in args.out_lens:
        if m > args.n:
            continue
        seed = rng.integers(0, 2, args.n + m - 1, dtype=np.uint8)
        ref = None
        for b in backends:
            t = min(timeit.repeat(lambda: toeplitz_hash(x, seed, m, b), number=1,
                                  repeat=args.repeat))
            out = toeplitz_hash(x, seed, m, b)
            if ref is not None and not np.array_equal(out, ref):
                raise SystemExit(f"backends disagree at out_len={m}")
            ref = out
            best.setdefault(m, {})[b] = t
            w.writerow([b, args.n, m, f"{t:.6f}", f"{args.n / t / 1e6:.2f}"])

    if "compiled" in backends:
        faster = [m for m, t in best.items() if t["compiled"] <= t["numpy"]]
        cross = max(faster) if faster else None
        print(f"# largest output length where compiled wins: {cross}; "
              f"dispatch threshold COMPILED_MAX_OUT = {COMPILED_MAX_OUT}", file=sys.stderr)


if __name__ == "__main__":
    main()
