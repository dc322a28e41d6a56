"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from fastpowerformer._kernels import available_backends, get_backend

CASES = [
    # (batch, steps, hidden)
    (32, 96, 32),
    (32, 288, 32),
    (8, 288, 64),
]


def lstm_inputs(B, T, H, seed=0):
    rng = np.random.default_rng(seed)
    xw = rng.normal(0, 0.5, (B, T, 4 * H))
    wh = rng.normal(0, 1 / np.sqrt(H), (4 * H, H))
    return xw, wh


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {name: get_backend(name) for name in available_backends()}
    if len(backends) < 2:
        print("compiled backend unavailable; only the numpy fallback can be timed")
    print(f"{'kernel':<22}{'shape':<16}" + "".join(f"{n:>12}" for n in backends) + f"{'speedup':>10}")

    def row(label, shape, fns):
        times = {n: min(timeit.repeat(f, number=1, repeat=args.repeat)) for n, f in fns.items()}
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<22}{shape:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values()) + f"{speed:>9.1f}x")

    for B, T, H in CASES:
        xw, wh = lstm_inputs(B, T, H)
        h, gates, c, tc = backends["python"].lstm_forward(xw, wh)
        g = np.ones_like(h)
        shape = f"{B}x{T}x{H}"
        row("lstm_forward", shape, {n: (lambda k=k: k.lstm_forward(xw, wh)) for n, k in backends.items()})
        row("lstm_backward", shape,
            {n: (lambda k=k: k.lstm_backward(g, gates, c, tc, h, wh)) for n, k in backends.items()})

    rng = np.random.default_rng(1)
    for L, nb in ((288, 8), (1024, 16)):
        codes = rng.integers(0, nb, size=(4, L))
        row("bucket_pool_mask", f"4x{L}/{nb}", {n: (lambda k=k: k.bucket_pool_mask(codes, nb)) for n, k in backends.items()})


if __name__ == "__main__":
    main()
