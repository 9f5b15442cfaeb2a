"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

GELU has no compiled version: a Cython loop was slower than numpy's
vectorised tanh, so both backends share the numpy implementation.
"""
import argparse
import timeit

import numpy as np

from vlcabs import _backend


def cases(rng):
    grid = rng.normal(size=(37, 37)).astype(np.float32)
    big = rng.uniform(size=(518, 518)).astype(np.float32)
    mask = rng.uniform(size=big.shape) < 0.2
    t = np.arange(101) / 100.0
    act = rng.normal(size=(32, 257, 256))
    return [
        ("bilinear_resize 37->518", "bilinear_resize", (grid, 518, 518)),
        ("bilinear_resize 518->300x420", "bilinear_resize", (big, 300, 420)),
        ("threshold_counts 518^2 x 101", "threshold_counts", (big, mask, t)),
        ("gelu 32x257x256", "gelu", (act,)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"active backend: {_backend.BACKEND}")
    print(f"{'kernel':32s} {'compiled ms':>12s} {'numpy ms':>10s} {'speedup':>8s}  identical")
    for label, name, call_args in cases(rng):
        fast, slow = getattr(_backend.kernels, name), getattr(_backend.python_kernels, name)
        tf = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        ts = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        a, b = fast(*call_args), slow(*call_args)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        same = all(np.array_equal(x, y) for x, y in zip(a, b))
        shared = " (shared numpy)" if fast is slow else ""
        print(f"{label:32s} {tf * 1e3:12.2f} {ts * 1e3:10.2f} {ts / tf:7.1f}x  {same}{shared}")


if __name__ == "__main__":
    main()
