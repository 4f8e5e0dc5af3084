"""Compare the numpy and numba kernel backends on realistic shapes.

Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats N]

Both backends are imported directly, so this works regardless of the
FTMNET_KERNELS selection. The numba path is warmed once per case so JIT
compilation does not pollute the timings.
"""

import argparse
import time

import numpy as np

from ftmnet.kernels import numpy_backend

try:
    from ftmnet.kernels import numba_backend
except ImportError:
    numba_backend = None


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_cases():
    rng = np.random.default_rng(0)
    for n, c, s in ((64, 16, 32), (64, 32, 16), (64, 64, 8)):
        x = rng.normal(size=(n, c, s, s)).astype(np.float32)
        cols = numpy_backend.im2col(x, 3, 3, 1, 1)
        label = f"n{n} c{c} {s}x{s} k3"
        yield f"im2col   {label}", lambda be, x=x: be.im2col(x, 3, 3, 1, 1)
        yield (
            f"col2im   {label}",
            lambda be, cols=cols, n=n, c=c, s=s: be.col2im(cols, n, c, s, s, 3, 3, 1, 1),
        )


def slic_cases():
    rng = np.random.default_rng(1)
    h = w = 512
    k = 100
    rgb = rng.random((h, w, 3), dtype=np.float32)
    spacing = float(np.sqrt(h * w / k))
    centers = np.empty((k, 5), dtype=np.float32)
    grid = int(np.sqrt(k))
    for i in range(k):
        cy = (i // grid + 0.5) * h / grid
        cx = (i % grid + 0.5) * w / grid
        centers[i] = (*rgb[int(cy) % h, int(cx) % w], cy, cx)
    scale = np.float32(10.0 / spacing)
    window = int(round(2 * spacing))
    labels = np.zeros((h, w), dtype=np.int64)
    dists = np.full((h, w), np.inf, dtype=np.float32)
    numpy_backend.slic_assign(rgb, centers, scale, window, labels, dists)

    def assign(be):
        d = np.full((h, w), np.inf, dtype=np.float32)
        be.slic_assign(rgb, centers, scale, window, np.zeros((h, w), dtype=np.int64), d)

    yield f"slic_assign {h}x{w} k{k}", assign
    yield f"slic_update {h}x{w} k{k}", lambda be: be.slic_update(rgb, labels, k)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats per case (best wins)")
    args = parser.parse_args()

    cases = list(conv_cases()) + list(slic_cases())
    width = max(len(name) for name, _ in cases)
    header = f"{'kernel / case':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, fn in cases:
        t_np = best_of(lambda: fn(numpy_backend), args.repeats)
        if numba_backend is None:
            print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {'n/a':>10}  {'n/a':>8}")
            continue
        fn(numba_backend)  # JIT warmup
        t_nb = best_of(lambda: fn(numba_backend), args.repeats)
        print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms  {t_np / t_nb:>7.1f}x")
    if numba_backend is None:
        print("numba is not installed; only the numpy fallback was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
