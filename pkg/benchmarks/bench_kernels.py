"""Time each hot kernel under numba and pure numpy.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

The numba column excludes compilation (one warm-up call per kernel). Every
kernel pair is also checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from ambientflow import _accel, kernels
from ambientflow.imaging import SparsityModel, support_bases


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(quick: bool):
    rng = np.random.default_rng(0)
    n = 200 if quick else 600
    pts = rng.standard_normal((2 * n, 2))
    cost = np.sqrt(((pts[:n, None] - pts[None, n:]) ** 2).sum(-1))
    yield f"linear_assignment N={n}", kernels.linear_assignment, (cost,), \
        lambda a, b: np.isclose(cost[np.arange(n), a].sum(), cost[np.arange(n), b].sum())

    c = rng.standard_normal((4096 if quick else 32768, 64))
    yield f"topk_mask {c.shape} k=8", kernels.topk_mask, (c, 8), np.array_equal

    sm = SparsityModel("discrete-gradient-2d", 3, (1, 16))
    _, bases, _ = support_bases(sm.matrix(), 3)
    H = rng.standard_normal((8, 16))
    yield f"restricted_extremes S={len(bases)}", kernels.restricted_extremes, (bases, H.T @ H), \
        lambda a, b: np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])

    x = rng.standard_normal((64 if quick else 256, 16))
    yield f"union_projection P={len(x)} S={len(bases)}", kernels.union_projection, (x, bases), \
        lambda a, b: np.array_equal(a[1], b[1]) and np.allclose(a[0], b[0])

    s = rng.standard_normal((20000 if quick else 200000, 16))
    yield f"streaming_moments {s.shape}", kernels.streaming_moments, (s,), \
        lambda a, b: np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<42}{'numpy s':>12}{'numba s':>12}{'speedup':>10}")
    for name, fn, inputs, agree in cases(args.quick):
        ref = fn(*inputs, impl="numpy")
        out = fn(*inputs, impl="numba")  # warm-up / compile
        if not agree(out, ref):
            raise SystemExit(f"{name}: numba and numpy results disagree")
        t_np = _best_of(lambda: fn(*inputs, impl="numpy"), args.repeat)
        t_nb = _best_of(lambda: fn(*inputs, impl="numba"), args.repeat)
        print(f"{name:<42}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
