"""Compare the compiled CSR kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 50000] [--degree 20] [--width 64]

Timings are medians over ``--repeats`` runs after warm-up, single-threaded.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from mgfd import kernels
from mgfd.mgraph import CSRView


def median_ms(fn, repeats, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--degree", type=float, default=20.0)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    m = int(args.n * args.degree / 2)
    view = CSRView.from_edges(args.n, rng.integers(0, args.n, m), rng.integers(0, args.n, m))
    data = view.mean_weights
    x = rng.standard_normal((args.n, args.width))
    nodes = rng.choice(args.n, 1000, replace=False).astype(np.int64)

    def mark(fn):
        buf = np.zeros(args.n, dtype=np.uint8)
        return lambda: fn(view.indptr, view.indices, nodes, buf)

    cases = {"spmm": (lambda f: lambda: f(view.indptr, view.indices, data, x)), "mark_neighbors": mark}
    impls = {"python": (kernels.spmm_python, kernels.mark_neighbors_python)}
    try:
        from mgfd import _kernels
        impls["compiled"] = (_kernels.spmm, _kernels.mark_neighbors)
    except ImportError:
        print("compiled extension not built; showing the fallback only")

    print(f"n={args.n} nnz={view.nnz} width={args.width} (active backend: {kernels.BACKEND})")
    print(f"{'kernel':16s}" + "".join(f"{name:>14s}" for name in impls) + "     speedup")
    with threadpool_limits(limits=1):
        for i, (case, make) in enumerate(cases.items()):
            ms = {name: median_ms(make(fns[i]), args.repeats) for name, fns in impls.items()}
            speed = f"{ms['python'] / ms['compiled']:10.1f}x" if "compiled" in ms else ""
            print(f"{case:16s}" + "".join(f"{v:12.3f}ms" for v in ms.values()) + speed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
