"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json]

Both backends run on identical inputs; the max abs difference of the outputs
is printed next to the timings.
"""
import argparse
import json
import timeit

import numpy as np

from prefact import _kernels_py
from prefact.numerics import round_robin

try:
    from prefact import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def jacobi_case(n, m):
    a = np.random.default_rng(n).standard_normal((m, n))
    sched = np.array(round_robin(n))

    def run(mod):
        at = np.array(a.T, order="C")
        vt = np.eye(n)
        mod.jacobi_sweeps(at, vt, sched, 1e-12, 60)
        return np.sort(np.linalg.norm(at, axis=1))
    return f"jacobi svd {m}x{n}", run


def im2col_case(B, C, H, k, stride, pad):
    x = np.random.default_rng(0).standard_normal((B, C, H, H))

    def run(mod):
        return mod.im2col(x, k, stride, pad)
    return f"im2col {B}x{C}x{H}x{H} k{k} s{stride}", run


def col2im_case(B, C, H, k, stride, pad):
    ho = (H + 2 * pad - k) // stride + 1
    cols = np.random.default_rng(1).standard_normal((C * k * k, B * ho * ho))

    def run(mod):
        return mod.col2im(cols, B, C, H, H, k, stride, pad)
    return f"col2im {B}x{C}x{H}x{H} k{k} s{stride}", run


CASES = [
    jacobi_case(32, 32), jacobi_case(64, 64), jacobi_case(128, 128), jacobi_case(64, 128),
    im2col_case(32, 16, 32, 3, 1, 1), im2col_case(64, 64, 16, 3, 1, 1), im2col_case(32, 64, 16, 3, 2, 1),
    col2im_case(32, 16, 32, 3, 1, 1), col2im_case(64, 64, 16, 3, 1, 1),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    rows = []
    for name, run in CASES:
        py_t = min(timeit.repeat(lambda: run(_kernels_py), number=1, repeat=args.repeat))
        row = {"case": name, "python_s": py_t, "compiled_s": None, "speedup": None, "max_abs_diff": None}
        if _kernels_c is not None:
            c_t = min(timeit.repeat(lambda: run(_kernels_c), number=1, repeat=args.repeat))
            row.update(compiled_s=c_t, speedup=py_t / c_t,
                       max_abs_diff=float(np.max(np.abs(run(_kernels_py) - run(_kernels_c)))))
        rows.append(row)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    if _kernels_c is None:
        print("compiled core not built; timing the numpy fallback only")
    print(f"{'case':34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max diff':>9s}")
    for r in rows:
        c = f"{r['compiled_s'] * 1e3:12.2f}" if r["compiled_s"] is not None else f"{'-':>12s}"
        sp = f"{r['speedup']:8.2f}" if r["speedup"] is not None else f"{'-':>8s}"
        d = f"{r['max_abs_diff']:9.1e}" if r["max_abs_diff"] is not None else f"{'-':>9s}"
        print(f"{r['case']:34s} {r['python_s'] * 1e3:10.2f} {c} {sp} {d}")


if __name__ == "__main__":
    main()
