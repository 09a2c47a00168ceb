"""Time the compiled depth-wise kernels against the numpy fallback.

    python benchmarks/compare_backends.py [--resolution 32] [--channels 64] [--reps 5]

Prints one CSV row per (kernel size, kernel) with the median seconds of each
implementation, their speed-up and the max abs difference of the outputs.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from replk import _pykernels
from replk.kernels import HAVE_EXTENSION


def median_time(fn, reps):
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--kernels", default="3,7,13,31")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    if not HAVE_EXTENSION:
        print("compiled extension not available; nothing to compare", file=sys.stderr)
        return 1
    from replk import _ckernels

    rng = np.random.default_rng(0)
    n, c, r = args.batch, args.channels, args.resolution
    x = rng.standard_normal((n, c, r, r)).astype(np.float32)
    bias = np.zeros(c, np.float32)
    print("kernel,impl_fn,cython_s,numpy_s,speedup,max_abs_diff")
    for k in (int(v) for v in args.kernels.split(",")):
        w = (rng.standard_normal((c, k, k)) / k).astype(np.float32)
        for name in ("dw_direct", "dw_blocked"):
            cy = getattr(_ckernels, name)
            py = getattr(_pykernels, name)
            call = dict(stride=1, pad=k // 2, dil=1)
            t_cy = median_time(lambda: cy(x, w, bias, threads=args.threads, **call), args.reps)
            t_py = median_time(lambda: py(x, w, bias, **call), args.reps)
            diff = np.abs(cy(x, w, bias, **call) - py(x, w, bias, **call)).max()
            print(f"{k},{name},{t_cy:.6f},{t_py:.6f},{t_py / t_cy:.2f},{diff:.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
