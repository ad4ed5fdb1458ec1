"""Wall-clock comparison of the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The dispatching names in ``dynacl.kernels`` pick one path at import time
(``DYNACL_DISABLE_NUMBA=1`` forces numpy); this script times both directly.
"""
import argparse
import time

import numpy as np

from dynacl import kernels as K
from dynacl._accel import HAVE_NUMBA


def best_of(fn, args, repeat):
    fn(*args)  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    img = rng.random((3, 32, 32), dtype=np.float32)
    a = rng.random((1000, 3072))
    b = rng.random((1000, 3072))
    feats = rng.random((10000, 512))
    cents = rng.random((10, 512))
    pool = rng.random((4000, 3 * 32 * 32), dtype=np.float32)
    labels = np.repeat(np.arange(4), 1000).astype(np.int64)
    pooled = K.pooled_summary(pool, 3, 32, 32)
    means = pool.mean(1, dtype=np.float64)
    return [
        ("crop_resize 3x32x32", K.crop_resize_nb, K.crop_resize_np, (img, 3, 5, 20, 24, 32, 32)),
        ("hue_shift 3x32x32", K.hue_shift_nb, K.hue_shift_np, (img, 0.07)),
        ("sq_dists 1000x1000x3072", K.sq_dists_nb, K.sq_dists_np, (a, b)),
        ("assign_nearest 10000x512,k=10", K.assign_nearest_nb, K.assign_nearest_np, (feats, cents)),
        ("min_cross_class_linf 4000x3072", K.min_cross_class_linf_nb, K.min_cross_class_linf_np,
         (pool, pooled, means, labels, 4)),
    ]


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba':>11s} {'numpy':>11s} {'speed-up':>9s}")
    for name, nb, npf, a in cases(rng):
        t_nb = best_of(nb, a, args.repeat)
        t_np = best_of(npf, a, args.repeat)
        print(f"{name:34s} {t_nb * 1e3:9.3f}ms {t_np * 1e3:9.3f}ms {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
