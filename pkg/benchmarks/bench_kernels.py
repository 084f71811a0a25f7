"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from eiwflow import kernels


def cases(rng):
    xp = rng.standard_normal((64, 8, 18, 18))
    cols = rng.standard_normal((64, 16, 16, 8 * 9))
    xs = np.sort(rng.standard_normal(2000))
    big = np.sort(rng.standard_normal(100_000))
    h = 0.9 * big.std() * len(big) ** -0.2
    step = h / 20
    n_grid = int((big[-1] - big[0]) / step) + 2
    hs = 0.9 * xs.std() * len(xs) ** -0.2
    return {
        "im2col 64x8x16x16 k3": lambda m: m.im2col(xp, 3, 3, 1),
        "col2im 64x8x16x16 k3": lambda m: m.col2im(cols, 8, 18, 18, 3, 3, 1),
        "kde exact n=2000": lambda m: m.kde_log_density_sorted(xs, hs, 6.0),
        "kde binned n=1e5": lambda m: m.kde_log_density_binned(big, h, 6.0, big[0], step, n_grid),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "compiled" not in impls:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}" + "".join(f"{name:>14}" for name in impls) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in impls.items():
            fn(mod)
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{label:<24}" + "".join(f"{times[n] * 1e3:>12.2f}ms" for n in impls)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
