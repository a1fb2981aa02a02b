"""Time the numba and numpy variants of each hot kernel on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from cdp_authkit import kernels
from cdp_authkit._accel import HAS_NUMBA


def cases(rng: np.random.Generator):
    xp = rng.standard_normal((8, 66, 66, 16)).astype(np.float32)
    dcols = rng.standard_normal((8, 64, 64, 9 * 16)).astype(np.float32)
    ink = (rng.random((512, 512)) < 0.5).astype(np.float64)
    u = rng.random((512, 512))
    pos = rng.random(4000)
    neg = rng.random(4000)
    return {
        "im2col3x3": (kernels.im2col3x3_np, kernels.im2col3x3_nb, (xp,)),
        "col2im3x3": (kernels.col2im3x3_np, kernels.col2im3x3_nb, (dcols, 16)),
        "dilate_stochastic": (kernels.dilate_stochastic_np, kernels.dilate_stochastic_nb, (ink, u, 0.25)),
        "pair_counts": (kernels.pair_counts_np, kernels.pair_counts_nb, (pos, neg)),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  identical")
    for name, (f_np, f_nb, argv) in cases(rng).items():
        ref = f_np(*argv)
        t_np = min(timeit.repeat(lambda: f_np(*argv), number=1, repeat=args.repeat)) * 1e3
        if HAS_NUMBA:
            out = f_nb(*argv)  # first call compiles
            same = all(np.array_equal(a, b) for a, b in zip(np.atleast_1d(ref), np.atleast_1d(out))) \
                if isinstance(ref, tuple) else np.array_equal(ref, out)
            t_nb = min(timeit.repeat(lambda: f_nb(*argv), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<20}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x  {same}")
        else:
            print(f"{name:<20}{t_np:>12.2f}{'n/a':>12}{'':>10}  -")


if __name__ == "__main__":
    main()
