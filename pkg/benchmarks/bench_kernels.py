"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 5]

Both backends are called directly, bypassing the import-time selection.
"""
import argparse
import timeit

import numpy as np

from unlearnlab.kernels import get_backend


def cases(n, rng):
    xs = np.concatenate([rng.uniform(-0.3678, 3.0, n // 2), np.exp(rng.uniform(1.0, 13.8, n - n // 2))])
    losses = rng.gamma(2.0, 0.5, n)
    members = np.sort(np.concatenate([rng.gamma(1.5, 0.3, n // 2), rng.gamma(2.0, 0.6, n - n // 2)]))
    flags = np.zeros(n, np.int8)
    flags[rng.permutation(n)[: n // 2]] = 1
    return {
        "lambert_w_array": lambda k: k.lambert_w_array(xs),
        "superloss_weights": lambda k: k.superloss_weights(losses, 1.0, 0.5),
        "threshold_sweep": lambda k: k.threshold_sweep(members, flags, int(flags.sum()), int(n - flags.sum())),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="inputs per call (default 20000)")
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats, best kept (default 5)")
    args = ap.parse_args()
    try:
        fast = get_backend("cython")
    except ImportError:
        print("compiled backend not built; rebuild with `pip install -e . --no-build-isolation`")
        return 1
    slow = get_backend("python")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  agree")
    for name, call in cases(args.n, rng).items():
        t_py = min(timeit.repeat(lambda: call(slow), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: call(fast), number=1, repeat=args.repeat))
        a, b = call(slow), call(fast)
        agree = np.array_equal(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
        print(f"{name:<20}{1e3 * t_py:>12.2f}{1e3 * t_cy:>12.3f}{t_py / t_cy:>9.0f}x  {agree}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
