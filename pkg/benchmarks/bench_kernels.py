"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Each kernel is called on the same inputs through both paths. The first numba
call (compilation, or loading the on-disk cache) is excluded from the timings.
Outputs are compared for bit-identity before timing starts.
"""
import argparse
import timeit

import numpy as np

from bqsched import kernels
from bqsched._jit import USE_NUMBA


def rate_step_case(rng, n=64):
    running = rng.random(n) < 0.5
    running[0] = True
    args = (rng.uniform(1, 50, n), rng.uniform(1, 50, n), rng.choice([1.0, 2.0, 4.0], n),
            rng.uniform(0, 1, n), running, np.arange(n, dtype=np.int64), 6.0, 4.0)

    def call(fn):
        a = list(args)
        a[0], a[1] = a[0].copy(), a[1].copy()
        return fn(*a), a[0], a[1]
    return call


def gain_case(rng, n=100, m=100):
    qidx = rng.permutation(n)[:m].astype(np.int64)
    start = rng.uniform(0, 100, m)
    finish = start + rng.uniform(1, 30, m)
    tbar = rng.uniform(1, 30, n)

    def call(fn):
        sums, counts = np.zeros((n, n)), np.zeros((n, n), dtype=np.int64)
        fn(qidx, start, finish, tbar, sums, counts)
        return sums, counts
    return call


def linkage_case(rng, n=200, k=20):
    sim = rng.normal(size=(n, n))
    sim = sim + sim.T
    return lambda fn: fn(sim, k)


CASES = {
    "rate_step": (rate_step_case, kernels._rate_step_nb, kernels._rate_step_np),
    "gain_accumulate": (gain_case, kernels._gain_accumulate_nb, kernels._gain_accumulate_np),
    "average_linkage": (linkage_case, kernels._average_linkage_nb, kernels._average_linkage_np),
}


def same(a, b):
    if isinstance(a, (tuple, list)):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not USE_NUMBA:
        print("numba disabled (BQSCHED_DISABLE_NUMBA set or numba missing); both columns run numpy")

    print(f"{'kernel':<18}{'numba us':>12}{'numpy us':>12}{'speedup':>10}  identical")
    for name, (make, nb, npy) in CASES.items():
        call = make(np.random.default_rng(args.seed))
        identical = same(call(nb), call(npy))
        t_nb = min(timeit.repeat(lambda: call(nb), number=args.repeat, repeat=3)) / args.repeat
        t_np = min(timeit.repeat(lambda: call(npy), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<18}{t_nb * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_nb:>9.1f}x  {identical}")


if __name__ == "__main__":
    main()
