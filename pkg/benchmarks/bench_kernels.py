"""Benchmark the numba kernels against the pure-numpy fallback.

The hot path of the toolkit is scoring: softmax over logit rows plus the
sorted cumulative sums behind aps/raps. This times both backends on
ImageNet-validation-sized batches and prints the speedup.

Run:  python benchmarks/bench_kernels.py [--n 25000] [--k 1000] [--repeats 3]

The selected backend at import time does not matter here; both
implementations are invoked directly. Set CPKIT_NO_NUMBA=1 to check what the
package falls back to when numba is unavailable.
"""

import argparse
import time

import numpy as np

from cpkit import _kernels


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=25_000, help="rows (examples)")
    parser.add_argument("--k", type=int, default=1_000, help="columns (classes)")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    logits = rng.standard_normal((args.n, args.k))
    probs = _kernels._numpy_softmax_rows(logits)

    rows = [("softmax_rows", _kernels._numpy_softmax_rows, (logits,))]
    rows.append(("aps_rank_matrix", _kernels._numpy_aps_rank_matrix, (probs,)))

    print(f"N={args.n} K={args.k} repeats={args.repeats} (best-of)")
    print(f"{'kernel':<18}{'numpy':>10}{'numba':>10}{'speedup':>9}")
    for name, np_fn, call_args in rows:
        np_time = best_of(np_fn, call_args, args.repeats)
        if _kernels._HAVE_NUMBA:
            nb_fn = getattr(_kernels, f"_numba_{name}")
            nb_fn(*tuple(a[:2] for a in call_args))  # compile outside the timer
            nb_time = best_of(nb_fn, call_args, args.repeats)
            print(f"{name:<18}{np_time:>9.3f}s{nb_time:>9.3f}s{np_time / nb_time:>8.2f}x")
        else:
            print(f"{name:<18}{np_time:>9.3f}s{'n/a':>10}{'n/a':>9}")

    if _kernels._HAVE_NUMBA:
        s_np, r_np = _kernels._numpy_aps_rank_matrix(probs[:256])
        s_nb, r_nb = _kernels._numba_aps_rank_matrix(probs[:256])
        assert np.array_equal(s_np, s_nb) and np.array_equal(r_np, r_nb)
        print("backend agreement on aps scores/ranks: exact")


if __name__ == "__main__":
    main()
