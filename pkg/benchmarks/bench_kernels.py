"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run with the package installed:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --cosine-rows 200000 --lcs-len 2048

Unset HMRAG_NUMBA (or set it to 1) so both implementations are
available; the script compares them directly regardless of which one
the library dispatches to.
"""

import argparse
import time

import numpy as np

from hmrag import kernels


def time_call(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_cosine(rows_list, dim, repeat):
    rng = np.random.default_rng(0)
    print(f"\ncosine_scores (dim={dim})")
    print(f"{'rows':>10} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for rows in rows_list:
        matrix = np.ascontiguousarray(rng.standard_normal((rows, dim)))
        query = np.ascontiguousarray(rng.standard_normal(dim))
        kernels.cosine_scores_numba(query, matrix)  # JIT warmup
        t_np = time_call(kernels.cosine_scores_numpy, query, matrix, repeat=repeat)
        t_nb = time_call(kernels.cosine_scores_numba, query, matrix, repeat=repeat)
        np.testing.assert_allclose(
            kernels.cosine_scores_numba(query, matrix),
            kernels.cosine_scores_numpy(query, matrix), atol=1e-10,
        )
        print(f"{rows:>10} {t_np * 1e3:>10.3f}ms {t_nb * 1e3:>10.3f}ms {t_np / t_nb:>8.2f}x")


def bench_lcs(lengths, repeat):
    rng = np.random.default_rng(1)
    print("\nlcs_length (alphabet 32)")
    print(f"{'length':>10} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for length in lengths:
        a = rng.integers(0, 32, size=length).astype(np.int64)
        b = rng.integers(0, 32, size=length).astype(np.int64)
        kernels.lcs_length_numba(a, b)  # JIT warmup
        t_np = time_call(kernels.lcs_length_numpy, a, b, repeat=repeat)
        t_nb = time_call(kernels.lcs_length_numba, a, b, repeat=repeat)
        assert kernels.lcs_length_numba(a, b) == kernels.lcs_length_numpy(a, b)
        print(f"{length:>10} {t_np * 1e3:>10.3f}ms {t_nb * 1e3:>10.3f}ms {t_np / t_nb:>8.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cosine-rows", type=int, nargs="*",
                        default=[1_000, 20_000, 100_000])
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--lcs-len", type=int, nargs="*", default=[64, 256, 1024])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if kernels.cosine_scores_numba is None:
        raise SystemExit(
            "numba path unavailable (HMRAG_NUMBA=0 or numba missing); nothing to compare"
        )
    print(f"dispatching default: {'numba' if kernels.NUMBA_ENABLED else 'numpy'}")
    bench_cosine(args.cosine_rows, args.dim, args.repeat)
    bench_lcs(args.lcs_len, args.repeat)


if __name__ == "__main__":
    main()
