#!/usr/bin/env python3
"""Benchmark the retrieval scoring kernels: numba @njit vs pure numpy.

Usage:
    python3 benchmarks/bench_scoring.py [--entries 5000] [--queries 200] [--dim 64]

The same corpus and queries run through both paths; results are checked to
agree before timings are reported. NESYCD_NO_NUMBA only controls which path
the library selects at import time; this benchmark always runs both.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nesycd.kb import build_lexical_stats, scoring


def bench_bm25(stats, queries, n_docs, impl, repeat):
    best = float("inf")
    for _ in range(repeat):
        started = time.perf_counter()
        for tids, weights in queries:
            scoring.bm25_scores(
                tids, weights, stats.term_ptr, stats.post_doc, stats.post_tf,
                stats.doc_norm, n_docs, impl=impl,
            )
        best = min(best, time.perf_counter() - started)
    return best


def bench_cosine(vectors, query_vectors, impl, repeat):
    best = float("inf")
    for _ in range(repeat):
        started = time.perf_counter()
        for query in query_vectors:
            scoring.cosine_scores(vectors, query, impl=impl)
        best = min(best, time.perf_counter() - started)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--entries", type=int, default=5000)
    parser.add_argument("--queries", type=int, default=200)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(7)
    vocabulary = [f"term{i}" for i in range(800)]
    questions = [
        " ".join(rng.choice(vocabulary, size=int(rng.integers(4, 24))))
        for _ in range(args.entries)
    ]
    stats = build_lexical_stats(questions)
    queries = []
    for _ in range(args.queries):
        terms = rng.choice(vocabulary, size=int(rng.integers(2, 8)))
        tids = np.array([stats.vocab[t] for t in terms if t in stats.vocab], dtype=np.int64)
        weights = np.array(
            [scoring.idf(args.entries, int(stats.df[t])) for t in tids], dtype=np.float64
        )
        queries.append((tids, weights))
    vectors = rng.standard_normal((args.entries, args.dim)).astype(np.float32)
    query_vectors = rng.standard_normal((args.queries, args.dim))

    if "numba" not in scoring.IMPLEMENTATIONS:
        print("numba unavailable; only the numpy path can be benchmarked")
        return

    bm25_numba, cos_numba = scoring.IMPLEMENTATIONS["numba"]
    bm25_numpy, cos_numpy = scoring.IMPLEMENTATIONS["numpy"]

    # Agreement check (also triggers JIT compilation outside the timed region).
    tids, weights = queries[0]
    a = scoring.bm25_scores(tids, weights, stats.term_ptr, stats.post_doc, stats.post_tf,
                            stats.doc_norm, args.entries, impl=bm25_numba)
    b = scoring.bm25_scores(tids, weights, stats.term_ptr, stats.post_doc, stats.post_tf,
                            stats.doc_norm, args.entries, impl=bm25_numpy)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    c = scoring.cosine_scores(vectors, query_vectors[0], impl=cos_numba)
    d = scoring.cosine_scores(vectors, query_vectors[0], impl=cos_numpy)
    np.testing.assert_allclose(c, d, rtol=1e-12, atol=1e-12)

    print(f"{args.entries} entries, {args.queries} queries, dim {args.dim} "
          f"(best of {args.repeat})")
    for name, fn in (("numba", bm25_numba), ("numpy", bm25_numpy)):
        seconds = bench_bm25(stats, queries, args.entries, fn, args.repeat)
        print(f"  bm25   {name:>5}: {seconds * 1e3:8.2f} ms "
              f"({seconds / args.queries * 1e6:7.1f} us/query)")
    for name, fn in (("numba", cos_numba), ("numpy", cos_numpy)):
        seconds = bench_cosine(vectors, query_vectors, fn, args.repeat)
        print(f"  cosine {name:>5}: {seconds * 1e3:8.2f} ms "
              f"({seconds / args.queries * 1e6:7.1f} us/query)")


if __name__ == "__main__":
    main()
