"""Retrieval scoring kernels.

The corpus scans (Okapi BM25 accumulation, cosine similarity) are the only
numeric hot loops in the pipeline, so they carry numba ``@njit`` kernels with
a pure-numpy fallback. ``NESYCD_NO_NUMBA=1`` selects the fallback; it is also
used automatically when numba cannot be imported. ``benchmarks/bench_scoring.py``
compares the two paths.

BM25 uses k1=1.2, b=0.75 and the nonnegative idf
``ln(1 + (N - df + 0.5) / (df + 0.5))``; repeated query tokens contribute once
per occurrence. The two paths accumulate in identical order so BM25 results
are bit-identical; cosine differs only by BLAS summation order.
"""

from __future__ import annotations

import math
import os

import numpy as np

K1 = 1.2
B = 0.75


def numba_enabled() -> bool:
    return os.environ.get("NESYCD_NO_NUMBA", "").lower() not in ("1", "true", "yes")


def idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def _bm25_accumulate_numpy(query_tids, query_idf, term_ptr, post_doc, post_tf, doc_norm, scores):
    for qi in range(query_tids.shape[0]):
        tid = query_tids[qi]
        lo, hi = term_ptr[tid], term_ptr[tid + 1]
        docs = post_doc[lo:hi]
        tf = post_tf[lo:hi]
        np.add.at(scores, docs, query_idf[qi] * (tf * (K1 + 1.0)) / (tf + doc_norm[docs]))
    return scores


def _cosine_scores_numpy(vectors, query, query_norm):
    if query_norm == 0.0 or vectors.shape[0] == 0:
        return np.zeros(vectors.shape[0], dtype=np.float64)
    v64 = vectors.astype(np.float64)
    dots = v64 @ query
    norms = np.sqrt(np.einsum("ij,ij->i", v64, v64))
    denom = norms * query_norm
    out = np.zeros(vectors.shape[0], dtype=np.float64)
    np.divide(dots, denom, out=out, where=denom > 0.0)
    return out


if numba_enabled():
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _bm25_accumulate_numba(query_tids, query_idf, term_ptr, post_doc, post_tf, doc_norm, scores):
        for qi in range(query_tids.shape[0]):
            tid = query_tids[qi]
            w = query_idf[qi]
            for p in range(term_ptr[tid], term_ptr[tid + 1]):
                d = post_doc[p]
                tf = post_tf[p]
                scores[d] += w * (tf * (K1 + 1.0)) / (tf + doc_norm[d])
        return scores

    @njit(cache=True)
    def _cosine_scores_numba(vectors, query, query_norm):
        n, dim = vectors.shape
        out = np.zeros(n, dtype=np.float64)
        if query_norm == 0.0:
            return out
        for i in range(n):
            dot = 0.0
            row_sq = 0.0
            for j in range(dim):
                v = np.float64(vectors[i, j])  # f32 * f32 would round before the add
                dot += v * query[j]
                row_sq += v * v
            denom = math.sqrt(row_sq) * query_norm
            if denom > 0.0:
                out[i] = dot / denom
        return out

    _bm25_accumulate = _bm25_accumulate_numba
    _cosine_scores = _cosine_scores_numba
    ACTIVE_PATH = "numba"
else:
    _bm25_accumulate = _bm25_accumulate_numpy
    _cosine_scores = _cosine_scores_numpy
    ACTIVE_PATH = "numpy"


def bm25_scores(query_tids, query_idf, term_ptr, post_doc, post_tf, doc_norm, n_docs,
                impl=None) -> np.ndarray:
    """BM25 scores of one query against every document, in document order.

    ``query_tids``/``query_idf`` are per query-token (duplicates kept);
    ``term_ptr``/``post_doc``/``post_tf`` form a CSR postings layout over term
    ids; ``doc_norm[d]`` is the precomputed ``k1 * (1 - b + b * dl/avgdl)``.
    """
    scores = np.zeros(n_docs, dtype=np.float64)
    if n_docs == 0 or query_tids.shape[0] == 0:
        return scores
    fn = impl or _bm25_accumulate
    return fn(
        np.ascontiguousarray(query_tids, dtype=np.int64),
        np.ascontiguousarray(query_idf, dtype=np.float64),
        term_ptr, post_doc, post_tf, doc_norm, scores,
    )


def cosine_scores(vectors: np.ndarray, query: np.ndarray, impl=None) -> np.ndarray:
    """Cosine similarity of one query vector against every row; zero norms score 0."""
    query = np.ascontiguousarray(query, dtype=np.float64)
    query_norm = float(np.sqrt(query @ query))
    fn = impl or _cosine_scores
    return fn(np.ascontiguousarray(vectors, dtype=np.float32), query, query_norm)


# Exposed for the benchmark and the path-agreement test.
IMPLEMENTATIONS = {
    "numpy": (_bm25_accumulate_numpy, _cosine_scores_numpy),
}
if njit is not None:
    IMPLEMENTATIONS["numba"] = (_bm25_accumulate_numba, _cosine_scores_numba)
