"""Independent straight-line reference implementations used as oracles.

Deliberately naive plain-Python loops, kept separate from the library's
vectorized/compiled paths so each check runs along two routes.
"""

from __future__ import annotations

import math

K1 = 1.2
B = 0.75


def bm25_reference(query_tokens: list[str], corpus_tokens: list[list[str]], doc_index: int) -> float:
    """Okapi BM25 with nonnegative idf, one term at a time, no shortcuts."""
    n_docs = len(corpus_tokens)
    if n_docs == 0:
        return 0.0
    avgdl = sum(len(doc) for doc in corpus_tokens) / n_docs
    doc = corpus_tokens[doc_index]
    dl = len(doc)
    score = 0.0
    for token in query_tokens:
        df = sum(1 for d in corpus_tokens if token in d)
        if df == 0:
            continue
        tf = doc.count(token)
        if tf == 0:
            continue
        idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
        denom = tf + K1 * (1.0 - B + B * dl / avgdl)
        score += idf * (tf * (K1 + 1.0)) / denom
    return score


def cosine_reference(u: list[float], v: list[float]) -> float:
    dot = 0.0
    nu = 0.0
    nv = 0.0
    for a, b in zip(u, v):
        dot += a * b
        nu += a * a
        nv += b * b
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (math.sqrt(nu) * math.sqrt(nv))


def topk_reference(scores: list[float], entry_ids: list[str], m: int) -> list[str]:
    """Exhaustive-scan argsort: highest score first, ties by ascending id."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], entry_ids[i]))
    return [entry_ids[i] for i in order[:m]]


def mean_reference(pairs: list[tuple[float, float]]) -> float:
    total = 0.0
    for p1, p2 in pairs:
        total += p1 - p2
    return total / len(pairs)
