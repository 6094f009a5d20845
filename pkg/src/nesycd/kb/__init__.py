"""Specialized knowledge base: persistence and top-m retrieval.

A built KB is immutable and safe for unbounded concurrent queries. The
retrieval key is the entry's stored question text only; scoring is either
Okapi BM25 over lowercased alphanumeric tokens or cosine similarity over
service-provided embeddings, always by exhaustive scan (KB sizes are a few
thousand entries, exactness beats approximate speed).

On-disk layout (one directory per KB):

    entries.jsonl   one entry per line, indexed entries first, then the
                    parse_ok=false entries preserved for human curation
    vectors.f32     little-endian float32, row-major, no header (optional)
    manifest.json   {"version", "embedder", "dim", "count", "unparsed_count",
                     "checksums": {"entries", "vectors"}}

Loading verifies the version, both checksums, and the entry counts, and
rebuilds the lexical statistics from the entries (they are derivable, so
consistency is by construction).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..core import KnowledgeEntry
from . import scoring

FORMAT_VERSION = "1"
EMBED_BATCH = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class KBError(RuntimeError):
    pass


class KBVersionError(KBError):
    pass


class KBChecksumError(KBError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric tokens; everything else is a separator."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RetrievalResult:
    entry_id: str
    score: float
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank is 1-based")


@dataclass(frozen=True)
class LexicalStats:
    """CSR postings over the entry questions, plus document-length norms."""

    vocab: dict[str, int]
    term_ptr: np.ndarray   # int64, len = |vocab| + 1
    post_doc: np.ndarray   # int64
    post_tf: np.ndarray    # float64
    doc_len: np.ndarray    # int64
    doc_norm: np.ndarray   # float64: k1 * (1 - b + b * dl / avgdl)
    avgdl: float
    df: np.ndarray         # int64 per term id


def build_lexical_stats(questions: Sequence[str]) -> LexicalStats:
    vocab: dict[str, int] = {}
    doc_terms: list[dict[int, int]] = []
    doc_len = np.zeros(len(questions), dtype=np.int64)
    for d, question in enumerate(questions):
        tokens = tokenize(question)
        doc_len[d] = len(tokens)
        counts: dict[int, int] = {}
        for token in tokens:
            tid = vocab.setdefault(token, len(vocab))
            counts[tid] = counts.get(tid, 0) + 1
        doc_terms.append(counts)

    n_terms = len(vocab)
    df = np.zeros(n_terms, dtype=np.int64)
    for counts in doc_terms:
        for tid in counts:
            df[tid] += 1
    term_ptr = np.zeros(n_terms + 1, dtype=np.int64)
    np.cumsum(df, out=term_ptr[1:])
    post_doc = np.zeros(term_ptr[-1], dtype=np.int64)
    post_tf = np.zeros(term_ptr[-1], dtype=np.float64)
    cursor = term_ptr[:-1].copy()
    for d, counts in enumerate(doc_terms):
        for tid, tf in counts.items():
            post_doc[cursor[tid]] = d
            post_tf[cursor[tid]] = float(tf)
            cursor[tid] += 1

    avgdl = float(doc_len.mean()) if len(questions) else 0.0
    if avgdl > 0.0:
        doc_norm = scoring.K1 * (1.0 - scoring.B + scoring.B * doc_len / avgdl)
    else:
        doc_norm = np.full(len(questions), scoring.K1, dtype=np.float64)
    return LexicalStats(
        vocab=vocab,
        term_ptr=term_ptr,
        post_doc=post_doc,
        post_tf=post_tf,
        doc_len=doc_len,
        doc_norm=doc_norm.astype(np.float64),
        avgdl=avgdl,
        df=df,
    )


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    entries: tuple[KnowledgeEntry, ...]
    unparsed: tuple[KnowledgeEntry, ...]
    lexical: LexicalStats
    embedder: str | None = None
    vectors: np.ndarray | None = None  # float32, one row per entry

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors is not None else 0

    def manifest(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "embedder": self.embedder,
            "dim": self.dim,
            "count": len(self.entries),
            "unparsed_count": len(self.unparsed),
        }

    def entry_by_id(self, entry_id: str) -> KnowledgeEntry:
        for entry in self.entries:
            if entry.entry_id == entry_id:
                return entry
        raise KeyError(entry_id)

    def equals(self, other: "KnowledgeBase") -> bool:
        """Structural equality; vectors must match bit-exactly."""
        if self.entries != other.entries or self.unparsed != other.unparsed:
            return False
        if self.embedder != other.embedder:
            return False
        if (self.vectors is None) != (other.vectors is None):
            return False
        if self.vectors is not None and self.vectors.tobytes() != other.vectors.tobytes():
            return False
        return True


def build_kb(
    entries: Iterable[KnowledgeEntry],
    embed: Callable[[Sequence[str]], list[list[float]]] | None = None,
    embedder_id: str | None = None,
) -> KnowledgeBase:
    """Index parsed entries; parse_ok=false ones are kept aside, not indexed.

    When an embed capability is given, entry questions are embedded in
    batches and the vector matrix is aligned with the indexed entries.
    """
    parsed: list[KnowledgeEntry] = []
    unparsed: list[KnowledgeEntry] = []
    seen: set[str] = set()
    for entry in entries:
        if entry.entry_id in seen:
            raise KBError(f"duplicate entry_id {entry.entry_id!r}")
        seen.add(entry.entry_id)
        (parsed if entry.parse_ok else unparsed).append(entry)

    vectors = None
    if embed is not None and parsed:
        rows: list[list[float]] = []
        questions = [entry.question for entry in parsed]
        for start in range(0, len(questions), EMBED_BATCH):
            rows.extend(embed(questions[start:start + EMBED_BATCH]))
        dims = {len(row) for row in rows}
        if len(dims) != 1:
            raise KBError(f"embedder returned inconsistent dimensions: {sorted(dims)}")
        vectors = np.asarray(rows, dtype=np.float32)

    return KnowledgeBase(
        entries=tuple(parsed),
        unparsed=tuple(unparsed),
        lexical=build_lexical_stats([entry.question for entry in parsed]),
        embedder=embedder_id,
        vectors=vectors,
    )


def _bm25_all(query: str, kb: KnowledgeBase) -> np.ndarray:
    stats = kb.lexical
    n_docs = len(kb.entries)
    tids: list[int] = []
    weights: list[float] = []
    for token in tokenize(query):
        tid = stats.vocab.get(token)
        if tid is None:
            continue
        tids.append(tid)
        weights.append(scoring.idf(n_docs, int(stats.df[tid])))
    return scoring.bm25_scores(
        np.asarray(tids, dtype=np.int64),
        np.asarray(weights, dtype=np.float64),
        stats.term_ptr,
        stats.post_doc,
        stats.post_tf,
        stats.doc_norm,
        n_docs,
    )


def lexical_score(query: str, entry_index: int, kb: KnowledgeBase) -> float:
    """Okapi BM25 (k1=1.2, b=0.75) score of the query against one entry."""
    return float(_bm25_all(query, kb)[entry_index])


def dense_score(query_vector: Sequence[float], entry_index: int, kb: KnowledgeBase) -> float:
    """Cosine similarity against one entry's vector; zero-norm vectors score 0."""
    if kb.vectors is None:
        raise KBError("knowledge base has no dense vectors")
    query = np.asarray(query_vector, dtype=np.float64)
    if query.shape != (kb.dim,):
        raise KBError(f"query dimension {query.shape} does not match KB dim {kb.dim}")
    row = kb.vectors[entry_index:entry_index + 1]
    return float(scoring.cosine_scores(row, query)[0])


def topk(
    query: str,
    m: int,
    kb: KnowledgeBase,
    retriever: str = "lexical",
    embed: Callable[[Sequence[str]], list[list[float]]] | None = None,
    query_vector: Sequence[float] | None = None,
) -> list[RetrievalResult]:
    """The m highest-scoring entries (fewer when the KB is smaller).

    Ties break by ascending entry_id, so results are deterministic across
    runs. An empty KB yields an empty result; the caller decides the fallback.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not kb.entries:
        return []
    if retriever == "lexical":
        scores = _bm25_all(query, kb)
    elif retriever == "dense":
        if kb.vectors is None:
            raise KBError("dense retrieval requested but the KB has no vectors")
        if query_vector is None:
            if embed is None:
                raise KBError("dense retrieval needs an embed capability or a query vector")
            query_vector = embed([query])[0]
        query = np.asarray(query_vector, dtype=np.float64)  # type: ignore[assignment]
        if query.shape != (kb.dim,):  # type: ignore[union-attr]
            raise KBError(f"query dimension {query.shape} does not match KB dim {kb.dim}")  # type: ignore[union-attr]
        scores = scoring.cosine_scores(kb.vectors, query)
    else:
        raise ValueError(f"unknown retriever {retriever!r}")

    order = sorted(range(len(kb.entries)), key=lambda i: (-scores[i], kb.entries[i].entry_id))
    return [
        RetrievalResult(entry_id=kb.entries[i].entry_id, score=float(scores[i]), rank=rank)
        for rank, i in enumerate(order[:m], start=1)
    ]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_kb(kb: KnowledgeBase, directory: str | Path) -> None:
    """Write entries, vectors, and manifest; manifest is written last."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries_path = directory / "entries.jsonl"
    with entries_path.open("w", encoding="utf-8") as fh:
        for entry in list(kb.entries) + list(kb.unparsed):
            fh.write(json.dumps(entry.to_record(), ensure_ascii=False) + "\n")
    checksums = {"entries": _sha256(entries_path), "vectors": None}
    vectors_path = directory / "vectors.f32"
    if kb.vectors is not None:
        vectors_path.write_bytes(np.ascontiguousarray(kb.vectors, dtype="<f4").tobytes())
        checksums["vectors"] = _sha256(vectors_path)
    elif vectors_path.exists():
        vectors_path.unlink()
    manifest = kb.manifest()
    manifest["checksums"] = checksums
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_kb(directory: str | Path) -> KnowledgeBase:
    """Load and verify a KB directory (version, checksums, counts)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise KBError(f"{directory}: no manifest.json (not a KB directory?)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise KBVersionError(
            f"{directory}: format version {version!r} is not the supported {FORMAT_VERSION!r}"
        )
    entries_path = directory / "entries.jsonl"
    checksums = manifest.get("checksums", {})
    if _sha256(entries_path) != checksums.get("entries"):
        raise KBChecksumError(f"{entries_path}: checksum mismatch (file corrupted or edited)")

    parsed: list[KnowledgeEntry] = []
    unparsed: list[KnowledgeEntry] = []
    seen: set[str] = set()
    with entries_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            entry = KnowledgeEntry.from_record(json.loads(line))
            if entry.entry_id in seen:
                raise KBError(f"{entries_path}:{lineno}: duplicate entry_id {entry.entry_id!r}")
            seen.add(entry.entry_id)
            (parsed if entry.parse_ok else unparsed).append(entry)
    if len(parsed) != manifest.get("count"):
        raise KBError(
            f"{directory}: manifest count {manifest.get('count')} != {len(parsed)} indexed entries"
        )
    if len(unparsed) != manifest.get("unparsed_count", 0):
        raise KBError(
            f"{directory}: manifest unparsed_count {manifest.get('unparsed_count')} != {len(unparsed)}"
        )

    vectors = None
    vectors_path = directory / "vectors.f32"
    if checksums.get("vectors") is not None:
        if not vectors_path.exists():
            raise KBError(f"{vectors_path}: missing vectors file named in manifest")
        if _sha256(vectors_path) != checksums["vectors"]:
            raise KBChecksumError(f"{vectors_path}: checksum mismatch (file corrupted or edited)")
        dim = int(manifest.get("dim", 0))
        raw = np.frombuffer(vectors_path.read_bytes(), dtype="<f4")
        if dim <= 0 or raw.size != len(parsed) * dim:
            raise KBError(
                f"{vectors_path}: {raw.size} floats do not form {len(parsed)} x {dim} rows"
            )
        vectors = raw.reshape(len(parsed), dim).copy()

    return KnowledgeBase(
        entries=tuple(parsed),
        unparsed=tuple(unparsed),
        lexical=build_lexical_stats([entry.question for entry in parsed]),
        embedder=manifest.get("embedder"),
        vectors=vectors,
    )


def empty_kb() -> KnowledgeBase:
    return build_kb([])
