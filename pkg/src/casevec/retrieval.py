"""Lexical baselines over an inverted index and exhaustive dense search.

BM25 uses the Okapi form with idf = ln((N - df + 0.5)/(df + 0.5) + 1);
query likelihood uses Dirichlet smoothing. Dense search is a full
dot-product scan. All rankings break ties by ascending doc_id.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import CaseDocument
from .numerics.serialize import load_checkpoint, save_checkpoint
from .textproc import tokenize

DOC_SIDES = ("fact", "frd", "full")


class UnknownDoc(KeyError):
    """Scoring was requested for a doc_id the index does not contain."""


class DimMismatch(ValueError):
    """Query vector dimensionality differs from the index."""


class MissingIndex(ValueError):
    """An operation that needs a built index was called without one."""


def doc_text(doc: CaseDocument, side: str = "frd") -> str:
    """Document text under the configured section-concatenation convention."""
    if side == "fact":
        return doc.fact
    if side == "frd":
        return " ".join(s for s in (doc.fact, doc.reasoning, doc.decision) if s)
    if side == "full":
        return " ".join(
            s for s in (doc.procedure, doc.fact, doc.reasoning, doc.decision, doc.tail) if s
        )
    raise ValueError(f"unknown doc side {side!r}; expected one of {DOC_SIDES}")


@dataclass
class RankedList:
    """Descending-score ranking for one query; ties broken by doc_id."""

    query_id: str
    items: list[tuple[str, float]]

    def __post_init__(self):
        ids = [d for d, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate doc_id in ranked list")
        keys = [(-s, d) for d, s in self.items]
        if keys != sorted(keys):
            raise ValueError("ranked list must be sorted by (score desc, doc_id asc)")

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]


def _ranked(query_id: str, scored: Iterable[tuple[str, float]], k: Optional[int]) -> RankedList:
    items = sorted(scored, key=lambda pair: (-pair[1], pair[0]))
    if k is not None:
        items = items[:k]
    return RankedList(query_id=query_id, items=items)


@dataclass
class InvertedIndex:
    """Postings (token -> sorted (doc_id, tf) list) plus length statistics."""

    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_len: dict[str, int] = field(default_factory=dict)
    cf: dict[str, int] = field(default_factory=dict)

    @property
    def num_docs(self) -> int:
        return len(self.doc_len)

    @property
    def total_tokens(self) -> int:
        return sum(self.doc_len.values())

    @property
    def avgdl(self) -> float:
        return self.total_tokens / self.num_docs if self.num_docs else 0.0

    def term_freq(self, token: str, doc_id: str) -> int:
        if doc_id not in self.doc_len:
            raise UnknownDoc(doc_id)
        for d, tf in self.postings.get(token, ()):
            if d == doc_id:
                return tf
        return 0

    def save(self, path) -> None:
        payload = {
            "postings": {t: [[d, tf] for d, tf in plist] for t, plist in self.postings.items()},
            "doc_len": self.doc_len,
            "cf": self.cf,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            postings={t: [(d, int(tf)) for d, tf in plist] for t, plist in payload["postings"].items()},
            doc_len={d: int(n) for d, n in payload["doc_len"].items()},
            cf={t: int(n) for t, n in payload["cf"].items()},
        )


def build_inverted_index(docs: Iterable[tuple[str, str]]) -> InvertedIndex:
    """Index (doc_id, text) pairs; postings end up sorted by doc_id."""
    raw: dict[str, dict[str, int]] = {}
    doc_len: dict[str, int] = {}
    cf: Counter[str] = Counter()
    for doc_id, text in docs:
        if doc_id in doc_len:
            raise ValueError(f"duplicate doc_id {doc_id!r}")
        tf = Counter(tokenize(text))
        doc_len[doc_id] = sum(tf.values())
        cf.update(tf)
        for token, count in tf.items():
            raw.setdefault(token, {})[doc_id] = count
    postings = {t: sorted(by_doc.items()) for t, by_doc in raw.items()}
    return InvertedIndex(postings=postings, doc_len=doc_len, cf=dict(cf))


def index_corpus(docs: Sequence[CaseDocument], side: str = "frd") -> InvertedIndex:
    return build_inverted_index((d.id, doc_text(d, side)) for d in docs)


def bm25_score(query_tokens: Sequence[str], doc_id: str, index: InvertedIndex,
               k1: float = 0.9, b: float = 0.4) -> float:
    """Okapi BM25 of the document for the query (token multiplicity counts)."""
    if doc_id not in index.doc_len:
        raise UnknownDoc(doc_id)
    n = index.num_docs
    dl = index.doc_len[doc_id]
    norm = k1 * (1.0 - b + b * dl / index.avgdl) if index.avgdl else k1
    score = 0.0
    for token in query_tokens:
        plist = index.postings.get(token)
        if not plist:
            continue
        tf = 0
        for d, count in plist:
            if d == doc_id:
                tf = count
                break
        if tf == 0:
            continue
        df = len(plist)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        score += idf * tf * (k1 + 1.0) / (tf + norm)
    return score


def ql_score(query_tokens: Sequence[str], doc_id: str, index: InvertedIndex,
             mu: float = 1000.0) -> float:
    """Dirichlet-smoothed query log-likelihood.

    Query tokens absent from the whole collection have zero smoothed
    probability; they are skipped rather than driving the score to -inf
    (count them with ql_skipped_terms).
    """
    if doc_id not in index.doc_len:
        raise UnknownDoc(doc_id)
    dl = index.doc_len[doc_id]
    total = index.total_tokens
    score = 0.0
    for token in query_tokens:
        cf = index.cf.get(token, 0)
        if cf == 0:
            continue
        tf = 0
        for d, count in index.postings.get(token, ()):
            if d == doc_id:
                tf = count
                break
        score += math.log((tf + mu * cf / total) / (dl + mu))
    return score


def ql_skipped_terms(query_tokens: Sequence[str], index: InvertedIndex) -> int:
    return sum(1 for t in query_tokens if index.cf.get(t, 0) == 0)


def lexical_search(query_tokens: Sequence[str], index: InvertedIndex, model: str = "bm25",
                   k: int = 10, k1: float = 0.9, b: float = 0.4, mu: float = 1000.0) -> RankedList:
    """Rank documents for the query: bm25 scores docs sharing a term, ql scores all."""
    if index.num_docs == 0:
        raise MissingIndex("inverted index is empty")
    if model == "bm25":
        candidates = set()
        for token in set(query_tokens):
            for d, _ in index.postings.get(token, ()):
                candidates.add(d)
        scored = [(d, bm25_score(query_tokens, d, index, k1, b)) for d in sorted(candidates)]
    elif model == "ql":
        scored = [(d, ql_score(query_tokens, d, index, mu)) for d in sorted(index.doc_len)]
    else:
        raise ValueError(f"unknown lexical model {model!r}")
    return _ranked("", scored, k)


@dataclass
class EmbeddingIndex:
    """Dense matrix of document vectors with a row -> doc_id map."""

    matrix: np.ndarray
    doc_ids: list[str]
    fingerprint: str = ""

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.doc_ids):
            raise ValueError("matrix rows must match doc_ids")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc_ids must be unique")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix contains non-finite values")

    def save(self, path) -> None:
        save_checkpoint(
            path,
            config={"doc_ids": self.doc_ids, "fingerprint": self.fingerprint, "kind": "embedding_index"},
            tensors={"matrix": self.matrix},
        )

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        config, tensors, _ = load_checkpoint(path)
        return cls(matrix=tensors["matrix"], doc_ids=list(config["doc_ids"]),
                   fingerprint=config.get("fingerprint", ""))


def dense_search(query_vec: np.ndarray, index: EmbeddingIndex, k: int = 10,
                 query_id: str = "") -> RankedList:
    """Exhaustive dot-product top-k."""
    query_vec = np.asarray(query_vec)
    if query_vec.ndim != 1 or query_vec.shape[0] != index.matrix.shape[1]:
        raise DimMismatch(
            f"query dim {query_vec.shape} vs index dim (*, {index.matrix.shape[1]})"
        )
    scores = index.matrix @ query_vec.astype(index.matrix.dtype)
    return _ranked(query_id, zip(index.doc_ids, (float(s) for s in scores)), k)


def save_run(rankings: Sequence[RankedList], path, tag: str = "run") -> None:
    """TREC run format: query_id Q0 doc_id rank score tag."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in rankings:
            for rank, (doc_id, score) in enumerate(ranked.items, start=1):
                fh.write(f"{ranked.query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def load_run(path) -> dict[str, list[tuple[str, float]]]:
    out: dict[str, list[tuple[str, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"malformed run line: {line.rstrip()}")
            qid, _, doc_id, _, score, _ = parts
            out.setdefault(qid, []).append((doc_id, float(score)))
    return out
