"""Graded-relevance retrieval metrics, significance testing, and the
embedding-discriminability probe.

NDCG uses exponential gain (2^grade - 1) with a log2(rank + 1) discount,
which reduces to binary gain on {0,1} judgments. Queries with no relevant
documents are excluded from the NDCG/recall/F1 macro means and reported
as a count; precision and MRR treat them as zeros.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

QrelSet = dict[tuple[str, str], int]


class LengthMismatch(ValueError):
    """Paired significance test got arrays of different lengths."""


class TooFewPoints(ValueError):
    """knn purity needs at least k + 1 points."""


def load_qrels(path) -> QrelSet:
    """TSV: query_id <tab> doc_id <tab> grade."""
    qrels: QrelSet = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'query doc grade', got {line.rstrip()!r}")
            qid, did, grade = parts
            qrels[(qid, did)] = int(grade)
    return qrels


def save_qrels(qrels: QrelSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, did), grade in sorted(qrels.items()):
            fh.write(f"{qid}\t{did}\t{grade}\n")


def grades_for(qrels: QrelSet, query_id: str) -> dict[str, int]:
    return {did: g for (qid, did), g in qrels.items() if qid == query_id}


def _gain(grade: int) -> float:
    return float(2**grade - 1)


def ndcg_at_k(ranked_ids: Sequence[str], qrels: QrelSet, query_id: str, k: int) -> float:
    """DCG over the top k with exponential gain, normalized by the ideal DCG."""
    if k < 1:
        raise ValueError("k must be >= 1")
    grades = grades_for(qrels, query_id)
    ideal = sorted((g for g in grades.values() if g > 0), reverse=True)
    if not ideal:
        return 0.0
    dcg = 0.0
    for i, doc_id in enumerate(ranked_ids[:k], start=1):
        g = grades.get(doc_id, 0)
        if g > 0:
            dcg += _gain(g) / math.log2(i + 1)
    idcg = sum(_gain(g) / math.log2(i + 1) for i, g in enumerate(ideal[:k], start=1))
    return dcg / idcg


def mrr_at_k(ranked_ids: Sequence[str], qrels: QrelSet, query_id: str, k: int) -> float:
    """Reciprocal rank of the first relevant doc within the top k, else 0."""
    grades = grades_for(qrels, query_id)
    for i, doc_id in enumerate(ranked_ids[:k], start=1):
        if grades.get(doc_id, 0) >= 1:
            return 1.0 / i
    return 0.0


def prf_at_k(ranked_ids: Sequence[str], qrels: QrelSet, query_id: str,
             k: int) -> tuple[float, float, float]:
    """(precision, recall, F1) at k for one query; F1 is 0 when P + R = 0."""
    grades = grades_for(qrels, query_id)
    total_rel = sum(1 for g in grades.values() if g >= 1)
    hits = sum(1 for doc_id in ranked_ids[:k] if grades.get(doc_id, 0) >= 1)
    p = hits / k
    r = hits / total_rel if total_rel else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f1


def recall_at_k(ranked_ids: Sequence[str], qrels: QrelSet, query_id: str, k: int) -> float:
    return prf_at_k(ranked_ids, qrels, query_id, k)[1]


@dataclass
class MetricReport:
    """Per-query metric values plus macro means."""

    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    query_count: int
    zero_relevant: int = 0
    zero_relevant_ids: list[str] = field(default_factory=list)

    def save_csv(self, path) -> None:
        metrics = list(self.means.keys())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id"] + metrics)
            for qid in sorted(self.per_query):
                row = self.per_query[qid]
                writer.writerow([qid] + [f"{row[m]:.6f}" if m in row else "" for m in metrics])
            writer.writerow(["MEAN"] + [f"{self.means[m]:.6f}" for m in metrics])

    def save_json(self, path) -> None:
        payload = {
            "means": self.means,
            "per_query": self.per_query,
            "query_count": self.query_count,
            "zero_relevant": self.zero_relevant,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def evaluate_run(
    run: dict[str, list[tuple[str, float]]],
    qrels: QrelSet,
    ndcg_ks: Sequence[int] = (10, 30),
    prf_k: int = 5,
    mrr_k: int = 10,
    recall_ks: Sequence[int] = (100,),
) -> MetricReport:
    """Compute the metric battery for every query in the run."""
    per_query: dict[str, dict[str, float]] = {}
    zero_rel_ids = []
    for qid, items in run.items():
        ranked = [d for d, _ in items]
        has_rel = any(g >= 1 for (q, _), g in qrels.items() if q == qid)
        row: dict[str, float] = {}
        p, r, f1 = prf_at_k(ranked, qrels, qid, prf_k)
        row[f"p@{prf_k}"] = p
        row[f"r@{prf_k}"] = r
        row["f1"] = f1
        row[f"mrr@{mrr_k}"] = mrr_at_k(ranked, qrels, qid, mrr_k)
        for k in ndcg_ks:
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, qrels, qid, k)
        for k in recall_ks:
            row[f"r@{k}"] = recall_at_k(ranked, qrels, qid, k)
        per_query[qid] = row
        if not has_rel:
            zero_rel_ids.append(qid)

    include_all = ["p@%d" % prf_k, f"mrr@{mrr_k}"]
    means: dict[str, float] = {}
    if per_query:
        sample = next(iter(per_query.values()))
        for metric in sample:
            if metric in include_all:
                values = [row[metric] for row in per_query.values()]
            else:
                values = [per_query[q][metric] for q in per_query if q not in zero_rel_ids]
            means[metric] = float(np.mean(values)) if values else 0.0
    return MetricReport(
        per_query=per_query,
        means=means,
        query_count=len(per_query),
        zero_relevant=len(zero_rel_ids),
        zero_relevant_ids=sorted(zero_rel_ids),
    )


def fisher_randomization(a: Sequence[float], b: Sequence[float],
                         iterations: int = 100_000, seed: int = 0,
                         exact_max_n: int = 20) -> float:
    """Two-sided paired sign-flip randomization test on per-query differences.

    Exact enumeration (meet in the middle over all 2^n sign patterns) when
    n <= exact_max_n, otherwise Monte Carlo with add-one smoothing.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired arrays must have equal 1-d shapes, got {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LengthMismatch("need at least one paired observation")
    d = a - b
    observed = abs(d.sum())

    n = d.size
    if n <= exact_max_n:
        half = n // 2
        left = _signed_sums(d[:half])
        right = _signed_sums(d[half:])
        totals = np.abs(left[:, None] + right[None, :])
        count = int((totals >= observed).sum())
        return count / float(2**n)

    rng = np.random.default_rng(seed)
    count = 0
    chunk = 10_000
    remaining = iterations
    while remaining > 0:
        m = min(chunk, remaining)
        signs = rng.integers(0, 2, size=(m, n)) * 2 - 1
        sums = np.abs(signs @ d)
        count += int((sums >= observed).sum())
        remaining -= m
    return (count + 1) / (iterations + 1)


def _signed_sums(values: np.ndarray) -> np.ndarray:
    """All 2^m sums of +/- values, in bit-pattern order."""
    sums = np.zeros(1)
    for v in values:
        sums = np.concatenate([sums - v, sums + v])
    return sums


def knn_purity(embeddings: np.ndarray, labels: Sequence, k: int = 10) -> float:
    """Mean fraction of each point's k dot-product neighbors sharing its label."""
    embeddings = np.asarray(embeddings)
    n = embeddings.shape[0]
    if n < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points, got {n}")
    if len(labels) != n:
        raise ValueError("labels must align with embeddings")
    labels = np.asarray(labels)
    sims = embeddings @ embeddings.T
    total = 0.0
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf  # a point is not its own neighbor
        order = np.argsort(-row, kind="stable")[:k]
        total += float(np.mean(labels[order] == labels[i]))
    return total / n
