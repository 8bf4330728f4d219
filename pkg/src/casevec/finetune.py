"""Contrastive fine-tuning with BM25-mined hard negatives.

Each batch packs B queries, each with one positive and N hard negatives;
every query is scored against all B*(N+1) candidate documents by raw dot
product, so beyond its own N hard negatives it faces (B-1)*(N+1) in-batch
negatives. Decoders take no part: only the encoder is trained, and the
output checkpoint carries encoder tensors only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import CaseDocument
from .masking import derive_rng
from .model import StructuredCaseEncoder
from .numerics import autograd as ag
from .numerics.autograd import ShapeMismatch, Tensor
from .numerics.optim import AdamW, lr_schedule
from .retrieval import InvertedIndex, doc_text, lexical_search
from .textproc import Vocabulary, tokenize
from .evalkit import QrelSet


@dataclass
class TrainingTriple:
    query_id: str
    positive_id: str
    negative_ids: list[str]

    def __post_init__(self):
        if self.positive_id in self.negative_ids:
            raise ValueError(f"positive {self.positive_id!r} also listed as a negative")


@dataclass
class FinetuneConfig:
    batch_queries: int = 4       # B
    num_negatives: int = 15      # N
    epochs: int = 3
    base_lr: float = 1e-4
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    temperature: float = 1.0
    doc_side: str = "frd"

    def __post_init__(self):
        if self.batch_queries < 1:
            raise ValueError("batch_queries must be >= 1")
        if self.num_negatives < 0:
            raise ValueError("num_negatives must be >= 0")


@dataclass
class MiningReport:
    triples: list[TrainingTriple]
    skipped_no_positive: int = 0
    skipped_no_negatives: int = 0


def mine_hard_negatives(
    queries: Sequence[CaseDocument],
    qrels: QrelSet,
    index: InvertedIndex,
    top_k: int = 100,
    num_negatives: int = 15,
) -> MiningReport:
    """Top BM25 hits that are not judged relevant, truncated to num_negatives.

    Queries without any judged-relevant document, or whose whole BM25 pool
    is relevant, are skipped and counted.
    """
    if index.num_docs == 0:
        raise ValueError("inverted index is empty")
    report = MiningReport(triples=[])
    for query in queries:
        judged = {did: g for (qid, did), g in qrels.items() if qid == query.id}
        relevant = {did for did, g in judged.items() if g >= 1}
        if not relevant:
            report.skipped_no_positive += 1
            continue
        positive = sorted(relevant, key=lambda d: (-judged[d], d))[0]
        ranked = lexical_search(tokenize(query.fact), index, model="bm25", k=top_k)
        negatives = [d for d in ranked.doc_ids() if d not in relevant][:num_negatives]
        if not negatives:
            report.skipped_no_negatives += 1
            continue
        report.triples.append(TrainingTriple(query.id, positive, negatives))
    return report


def save_triples(triples: Sequence[TrainingTriple], path) -> None:
    """TSV: query_id <tab> positive_id <tab> comma-joined negative ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.query_id}\t{t.positive_id}\t{','.join(t.negative_ids)}\n")


def load_triples(path) -> list[TrainingTriple]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
            out.append(TrainingTriple(parts[0], parts[1], parts[2].split(",") if parts[2] else []))
    return out


def contrastive_loss(scores: Tensor, group_size: Optional[int] = None) -> Tensor:
    """Mean over queries of -log softmax(own positive | all candidates).

    scores has shape (B, B*(N+1)) with document columns ordered
    [q1 positive, q1 negatives, q2 positive, ...]; query i's positive sits
    at column i*(N+1).
    """
    b, m = scores.shape
    if group_size is None:
        if m % b != 0:
            raise ShapeMismatch(f"cannot infer group size from score shape ({b}, {m})")
        group_size = m // b
    if group_size * b != m:
        raise ShapeMismatch(f"score shape ({b}, {m}) does not tile into {b} groups of {group_size}")
    positives = np.arange(b, dtype=np.int64) * group_size
    logp = ag.log_softmax(scores, axis=-1)
    picked = ag.pick(logp, positives)
    return ag.tensor_sum(picked) * (-1.0 / b)


def _stack_embeddings(model: StructuredCaseEncoder, vocab: Vocabulary,
                      texts: Sequence[str], train: bool) -> Tensor:
    limit = model.config.max_len - 1
    rows = []
    for text in texts:
        ids = vocab.encode_text(text, limit)
        h = model.embed_with_grad(ids, train=train)
        rows.append(ag.reshape(h, (1, model.config.d_model)))
    return ag.concat(rows, axis=0)


def batch_scores(
    model: StructuredCaseEncoder,
    vocab: Vocabulary,
    batch: Sequence[TrainingTriple],
    docs_by_id: dict[str, CaseDocument],
    config: FinetuneConfig,
    train: bool = True,
) -> Tensor:
    """Dot-product score matrix of the batch's queries against all candidates."""
    query_texts = [docs_by_id[t.query_id].fact for t in batch]
    doc_texts: list[str] = []
    for t in batch:
        doc_texts.append(doc_text(docs_by_id[t.positive_id], config.doc_side))
        for neg in t.negative_ids:
            doc_texts.append(doc_text(docs_by_id[neg], config.doc_side))
    q = _stack_embeddings(model, vocab, query_texts, train)
    d = _stack_embeddings(model, vocab, doc_texts, train)
    scores = ag.matmul(q, ag.transpose(d, (1, 0)))
    if config.temperature != 1.0:
        scores = scores * (1.0 / config.temperature)
    return scores


def finetune(
    model: StructuredCaseEncoder,
    triples: Sequence[TrainingTriple],
    docs_by_id: dict[str, CaseDocument],
    vocab: Vocabulary,
    config: FinetuneConfig,
    out_dir: Optional[Path] = None,
    log_every: int = 0,
) -> tuple[StructuredCaseEncoder, list[float]]:
    """Train the encoder on triples; returns the encoder-only model and losses.

    Batches need uniform negative counts, so triples are filtered to those
    with exactly num_negatives negatives.
    """
    if not triples:
        raise ValueError("no training triples")
    usable = [t for t in triples if len(t.negative_ids) == config.num_negatives]
    if not usable:
        raise ValueError(
            f"no triples with exactly {config.num_negatives} negatives; "
            "re-mine or adjust num_negatives"
        )
    missing = {
        d for t in usable for d in [t.query_id, t.positive_id, *t.negative_ids]
        if d not in docs_by_id
    }
    if missing:
        raise KeyError(f"triples reference unknown documents: {sorted(missing)[:5]}")

    encoder = model.drop_decoders()
    losses: list[float] = []
    steps_per_epoch = math.ceil(len(usable) / config.batch_queries)
    total_steps = config.epochs * steps_per_epoch
    if total_steps > 0:
        opt = AdamW(encoder.params, weight_decay=config.weight_decay)
        step = 0
        for epoch in range(config.epochs):
            order = derive_rng(config.seed, "ft_shuffle", epoch).permutation(len(usable))
            for start in range(0, len(usable), config.batch_queries):
                batch = [usable[i] for i in order[start:start + config.batch_queries]]
                step += 1
                lr = lr_schedule(step, total_steps, config.warmup_ratio, config.base_lr)
                opt.zero_grad()
                scores = batch_scores(encoder, vocab, batch, docs_by_id, config, train=True)
                loss = contrastive_loss(scores, group_size=config.num_negatives + 1)
                ag.backward(loss, params=encoder.params.values())
                opt.step(lr)
                losses.append(float(loss.data))
                if log_every and step % log_every == 0:
                    print(f"finetune step {step}/{total_steps} loss={losses[-1]:.4f}")
            if out_dir is not None:
                out_dir = Path(out_dir)
                out_dir.mkdir(parents=True, exist_ok=True)
                encoder.save(out_dir / f"finetune_epoch{epoch + 1}.cvck",
                             meta={"epoch": epoch + 1, "step": step})
    return encoder, losses
