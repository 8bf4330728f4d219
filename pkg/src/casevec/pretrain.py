"""Structure-aware pre-training loop and the hyperparameter sweep driver.

Facts get light random masking, reasoning gets aggressive random masking,
and decisions are masked either at their outcome slots (law article,
charge, term) or at high-TF-IDF positions. Per-example mask streams are
derived from (seed, epoch, doc_id, section), so batches are reproducible
under any scheduling.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import CaseDocument, filter_trainable
from .masking import MaskedExample, derive_rng, mask_random, mask_slots, mask_tfidf
from .model import LossBreakdown, ModelConfig, PretrainExample, StructuredCaseEncoder
from .numerics import autograd as ag
from .numerics.optim import AdamW, lr_schedule
from .textproc import CorpusStats, EmptyCorpus, Vocabulary, build_stats, build_vocab, tokenize

ABLATIONS = ("full", "no_rea", "no_dec", "no_both", "shared_decoder")


@dataclass
class PretrainConfig:
    encoder_mask_ratio: float = 0.15
    decoder_mask_ratio: float = 0.45
    decision_mask_mode: str = "slots"  # slots | tfidf
    batch_size: int = 16
    epochs: int = 4
    base_lr: float = 2e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        for name in ("encoder_mask_ratio", "decoder_mask_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decision_mask_mode not in ("slots", "tfidf"):
            raise ValueError("decision_mask_mode must be 'slots' or 'tfidf'")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")


@dataclass
class TrainLogRow:
    step: int
    l_mlm: float
    l_rea: float
    l_dec: float
    l_total: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def save_csv(self, path) -> None:
        # wall_time stays in memory only; run outputs must be byte-identical
        # across reruns with the same config.
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_mlm", "l_rea", "l_dec", "l_total", "lr"])
            for r in self.rows:
                writer.writerow([r.step, f"{r.l_mlm:.6f}", f"{r.l_rea:.6f}", f"{r.l_dec:.6f}",
                                 f"{r.l_total:.6f}", f"{r.lr:.8g}"])


def model_config_for(config: PretrainConfig, vocab_size: int,
                     base: Optional[ModelConfig] = None) -> ModelConfig:
    """Apply the ablation flags to a model config."""
    if base is None:
        base = ModelConfig(vocab_size=vocab_size)
    cfg = ModelConfig.from_dict(base.to_dict())
    cfg.vocab_size = vocab_size
    cfg.reasoning_decoder = config.ablation in ("full", "no_dec", "shared_decoder")
    cfg.decision_decoder = config.ablation in ("full", "no_rea", "shared_decoder")
    cfg.shared_decoder = config.ablation == "shared_decoder"
    return cfg


def decision_slot_spans(tokens: Sequence[str], doc: CaseDocument) -> list[tuple[int, int]]:
    """Single-token spans over the decision's outcome slots.

    Slots are located by matching the document's labels (law ids, charge
    name tokens, term) against the decision tokens.
    """
    targets: set[str] = set()
    if doc.law_ids:
        targets.update(str(x) for x in doc.law_ids)
    if doc.charge_label:
        targets.update(tokenize(str(doc.charge_label)))
    if doc.term_months is not None:
        targets.add(str(doc.term_months))
    return [(i, i + 1) for i, t in enumerate(tokens) if t in targets]


def _has_slot_labels(doc: CaseDocument) -> bool:
    return bool(doc.law_ids) or doc.charge_label is not None or doc.term_months is not None


def mask_document(
    doc: CaseDocument,
    config: PretrainConfig,
    vocab: Vocabulary,
    stats: Optional[CorpusStats],
    epoch: int,
) -> PretrainExample:
    """Mask the three sections of one document for one epoch."""
    max_tokens = None  # truncation applied by caller through vocab.encode_text
    fact_ids = vocab.encode_text(doc.fact, max_tokens)
    fact = mask_random(
        fact_ids, config.encoder_mask_ratio,
        derive_rng(config.seed, "mask", epoch, doc.id, "fact"),
        section="fact", doc_id=doc.id,
    )

    reasoning: Optional[MaskedExample] = None
    if doc.reasoning.strip():
        rea_ids = vocab.encode_text(doc.reasoning, max_tokens)
        if rea_ids:
            reasoning = mask_random(
                rea_ids, config.decoder_mask_ratio,
                derive_rng(config.seed, "mask", epoch, doc.id, "reasoning"),
                section="reasoning", doc_id=doc.id,
            )

    decision: Optional[MaskedExample] = None
    if doc.decision.strip():
        dec_tokens = tokenize(doc.decision)
        dec_ids = vocab.encode(dec_tokens)
        if dec_ids:
            if config.decision_mask_mode == "slots" and _has_slot_labels(doc):
                spans = decision_slot_spans(dec_tokens, doc)
                decision = mask_slots(dec_ids, spans, section="decision", doc_id=doc.id)
            else:
                if stats is None:
                    raise ValueError("CorpusStats required for TF-IDF decision masking")
                decision = mask_tfidf(
                    dec_ids, config.decoder_mask_ratio, stats, vocab,
                    section="decision", doc_id=doc.id,
                )
    return PretrainExample(fact=fact, reasoning=reasoning, decision=decision)


def build_pretrain_batch(
    docs: Sequence[CaseDocument],
    config: PretrainConfig,
    vocab: Vocabulary,
    stats: Optional[CorpusStats] = None,
    epoch: int = 0,
) -> list[PretrainExample]:
    """Masked batch for the given documents; deterministic per (seed, epoch, doc)."""
    out = []
    for doc in docs:
        ex = mask_document(doc, config, vocab, stats, epoch)
        if config.ablation in ("no_rea", "no_both"):
            ex.reasoning = None
        if config.ablation in ("no_dec", "no_both"):
            ex.decision = None
        out.append(ex)
    return out


@dataclass
class PretrainResult:
    model: StructuredCaseEncoder
    vocab: Vocabulary
    log: TrainLog
    stats: Optional[CorpusStats]


def _truncate_sections(docs: Sequence[CaseDocument], vocab: Vocabulary, max_len: int) -> list[CaseDocument]:
    """Re-materialize sections truncated to what the model can consume."""
    limit = max_len - 1
    out = []
    for doc in docs:
        trimmed = CaseDocument(
            id=doc.id,
            procedure=doc.procedure,
            fact=" ".join(tokenize(doc.fact)[:limit]),
            reasoning=" ".join(tokenize(doc.reasoning)[:limit]),
            decision=" ".join(tokenize(doc.decision)[:limit]),
            tail=doc.tail,
            charge_label=doc.charge_label,
            law_ids=doc.law_ids,
            term_months=doc.term_months,
        )
        out.append(trimmed)
    return out


def pretrain(
    docs: Sequence[CaseDocument],
    config: PretrainConfig,
    vocab: Optional[Vocabulary] = None,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[Path] = None,
    log_every: int = 0,
) -> PretrainResult:
    """Train a model on the corpus; checkpoint per epoch when out_dir is set."""
    docs = filter_trainable(docs)
    if not docs:
        raise EmptyCorpus("no trainable documents (empty or too-short facts)")
    if vocab is None:
        texts = []
        for d in docs:
            texts.extend([d.fact, d.reasoning, d.decision])
        vocab = build_vocab(texts)

    cfg = model_config_for(config, len(vocab), model_config)
    docs = _truncate_sections(docs, vocab, cfg.max_len)

    stats: Optional[CorpusStats] = None
    needs_tfidf = cfg.decision_decoder and (
        config.decision_mask_mode == "tfidf" or any(not _has_slot_labels(d) for d in docs)
    )
    if needs_tfidf:
        stats = build_stats((d.id, d.decision) for d in docs if d.decision.strip())

    model = StructuredCaseEncoder(cfg, seed=config.seed)
    opt = AdamW(model.params, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(docs) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log = TrainLog()
    t0 = time.perf_counter()
    step = 0

    for epoch in range(config.epochs):
        order = derive_rng(config.seed, "shuffle", epoch).permutation(len(docs))
        for start in range(0, len(docs), config.batch_size):
            batch_docs = [docs[i] for i in order[start:start + config.batch_size]]
            batch = build_pretrain_batch(batch_docs, config, vocab, stats, epoch)
            step += 1
            lr = lr_schedule(step, total_steps, config.warmup_ratio, config.base_lr)
            opt.zero_grad()
            dropout_rng = derive_rng(config.seed, "dropout", step) if cfg.dropout > 0 else None
            try:
                total, breakdown = model.loss_total(batch, train=True, rng=dropout_rng)
            except Exception as exc:
                raise RuntimeError(f"pre-training failed at step {step}: {exc}") from exc
            ag.backward(total, params=model.params.values())
            opt.step(lr)
            log.rows.append(TrainLogRow(
                step=step, l_mlm=breakdown.l_mlm, l_rea=breakdown.l_rea,
                l_dec=breakdown.l_dec, l_total=breakdown.l_total,
                lr=lr, wall_time=time.perf_counter() - t0,
            ))
            if log_every and step % log_every == 0:
                print(f"step {step}/{total_steps} l_total={breakdown.l_total:.4f} lr={lr:.2e}")
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            ckpt = out_dir / f"checkpoint_epoch{epoch + 1}.cvck"
            model.save(ckpt, meta={"epoch": epoch + 1, "step": step, "pretrain": asdict(config)})
            log.checkpoints.append(str(ckpt))
    return PretrainResult(model=model, vocab=vocab, log=log, stats=stats)


def embed_corpus(model: StructuredCaseEncoder, vocab: Vocabulary,
                 docs: Sequence[CaseDocument], side: str = "fact") -> np.ndarray:
    """Matrix of document vectors in corpus order."""
    from .retrieval import doc_text  # local import to avoid a cycle

    limit = model.config.max_len - 1
    rows = [model.embed(vocab.encode_text(doc_text(d, side), limit)) for d in docs]
    return np.stack(rows, axis=0)


def purity_probe(model: StructuredCaseEncoder, vocab: Vocabulary,
                 docs: Sequence[CaseDocument], k: int = 10) -> float:
    """10-NN charge purity of fact embeddings; the discriminability probe."""
    from .evalkit import knn_purity

    labeled = [d for d in docs if d.charge_label is not None]
    embeddings = embed_corpus(model, vocab, labeled, side="fact")
    labels = [d.charge_label for d in labeled]
    return knn_purity(embeddings, labels, k=k)


SWEEP_AXES = ("encoder_ratio", "decoder_ratio", "decoder_layers", "mask_grid")


def sweep(
    docs: Sequence[CaseDocument],
    axis: str,
    values: Sequence,
    config: PretrainConfig,
    model_config: Optional[ModelConfig] = None,
    probe: Optional[Callable[[PretrainResult], float]] = None,
    probe_name: str = "purity",
) -> list[dict]:
    """Train one model per axis value (shared seed) and evaluate the probe.

    axis 'mask_grid' takes (encoder_ratio, decoder_ratio) pairs; the other
    axes take scalars. Returns one row per value.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    if probe is None:
        probe = lambda res: purity_probe(res.model, res.vocab, list(docs))

    rows = []
    for value in values:
        run_cfg = PretrainConfig(**asdict(config))
        run_model_cfg = model_config
        if axis == "encoder_ratio":
            run_cfg.encoder_mask_ratio = float(value)
        elif axis == "decoder_ratio":
            run_cfg.decoder_mask_ratio = float(value)
        elif axis == "mask_grid":
            run_cfg.encoder_mask_ratio = float(value[0])
            run_cfg.decoder_mask_ratio = float(value[1])
        elif axis == "decoder_layers":
            base = model_config or ModelConfig(vocab_size=5)
            run_model_cfg = ModelConfig.from_dict(base.to_dict())
            run_model_cfg.n_decoder_layers = int(value)
        result = pretrain(docs, run_cfg, model_config=run_model_cfg)
        metric = probe(result)
        row = {
            "encoder_mask_ratio": run_cfg.encoder_mask_ratio,
            "decoder_mask_ratio": run_cfg.decoder_mask_ratio,
            "decoder_layers": (run_model_cfg or ModelConfig(vocab_size=5)).n_decoder_layers,
            probe_name: metric,
        }
        rows.append(row)
    return rows


def save_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
