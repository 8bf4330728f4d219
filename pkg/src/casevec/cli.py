"""Command-line entry point.

Every command validates its inputs before touching the filesystem, writes
its outputs into --out, and drops a resolved_config.json snapshot next to
them so any run can be reproduced from disk. With a fixed seed, re-running
a command overwrites its outputs with byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evalkit, finetune as finetune_mod, pretrain as pretrain_mod, retrieval
from .corpus import (
    CaseDocument,
    SegmentationRules,
    SyntheticSpec,
    generate_query_set,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    segment_document,
)
from .model import ModelConfig, StructuredCaseEncoder
from .pretrain import PretrainConfig, pretrain, purity_probe, sweep
from .retrieval import EmbeddingIndex, InvertedIndex, RankedList, dense_search, doc_text, lexical_search
from .textproc import Vocabulary, build_stats, build_vocab, tokenize


class CliError(Exception):
    """Configuration or input problem, reported before any computation."""


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise CliError(f"input file not found: {p}")


def _prepare_out(args, extra: dict | None = None) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved.update(extra or {})
    with open(out / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
    return out


def _load_model(checkpoint, vocab_path) -> tuple[StructuredCaseEncoder, Vocabulary]:
    model = StructuredCaseEncoder.load(checkpoint)
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != model.config.vocab_size:
        raise CliError(
            f"vocab size {len(vocab)} does not match checkpoint vocab_size {model.config.vocab_size}"
        )
    return model, vocab


def _model_config_from_args(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_encoder_layers=args.enc_layers,
        n_decoder_layers=args.dec_layers,
        d_ff=args.d_ff,
        max_len=args.max_len,
        dropout=args.dropout,
        dtype=args.dtype,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--enc-layers", type=int, default=4)
    p.add_argument("--dec-layers", type=int, default=1)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")


def _add_pretrain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder-ratio", type=float, default=0.15)
    p.add_argument("--decoder-ratio", type=float, default=0.45)
    p.add_argument("--decision-mask", choices=["slots", "tfidf"], default="slots")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup-ratio", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", choices=list(pretrain_mod.ABLATIONS), default="full")
    _add_model_flags(p)


def _pretrain_config_from_args(args) -> PretrainConfig:
    return PretrainConfig(
        encoder_mask_ratio=args.encoder_ratio,
        decoder_mask_ratio=args.decoder_ratio,
        decision_mask_mode=args.decision_mask,
        batch_size=args.batch_size,
        epochs=args.epochs,
        base_lr=args.lr,
        warmup_ratio=args.warmup_ratio,
        weight_decay=args.weight_decay,
        seed=args.seed,
        ablation=args.ablation,
    )


# -- commands ---------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    spec = SyntheticSpec(
        num_documents=args.num_docs,
        num_charges=args.num_charges,
        key_elements_per_charge=args.key_elements,
        shared_vocab_size=args.shared_vocab,
        noise_token_rate=args.noise_rate,
        seed=args.seed,
        confusable_pair_rate=args.confusable_rate,
    )
    spec.validate()
    if args.queries and args.query_start + args.queries > args.num_docs:
        raise CliError("query range exceeds the corpus size")
    out = _prepare_out(args)
    docs = generate_synthetic_corpus(spec)
    save_corpus(docs, out / "corpus.jsonl")
    if args.queries:
        queries, qrels = generate_query_set(
            docs, args.queries, seed=args.query_seed, start_index=args.query_start
        )
        save_corpus(queries, out / "queries.jsonl")
        evalkit.save_qrels(qrels, out / "qrels.tsv")
    print(f"wrote {len(docs)} documents to {out / 'corpus.jsonl'}")
    return 0


def cmd_segment(args) -> int:
    _require_files(args.input, args.markers)
    rules_kwargs = {}
    if args.markers:
        with open(args.markers, "r", encoding="utf-8") as fh:
            table = json.load(fh)
        rules_kwargs["markers"] = [(name, list(m)) for name, m in table]
    rules = SegmentationRules(strict=args.strict, **rules_kwargs)
    out = _prepare_out(args)
    docs = []
    with open(args.input, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            docs.append(segment_document(obj["text"], rules, doc_id=str(obj.get("id", lineno))))
    save_corpus(docs, out / "corpus.jsonl")
    print(f"segmented {len(docs)} documents into {out / 'corpus.jsonl'}")
    return 0


def cmd_build_vocab(args) -> int:
    _require_files(args.corpus)
    out = _prepare_out(args)
    docs = load_corpus(args.corpus)
    texts = [doc_text(d, "full") for d in docs]
    vocab = build_vocab(texts, min_freq=args.min_freq, max_size=args.max_size)
    vocab.save(out / "vocab.txt")
    if args.stats:
        stats = build_stats((d.id, doc_text(d, "full")) for d in docs)
        stats.save(out / "stats.json")
    print(f"vocabulary of {len(vocab)} tokens written to {out / 'vocab.txt'}")
    return 0


def cmd_pretrain(args) -> int:
    _require_files(args.corpus, args.vocab)
    docs = load_corpus(args.corpus)
    config = _pretrain_config_from_args(args)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    out = _prepare_out(args)
    model_config = _model_config_from_args(args, vocab_size=len(vocab) if vocab else 5)
    result = pretrain(docs, config, vocab=vocab, model_config=model_config,
                      out_dir=out, log_every=args.log_every)
    result.model.save(out / "checkpoint_final.cvck",
                      meta={"pretrain": asdict(config), "steps": len(result.log.rows)})
    result.vocab.save(out / "vocab.txt")
    result.log.save_csv(out / "train_log.csv")
    final = result.log.rows[-1]
    print(f"pre-trained {len(result.log.rows)} steps; final l_total={final.l_total:.4f}")
    return 0


def cmd_mine_negatives(args) -> int:
    _require_files(args.corpus, args.queries, args.qrels)
    out = _prepare_out(args)
    docs = load_corpus(args.corpus)
    queries = load_corpus(args.queries)
    qrels = evalkit.load_qrels(args.qrels)
    index = retrieval.index_corpus(docs, side=args.side)
    report = finetune_mod.mine_hard_negatives(
        queries, qrels, index, top_k=args.top_k, num_negatives=args.num_negatives
    )
    finetune_mod.save_triples(report.triples, out / "triples.tsv")
    print(
        f"mined {len(report.triples)} triples "
        f"(skipped: {report.skipped_no_positive} without positives, "
        f"{report.skipped_no_negatives} without negatives)"
    )
    return 0


def cmd_finetune(args) -> int:
    _require_files(args.checkpoint, args.vocab, args.corpus, args.queries, args.triples)
    model, vocab = _load_model(args.checkpoint, args.vocab)
    docs = load_corpus(args.corpus) + load_corpus(args.queries)
    docs_by_id = {d.id: d for d in docs}
    triples = finetune_mod.load_triples(args.triples)
    config = finetune_mod.FinetuneConfig(
        batch_queries=args.batch_queries,
        num_negatives=args.num_negatives,
        epochs=args.epochs,
        base_lr=args.lr,
        warmup_ratio=args.warmup_ratio,
        weight_decay=args.weight_decay,
        seed=args.seed,
        temperature=args.temperature,
        doc_side=args.side,
    )
    out = _prepare_out(args)
    encoder, losses = finetune_mod.finetune(model, triples, docs_by_id, vocab, config,
                                            out_dir=out, log_every=args.log_every)
    encoder.save(out / "finetuned.cvck", meta={"finetune": asdict(config), "steps": len(losses)})
    last = f"{losses[-1]:.4f}" if losses else "n/a"
    print(f"fine-tuned {len(losses)} steps; final loss={last}")
    return 0


def cmd_index(args) -> int:
    _require_files(args.corpus, getattr(args, "checkpoint", None), getattr(args, "vocab", None))
    out = _prepare_out(args)
    docs = load_corpus(args.corpus)
    if args.kind == "lexical":
        index = retrieval.index_corpus(docs, side=args.side)
        index.save(out / "lexical_index.json")
        print(f"indexed {index.num_docs} documents into {out / 'lexical_index.json'}")
    else:
        model, vocab = _load_model(args.checkpoint, args.vocab)
        matrix = pretrain_mod.embed_corpus(model, vocab, docs, side=args.side)
        index = EmbeddingIndex(matrix=matrix, doc_ids=[d.id for d in docs],
                               fingerprint=Path(args.checkpoint).name)
        index.save(out / "dense_index.cvck")
        print(f"embedded {len(docs)} documents into {out / 'dense_index.cvck'}")
    return 0


def cmd_search(args) -> int:
    _require_files(args.queries, args.index, getattr(args, "checkpoint", None),
                   getattr(args, "vocab", None))
    if args.model == "dense" and not (args.checkpoint and args.vocab):
        raise CliError("dense search needs --checkpoint and --vocab for the query encoder")
    queries = load_corpus(args.queries)
    out = _prepare_out(args)
    rankings = []
    if args.model in ("bm25", "ql"):
        index = InvertedIndex.load(args.index)
        for q in queries:
            ranked = lexical_search(tokenize(q.fact), index, model=args.model, k=args.k)
            rankings.append(RankedList(query_id=q.id, items=ranked.items))
    else:
        index = EmbeddingIndex.load(args.index)
        model, vocab = _load_model(args.checkpoint, args.vocab)
        limit = model.config.max_len - 1
        for q in queries:
            vec = model.embed(vocab.encode_text(q.fact, limit))
            rankings.append(dense_search(vec, index, k=args.k, query_id=q.id))
    retrieval.save_run(rankings, out / "run.trec", tag=args.model)
    print(f"wrote rankings for {len(rankings)} queries to {out / 'run.trec'}")
    return 0


def cmd_evaluate(args) -> int:
    _require_files(args.run, args.qrels)
    out = _prepare_out(args)
    run = retrieval.load_run(args.run)
    qrels = evalkit.load_qrels(args.qrels)
    report = evalkit.evaluate_run(
        run,
        qrels,
        ndcg_ks=[int(x) for x in args.ndcg_k.split(",")],
        prf_k=args.prf_k,
        mrr_k=args.mrr_k,
        recall_ks=[int(x) for x in args.recall_k.split(",")],
    )
    report.save_csv(out / "report.csv")
    report.save_json(out / "report.json")
    summary = " ".join(f"{m}={v:.4f}" for m, v in sorted(report.means.items()))
    print(f"{report.query_count} queries ({report.zero_relevant} without relevant docs): {summary}")
    return 0


def cmd_sweep(args) -> int:
    _require_files(args.corpus)
    if args.grid:
        if args.values:
            raise CliError("--grid and --values are mutually exclusive")
        enc_part, dec_part = args.grid.split("x")
        enc_values = [float(v) for v in enc_part.split(",")]
        dec_values = [float(v) for v in dec_part.split(",")]
        axis = "mask_grid"
        values = [(e, d) for e in enc_values for d in dec_values]
    else:
        if not args.values:
            raise CliError("either --values or --grid is required")
        axis = args.axis
        if axis == "mask_grid":
            raise CliError("use --grid for the mask grid")
        cast = int if axis == "decoder_layers" else float
        values = [cast(v) for v in args.values.split(",")]
    docs = load_corpus(args.corpus)
    config = _pretrain_config_from_args(args)
    model_config = _model_config_from_args(args, vocab_size=5)
    out = _prepare_out(args, extra={"axis": axis, "values": values})
    rows = sweep(docs, axis, values, config, model_config=model_config)
    pretrain_mod.save_sweep_csv(rows, out / "sweep.csv")
    print(f"swept {len(rows)} configurations into {out / 'sweep.csv'}")
    return 0


def cmd_probe_purity(args) -> int:
    _require_files(args.corpus, args.checkpoint, args.vocab)
    out = _prepare_out(args)
    docs = load_corpus(args.corpus)
    model, vocab = _load_model(args.checkpoint, args.vocab)
    value = purity_probe(model, vocab, docs, k=args.k)
    with open(out / "purity.json", "w", encoding="utf-8") as fh:
        json.dump({"knn_purity": value, "k": args.k, "num_docs": len(docs)}, fh, indent=2)
    print(f"{args.k}-NN charge purity: {value:.4f}")
    return 0


def cmd_export_embeddings(args) -> int:
    _require_files(args.corpus, args.checkpoint, args.vocab)
    out = _prepare_out(args)
    docs = load_corpus(args.corpus)
    model, vocab = _load_model(args.checkpoint, args.vocab)
    matrix = pretrain_mod.embed_corpus(model, vocab, docs, side=args.side)
    index = EmbeddingIndex(matrix=matrix, doc_ids=[d.id for d in docs],
                           fingerprint=Path(args.checkpoint).name)
    index.save(out / "embeddings.cvck")
    with open(out / "embeddings.tsv", "w", encoding="utf-8") as fh:
        for doc, row in zip(docs, matrix):
            label = doc.charge_label if doc.charge_label is not None else ""
            fh.write(doc.id + "\t" + label + "\t" + " ".join(f"{x:.6g}" for x in row) + "\n")
    print(f"exported {len(docs)} embeddings to {out / 'embeddings.cvck'}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="casevec",
        description="Structure-aware legal case retrieval: corpora, pre-training, "
                    "fine-tuning, retrieval, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic structured corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-docs", type=int, default=100)
    p.add_argument("--num-charges", type=int, default=4)
    p.add_argument("--key-elements", type=int, default=4)
    p.add_argument("--shared-vocab", type=int, default=120)
    p.add_argument("--noise-rate", type=float, default=0.05)
    p.add_argument("--confusable-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=0, help="also derive this many queries + qrels")
    p.add_argument("--query-start", type=int, default=0)
    p.add_argument("--query-seed", type=int, default=1)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("segment", help="split raw documents into sections")
    p.add_argument("--input", required=True, help="JSONL with {id, text} per line")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--markers", default=None, help="JSON [[section, [markers...]], ...]")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("build-vocab", help="build a word vocabulary from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--stats", action="store_true", help="also cache corpus statistics")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="structure-aware pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", default=None, help="reuse an existing vocabulary")
    p.add_argument("--log-every", type=int, default=0)
    _add_pretrain_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("mine-negatives", help="BM25 hard negatives for fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--num-negatives", type=int, default=15)
    p.add_argument("--side", choices=list(retrieval.DOC_SIDES), default="frd")
    p.set_defaults(func=cmd_mine_negatives)

    p = sub.add_parser("finetune", help="contrastive fine-tuning of the encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-queries", type=int, default=4)
    p.add_argument("--num-negatives", type=int, default=15)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup-ratio", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--side", choices=list(retrieval.DOC_SIDES), default="frd")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("index", help="build a lexical or dense index")
    p.add_argument("kind", choices=["lexical", "dense"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", choices=list(retrieval.DOC_SIDES), default="frd")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="rank documents for queries")
    p.add_argument("--queries", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["bm25", "ql", "dense"], required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ndcg-k", default="10,30")
    p.add_argument("--prf-k", type=int, default=5)
    p.add_argument("--mrr-k", type=int, default=10)
    p.add_argument("--recall-k", default="100")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="mask-ratio or decoder-depth sweep")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=list(pretrain_mod.SWEEP_AXES), default="decoder_layers")
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--grid", default=None,
                   help="encoder x decoder ratio grid, e.g. '0,0.15,0.30x0.15,0.30,0.45,0.60'")
    p.add_argument("--log-every", type=int, default=0)
    _add_pretrain_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe-purity", help="k-NN charge purity of fact embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_probe_purity)

    p = sub.add_parser("export-embeddings", help="embed a corpus and export the matrix")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", choices=list(retrieval.DOC_SIDES), default="fact")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: invalid-input: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
