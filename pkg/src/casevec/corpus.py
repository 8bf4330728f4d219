"""Case document model, marker-based section segmentation, and synthetic corpora.

A case document has five canonical sections: procedure, fact, reasoning,
decision, tail. Real documents are split with literal start markers
(first occurrence in document order wins); synthetic documents are built
section by section so that every structural claim about the pipeline can
be tested against known ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Iterator, Optional

import numpy as np

SECTIONS = ("procedure", "fact", "reasoning", "decision", "tail")

# Default markers for statute-law style documents where structure is conveyed
# by stock phrases rather than explicit headings.
DEFAULT_MARKERS = {
    "fact": ["after identification"],
    "reasoning": ["The court held that"],
    "decision": ["According to law", "Sentenced to"],
    "tail": ["[tail]", "Presiding judge"],
}

MIN_FACT_TOKENS = 8


class NoFactFound(ValueError):
    """Raised in strict mode when no fact marker matches the document."""


class InvalidSpec(ValueError):
    """Raised when a synthetic corpus spec violates its invariants."""


class ParseError(ValueError):
    """Malformed corpus file record; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class CaseDocument:
    """One case split into its five sections plus outcome labels."""

    id: str
    procedure: str = ""
    fact: str = ""
    reasoning: str = ""
    decision: str = ""
    tail: str = ""
    charge_label: Optional[str] = None
    law_ids: Optional[list[int]] = None
    term_months: Optional[int] = None

    def section(self, name: str) -> str:
        if name not in SECTIONS:
            raise KeyError(f"unknown section {name!r}")
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "CaseDocument":
        law_ids = obj.get("law_ids")
        return cls(
            id=str(obj["id"]),
            procedure=obj.get("procedure", "") or "",
            fact=obj.get("fact", "") or "",
            reasoning=obj.get("reasoning", "") or "",
            decision=obj.get("decision", "") or "",
            tail=obj.get("tail", "") or "",
            charge_label=obj.get("charge_label"),
            law_ids=list(law_ids) if law_ids is not None else None,
            term_months=obj.get("term_months"),
        )


@dataclass
class SegmentationRules:
    """Ordered (section, start markers) table plus the no-match fallback.

    Matching is literal substring, case sensitive. Sections must follow the
    canonical order; fact and reasoning need at least one marker each.
    """

    markers: list[tuple[str, list[str]]] = field(
        default_factory=lambda: [(s, list(DEFAULT_MARKERS.get(s, []))) for s in SECTIONS[1:]]
    )
    strict: bool = False

    def __post_init__(self):
        names = [name for name, _ in self.markers]
        for name in names:
            if name not in SECTIONS:
                raise ValueError(f"unknown section {name!r} in rules")
        order = [SECTIONS.index(n) for n in names]
        if order != sorted(order) or len(set(names)) != len(names):
            raise ValueError("rule sections must be unique and in canonical order")
        by_name = dict(self.markers)
        for required in ("fact", "reasoning"):
            if not by_name.get(required):
                raise ValueError(f"marker list for {required!r} must be non-empty")


def segment_document(raw: str, rules: SegmentationRules, doc_id: str = "doc") -> CaseDocument:
    """Split raw text into sections at the first occurrence of each marker.

    Every character is assigned to exactly one section: text before the first
    matched marker is procedure, each matched section runs until the next
    matched marker (or end of text). Sections with no match stay empty.
    """
    if not raw:
        raise ValueError("raw document text is empty")

    # First occurrence of each section's earliest-matching marker, scanned
    # left to right so later sections cannot begin before earlier ones.
    cuts: list[tuple[int, str]] = []
    search_from = 0
    for name, markers in rules.markers:
        best = -1
        for marker in markers:
            pos = raw.find(marker, search_from)
            if pos != -1 and (best == -1 or pos < best):
                best = pos
        if best != -1:
            cuts.append((best, name))
            search_from = best

    matched = {name for _, name in cuts}
    if "fact" not in matched:
        if rules.strict:
            raise NoFactFound(f"no fact marker matched document {doc_id!r}")
        return CaseDocument(id=doc_id, fact=raw)

    parts = {name: "" for name in SECTIONS}
    parts["procedure"] = raw[: cuts[0][0]]
    for i, (start, name) in enumerate(cuts):
        end = cuts[i + 1][0] if i + 1 < len(cuts) else len(raw)
        parts[name] = raw[start:end]
    return CaseDocument(id=doc_id, **parts)


def join_sections(doc: CaseDocument) -> str:
    """Concatenate sections in canonical order (inverse of segmentation)."""
    return "".join(doc.section(name) for name in SECTIONS)


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic structured-case generator.

    Charges come in confusable pairs whose key-element sets differ in
    exactly one token, so a document and its twin are one word apart in
    the fact yet carry different charges.
    """

    num_documents: int = 100
    num_charges: int = 4
    key_elements_per_charge: int = 4
    shared_vocab_size: int = 120
    noise_token_rate: float = 0.05
    seed: int = 0
    confusable_pair_rate: float = 0.1

    def validate(self) -> None:
        if self.num_documents < 1:
            raise InvalidSpec("num_documents must be >= 1")
        if self.num_charges < 2:
            raise InvalidSpec("num_charges must be >= 2")
        if self.key_elements_per_charge < 1:
            raise InvalidSpec("key_elements_per_charge must be >= 1")
        if self.shared_vocab_size < 10:
            raise InvalidSpec("shared_vocab_size must be >= 10")
        for name in ("noise_token_rate", "confusable_pair_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1], got {value}")


def charge_names(num_charges: int) -> list[str]:
    return [f"offense{c}" for c in range(num_charges)]


def charge_key_elements(spec: SyntheticSpec) -> dict[str, list[str]]:
    """Key-element token set per charge.

    Charges 2i and 2i+1 form a confusable pair: they share all key elements
    except the first (discriminative) one. An odd trailing charge gets a
    fully private set.
    """
    names = charge_names(spec.num_charges)
    m = spec.key_elements_per_charge
    keysets: dict[str, list[str]] = {}
    for c, name in enumerate(names):
        pair = c // 2
        if c + (1 if c % 2 == 0 else -1) < spec.num_charges:
            shared = [f"element{pair}x{j}" for j in range(1, m)]
            keysets[name] = [f"discriminant{c}"] + shared
        else:
            keysets[name] = [f"discriminant{c}"] + [f"element{c}solo{j}" for j in range(1, m)]
    return keysets


def _filler(rng: np.random.Generator, spec: SyntheticSpec, n: int) -> list[str]:
    words = []
    for _ in range(n):
        if spec.noise_token_rate > 0 and rng.random() < spec.noise_token_rate:
            words.append(f"rareword{rng.integers(0, 10 * spec.shared_vocab_size)}")
        else:
            words.append(f"word{rng.integers(0, spec.shared_vocab_size)}")
    return words


def _compose_fact(rng: np.random.Generator, spec: SyntheticSpec, keys: list[str]) -> list[str]:
    n_filler = max(int(rng.integers(18, 30)), len(keys) + 4)
    words = _filler(rng, spec, n_filler)
    slots = sorted(rng.choice(n_filler + 1, size=len(keys), replace=False).tolist())
    for offset, (pos, key) in enumerate(zip(slots, keys)):
        words.insert(pos + offset, key)
    return words


def _key_order(rng: np.random.Generator, keys: list[str]) -> list[str]:
    order = rng.permutation(len(keys))
    return [keys[i] for i in order]


def _build_document(
    doc_id: str,
    charge: str,
    charge_idx: int,
    fact_tokens: list[str],
    keys_in_fact: list[str],
    term: int,
    rng: np.random.Generator,
    spec: SyntheticSpec,
) -> CaseDocument:
    law_id = 100 + charge_idx
    procedure = "The procuratorate of city" + str(int(rng.integers(0, 30))) + " charged defendant person" + str(int(rng.integers(0, 50))) + "."
    fact = "after identification " + " ".join(fact_tokens) + "."
    reasoning = (
        "The court held that the evidence showed "
        + " ".join(keys_in_fact)
        + " and therefore the conduct was established. "
        + " ".join(_filler(rng, spec, 8))
        + "."
    )
    decision = f"According to law {law_id}, the defendant committed {charge} and was sentenced to {term} months."
    tail = "Presiding judge judge" + str(int(rng.integers(0, 20))) + " clerk clerk" + str(int(rng.integers(0, 20))) + "."
    return CaseDocument(
        id=doc_id,
        procedure=procedure,
        fact=fact,
        reasoning=reasoning,
        decision=decision,
        tail=tail,
        charge_label=charge,
        law_ids=[law_id],
        term_months=term,
    )


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[CaseDocument]:
    """Generate a deterministic structured corpus from the spec and its seed.

    Each fact embeds exactly the charge's key elements plus shared filler;
    the reasoning restates every key element; the decision instantiates the
    slot template with the charge's law article, name, and term. A
    confusable_pair_rate fraction of documents is paired with a twin whose
    fact differs in exactly the discriminative key-element token.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0DE]))
    keysets = charge_key_elements(spec)
    names = charge_names(spec.num_charges)
    paired = [c for c in range(spec.num_charges) if c % 2 == 0 and c + 1 < spec.num_charges]

    n_pairs = min(int(math.floor(spec.confusable_pair_rate * spec.num_documents + 0.5)), spec.num_documents // 2)
    docs: list[CaseDocument] = []
    i = 0
    while len(docs) < spec.num_documents:
        doc_id = f"d{i:05d}"
        if len(docs) < 2 * n_pairs and paired:
            # Twin pair: base charge 2p, twin charge 2p+1, one-token fact diff.
            base_c = int(paired[int(rng.integers(0, len(paired)))])
            twin_c = base_c + 1
            base_keys = _key_order(rng, keysets[names[base_c]])
            fact_tokens = _compose_fact(rng, spec, base_keys)
            term = int(rng.integers(3, 120))
            docs.append(
                _build_document(doc_id, names[base_c], base_c, fact_tokens, base_keys, term, rng, spec)
            )
            disc_pos = fact_tokens.index(f"discriminant{base_c}")
            twin_tokens = list(fact_tokens)
            twin_tokens[disc_pos] = f"discriminant{twin_c}"
            twin_keys = [k if k != f"discriminant{base_c}" else f"discriminant{twin_c}" for k in base_keys]
            twin_term = int(rng.integers(3, 120))
            i += 1
            docs.append(
                _build_document(f"d{i:05d}", names[twin_c], twin_c, twin_tokens, twin_keys, twin_term, rng, spec)
            )
        else:
            c = int(rng.integers(0, spec.num_charges))
            keys = _key_order(rng, keysets[names[c]])
            fact_tokens = _compose_fact(rng, spec, keys)
            term = int(rng.integers(3, 120))
            docs.append(_build_document(doc_id, names[c], c, fact_tokens, keys, term, rng, spec))
        i += 1
    return docs[: spec.num_documents]


def twin_pairs(docs: list[CaseDocument]) -> list[tuple[str, str]]:
    """Recover (base id, twin id) pairs from a generated corpus.

    Twins are adjacent by construction and differ in exactly one fact token.
    """
    from .textproc import tokenize

    pairs = []
    for a, b in zip(docs, docs[1:]):
        if a.charge_label == b.charge_label:
            continue
        ta, tb = tokenize(a.fact), tokenize(b.fact)
        if len(ta) == len(tb) and sum(x != y for x, y in zip(ta, tb)) == 1:
            pairs.append((a.id, b.id))
    # Adjacent scan can chain overlapping matches; keep disjoint pairs only.
    seen: set[str] = set()
    out = []
    for a, b in pairs:
        if a in seen or b in seen:
            continue
        out.append((a, b))
        seen.update((a, b))
    return out


def generate_query_set(
    docs: list[CaseDocument],
    num_queries: int,
    seed: int,
    filler_resample_rate: float = 0.3,
    start_index: int = 0,
) -> tuple[list[CaseDocument], dict[tuple[str, str], int]]:
    """Derive fact-only queries from corpus documents plus binary qrels.

    Query i paraphrases the fact of docs[start_index + i] by re-sampling a
    fraction of its filler tokens; key-element tokens are kept so the source
    document remains the single judged-relevant answer.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E3]))
    if start_index + num_queries > len(docs):
        raise ValueError("not enough documents to derive queries from")
    filler_pool = sorted({t for d in docs for t in d.fact.split() if t.startswith("word")})
    queries = []
    qrels: dict[tuple[str, str], int] = {}
    for i in range(num_queries):
        src = docs[start_index + i]
        tokens = src.fact.split()
        out = []
        for tok in tokens:
            if tok.startswith("word") and filler_pool and rng.random() < filler_resample_rate:
                out.append(filler_pool[int(rng.integers(0, len(filler_pool)))])
            else:
                out.append(tok)
        qid = f"q{i:05d}"
        queries.append(CaseDocument(id=qid, fact=" ".join(out), charge_label=src.charge_label))
        qrels[(qid, src.id)] = 1
    return queries, qrels


def filter_trainable(docs: Iterable[CaseDocument], min_fact_tokens: int = MIN_FACT_TOKENS) -> list[CaseDocument]:
    """Drop documents whose fact is empty or shorter than the token floor."""
    from .textproc import tokenize

    return [d for d in docs if len(tokenize(d.fact)) >= min_fact_tokens]


def save_corpus(docs: Iterable[CaseDocument], path) -> None:
    """Write documents as JSON Lines, one object per line, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(doc.to_json())
            fh.write("\n")


def iter_corpus(path) -> Iterator[CaseDocument]:
    """Stream documents from a JSON Lines file, one record in memory at a time."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = CaseDocument.from_dict(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
            yield doc


def load_corpus(path) -> list[CaseDocument]:
    return list(iter_corpus(path))
