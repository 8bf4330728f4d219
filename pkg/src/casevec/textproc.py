"""Word-level tokenization, vocabulary, corpus statistics, and TF-IDF.

Tokenization is lowercase whitespace-and-punctuation splitting; masking and
slot handling need exact word spans, so no subword model is used.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class EmptyCorpus(ValueError):
    """Raised when a vocabulary is requested over an empty corpus."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on everything that is not a word character."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token/id bijection with fixed reserved ids 0..4."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.id_to_token[:5]) != list(RESERVED):
            raise ValueError("ids 0..4 must be the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def encode_text(self, text: str, max_len: Optional[int] = None) -> list[int]:
        ids = self.encode(tokenize(text))
        return ids[:max_len] if max_len is not None else ids

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        """One non-reserved token per line; line number equals id - 5."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token[5:]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(list(RESERVED) + tokens)


def build_vocab(
    texts: Iterable[str],
    min_freq: int = 1,
    max_size: Optional[int] = None,
) -> Vocabulary:
    """Frequency vocabulary: sorted by (count desc, token asc), then truncated.

    max_size caps the total size including the five reserved ids. Tokens
    below min_freq are left out and encode to [UNK].
    """
    counts: Counter[str] = Counter()
    seen_any = False
    for text in texts:
        seen_any = True
        counts.update(tokenize(text))
    if not seen_any:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, max_size - len(RESERVED))]
    return Vocabulary(list(RESERVED) + kept)


@dataclass
class TokenizedSection:
    """Token ids of one document section."""

    token_ids: list[int]
    section: str
    doc_id: str


@dataclass
class CorpusStats:
    """Document frequencies and length statistics over a tokenized corpus."""

    df: dict[str, int]
    num_docs: int
    doc_tf: dict[str, Counter]
    avgdl: float

    def save(self, path) -> None:
        payload = {
            "df": self.df,
            "num_docs": self.num_docs,
            "doc_tf": {d: dict(c) for d, c in self.doc_tf.items()},
            "avgdl": self.avgdl,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "CorpusStats":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            df=dict(payload["df"]),
            num_docs=int(payload["num_docs"]),
            doc_tf={d: Counter(c) for d, c in payload["doc_tf"].items()},
            avgdl=float(payload["avgdl"]),
        )


def build_stats(docs: Iterable[tuple[str, str]]) -> CorpusStats:
    """Build stats over (doc_id, text) pairs; one pair is one document."""
    df: Counter[str] = Counter()
    doc_tf: dict[str, Counter] = {}
    total_len = 0
    for doc_id, text in docs:
        tf = Counter(tokenize(text))
        doc_tf[doc_id] = tf
        df.update(tf.keys())
        total_len += sum(tf.values())
    n = len(doc_tf)
    return CorpusStats(df=dict(df), num_docs=n, doc_tf=doc_tf, avgdl=total_len / n if n else 0.0)


def tf_idf(token: str, doc_tokens: Sequence[str], stats: CorpusStats) -> float:
    """tf(token, doc) * ln((N + 1) / (df(token) + 1)); unknown tokens get df 0."""
    tf = doc_tokens.count(token) if not isinstance(doc_tokens, Counter) else doc_tokens[token]
    if tf == 0:
        return 0.0
    df = stats.df.get(token, 0)
    return tf * math.log((stats.num_docs + 1) / (df + 1))
