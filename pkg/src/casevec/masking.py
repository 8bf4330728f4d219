"""Masking policies for pre-training: random, slot-based, and TF-IDF-based.

All three produce a MaskedExample whose targets overlay back onto the
inputs to restore the original sequence exactly. Masked tokens are always
replaced by [MASK]; there is no identity/random corruption mix. Reserved
ids (0..4) are never selected.
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .textproc import MASK, RESERVED, CorpusStats, Vocabulary

_RESERVED_MAX = len(RESERVED) - 1


class EmptyInput(ValueError):
    """Raised when a masking op receives an empty token sequence."""


class SpanOutOfBounds(ValueError):
    """Raised when a slot span does not fit the token sequence."""


@dataclass
class MaskedExample:
    """One section with [MASK] substitutions and the original targets."""

    input_ids: list[int]
    mask_positions: list[int]
    target_ids: list[int]
    section: str = ""
    doc_id: str = ""

    def __post_init__(self):
        if len(self.mask_positions) != len(self.target_ids):
            raise ValueError("mask_positions and target_ids must align")
        if any(b <= a for a, b in zip(self.mask_positions, self.mask_positions[1:])):
            raise ValueError("mask_positions must be strictly increasing")

    def restore(self) -> list[int]:
        """Overlay targets onto inputs; inverse of masking."""
        out = list(self.input_ids)
        for pos, tid in zip(self.mask_positions, self.target_ids):
            out[pos] = tid
        return out


@dataclass
class MaskPolicy:
    """Which masking regime to apply and with what parameters."""

    kind: str  # random | slots | tfidf
    ratio: float = 0.0
    slot_spans: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("random", "slots", "tfidf"):
            raise ValueError(f"unknown mask policy kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("mask ratio must lie in [0, 1]")


def mask_count(ratio: float, n: int) -> int:
    """Number of positions to mask: round-half-up, at least 1 when ratio > 0."""
    if ratio <= 0.0 or n == 0:
        return 0
    return max(1, int(np.floor(ratio * n + 0.5)))


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Stable per-example random stream from a global seed and string/int keys."""
    entropy = [seed & 0xFFFFFFFF]
    for part in parts:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _apply(token_ids: Sequence[int], positions: list[int], section: str, doc_id: str) -> MaskedExample:
    input_ids = list(token_ids)
    targets = [input_ids[p] for p in positions]
    for p in positions:
        input_ids[p] = MASK
    return MaskedExample(
        input_ids=input_ids,
        mask_positions=positions,
        target_ids=targets,
        section=section,
        doc_id=doc_id,
    )


def _eligible(token_ids: Sequence[int]) -> list[int]:
    return [i for i, t in enumerate(token_ids) if t > _RESERVED_MAX]


def mask_random(
    token_ids: Sequence[int],
    ratio: float,
    rng: np.random.Generator,
    section: str = "",
    doc_id: str = "",
) -> MaskedExample:
    """Mask round(ratio*n) positions chosen uniformly without replacement."""
    if len(token_ids) == 0:
        raise EmptyInput("cannot mask an empty sequence")
    eligible = _eligible(token_ids)
    k = min(mask_count(ratio, len(token_ids)), len(eligible))
    if k == 0:
        return _apply(token_ids, [], section, doc_id)
    chosen = rng.choice(len(eligible), size=k, replace=False)
    positions = sorted(eligible[int(i)] for i in chosen)
    return _apply(token_ids, positions, section, doc_id)


def mask_slots(
    token_ids: Sequence[int],
    slot_spans: Sequence[tuple[int, int]],
    section: str = "",
    doc_id: str = "",
) -> MaskedExample:
    """Mask exactly the tokens inside the given half-open [start, end) spans."""
    n = len(token_ids)
    positions: set[int] = set()
    last_end = -1
    for start, end in sorted(slot_spans):
        if start < 0 or end > n or start > end:
            raise SpanOutOfBounds(f"span ({start}, {end}) out of bounds for length {n}")
        if start < last_end:
            raise SpanOutOfBounds(f"span ({start}, {end}) overlaps a previous span")
        last_end = end
        positions.update(range(start, end))
    positions &= set(_eligible(token_ids))
    return _apply(token_ids, sorted(positions), section, doc_id)


def mask_tfidf(
    token_ids: Sequence[int],
    ratio: float,
    stats: CorpusStats,
    vocab: Vocabulary,
    section: str = "",
    doc_id: str = "",
) -> MaskedExample:
    """Mask the round(ratio*n) highest-TF-IDF positions; ties to lower index."""
    from .textproc import tf_idf

    if len(token_ids) == 0:
        raise EmptyInput("cannot mask an empty sequence")
    eligible = _eligible(token_ids)
    k = min(mask_count(ratio, len(token_ids)), len(eligible))
    if k == 0:
        return _apply(token_ids, [], section, doc_id)
    tokens = vocab.decode(token_ids)
    tf = Counter(tokens[i] for i in eligible)
    scored = [(-tf_idf(tokens[i], tf, stats), i) for i in eligible]
    scored.sort()
    positions = sorted(i for _, i in scored[:k])
    return _apply(token_ids, positions, section, doc_id)
