"""Corpus-level BLEU-4 with the standard brevity penalty.

Tokenization is case-insensitive whitespace splitting. Clipped n-gram
counts are accumulated over the whole corpus, the four precisions are
combined with uniform weights, and any zero precision zeroes the score.
The aggregate statistics are kept on the report so the headline number
can be recomputed from them.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

MAX_ORDER = 4


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens: Sequence[str], order: int) -> Counter:
    return Counter(
        tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1)
    )


@dataclass
class BleuStats:
    """Clipped match and total counts per n-gram order, plus lengths."""

    matches: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    candidate_length: int = 0
    reference_length: int = 0

    def add(self, candidate: str, references: Sequence[str]) -> None:
        if not references:
            raise ValueError("at least one reference is required")
        cand_tokens = tokenize(candidate)
        ref_token_lists = [tokenize(r) for r in references]
        self.candidate_length += len(cand_tokens)
        self.reference_length += _closest_length(len(cand_tokens), ref_token_lists)
        for order in range(1, MAX_ORDER + 1):
            cand_counts = _ngrams(cand_tokens, order)
            if not cand_counts:
                continue
            max_ref: Counter = Counter()
            for ref_tokens in ref_token_lists:
                for gram, count in _ngrams(ref_tokens, order).items():
                    if count > max_ref[gram]:
                        max_ref[gram] = count
            self.totals[order - 1] += sum(cand_counts.values())
            self.matches[order - 1] += sum(
                min(count, max_ref[gram]) for gram, count in cand_counts.items()
            )

    def merge(self, other: "BleuStats") -> None:
        for i in range(MAX_ORDER):
            self.matches[i] += other.matches[i]
            self.totals[i] += other.totals[i]
        self.candidate_length += other.candidate_length
        self.reference_length += other.reference_length

    def score(self) -> float:
        """BLEU-4 from the accumulated statistics."""
        if self.candidate_length == 0:
            return 0.0
        log_sum = 0.0
        for order in range(MAX_ORDER):
            if self.totals[order] == 0 or self.matches[order] == 0:
                return 0.0
            log_sum += math.log(self.matches[order] / self.totals[order])
        precision_term = math.exp(log_sum / MAX_ORDER)
        if self.candidate_length > self.reference_length:
            bp = 1.0
        else:
            bp = math.exp(1.0 - self.reference_length / self.candidate_length)
        return bp * precision_term

    def to_json(self) -> dict:
        return {
            "matches": list(self.matches),
            "totals": list(self.totals),
            "candidate_length": self.candidate_length,
            "reference_length": self.reference_length,
        }


def _closest_length(candidate_length: int, ref_token_lists: list[list[str]]) -> int:
    # standard effective reference length: closest to the candidate,
    # ties resolved toward the shorter reference
    return min(
        (len(r) for r in ref_token_lists),
        key=lambda n: (abs(n - candidate_length), n),
    )


def sentence_bleu4(candidate: str, references: Sequence[str]) -> float:
    stats = BleuStats()
    stats.add(candidate, references)
    return stats.score()


def corpus_bleu4(
    candidates: Sequence[str], references_per_candidate: Sequence[Sequence[str]]
) -> tuple[float, BleuStats]:
    if len(candidates) != len(references_per_candidate):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references_per_candidate)} reference lists"
        )
    if not candidates:
        raise ValueError("no candidates to score")
    stats = BleuStats()
    for candidate, references in zip(candidates, references_per_candidate):
        stats.add(candidate, references)
    return stats.score(), stats
