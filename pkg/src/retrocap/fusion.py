"""Fusion scoring: combine LM probability, image-text similarity, and
memory-text similarity into one weighted score and pick the best word.

Each candidate word is judged as part of a full candidate sentence. The
image-text component is a cross-modal cosine; the memory component is
the mean sentence-space cosine against the retrieved captions, whose
embeddings are computed once per refinement and cached.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

from .vectors import CROSS_MODAL, EmbeddingVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionWeights:
    """Weights for the lm / image-text / memory-text components."""

    alpha: float = 0.1
    beta: float = 0.4
    gamma: float = 0.2

    def __post_init__(self) -> None:
        for name, value in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("at least one fusion weight must be positive")


@dataclass(frozen=True)
class CandidateWord:
    """A proposed word and the LM probability it came with."""

    token: str
    lm_prob: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.lm_prob) or self.lm_prob < 0:
            raise ValueError(
                f"lm_prob must be finite and >= 0, got {self.lm_prob!r} for {self.token!r}"
            )


@dataclass(frozen=True)
class ScoreBreakdown:
    """All three components and their weighted combination for one candidate."""

    token: str
    lm: float
    its: float
    tts: float
    fused: float

    def to_json(self) -> dict:
        return {
            "token": self.token,
            "lm": self.lm,
            "its": self.its,
            "tts": self.tts,
            "fused": self.fused,
        }


def fused_score(weights: FusionWeights, lm: float, its: float, tts: float) -> float:
    """The weighted sum, in one place so the arithmetic order never varies."""
    return weights.alpha * lm + weights.beta * its + weights.gamma * tts


class CandidateScoringError(RuntimeError):
    """An embedder failed while scoring one candidate sentence."""

    def __init__(self, index: int, sentence: str, cause: Exception):
        super().__init__(f"embedding failed for candidate {index}: {sentence!r}: {cause}")
        self.index = index


def score_its(
    candidate_sentences: Sequence[str],
    image_embedding: EmbeddingVector,
    text_embedder,
) -> list[float]:
    """Cosine between the image and each full candidate sentence."""
    sentences = list(candidate_sentences)
    if not sentences:
        raise ValueError("candidate sentence list is empty")
    if image_embedding.space != CROSS_MODAL:
        raise ValueError(
            f"image embedding must live in the {CROSS_MODAL!r} space, "
            f"got {image_embedding.space!r}"
        )
    try:
        vectors = text_embedder.embed_texts(sentences)
    except Exception:
        # batch failed: redo one by one so the error names the offender
        vectors = []
        for k, sentence in enumerate(sentences):
            try:
                vectors.append(text_embedder.embed_text(sentence))
            except Exception as exc:
                raise CandidateScoringError(k, sentence, exc) from exc
    return [image_embedding.cosine(v) for v in vectors]


def score_tts(
    candidate_sentences: Sequence[str],
    memory_vectors: Sequence[EmbeddingVector],
    sentence_embedder,
) -> list[float]:
    """Mean sentence-space cosine between each candidate and the memory."""
    sentences = list(candidate_sentences)
    if not sentences:
        raise ValueError("candidate sentence list is empty")
    if not memory_vectors:
        raise ValueError("memory vector list is empty")
    try:
        vectors = sentence_embedder.embed_sentences(sentences)
    except Exception:
        vectors = []
        for k, sentence in enumerate(sentences):
            try:
                vectors.append(sentence_embedder.embed_sentence(sentence))
            except Exception as exc:
                raise CandidateScoringError(k, sentence, exc) from exc
    count = len(memory_vectors)
    return [
        sum(m.cosine(v) for m in memory_vectors) / count for v in vectors
    ]


def fuse_and_select(
    candidates: Sequence[CandidateWord],
    its: Sequence[float],
    tts: Sequence[float],
    weights: FusionWeights,
) -> tuple[int, list[ScoreBreakdown]]:
    """Pick the candidate with the highest fused score.

    Ties go to the lower index. Candidates with a non-finite component
    are excluded from the argmax but still appear in the breakdown list;
    if every candidate is excluded that is an error.
    """
    if not (len(candidates) == len(its) == len(tts)):
        raise ValueError(
            f"length mismatch: {len(candidates)} candidates, "
            f"{len(its)} its scores, {len(tts)} tts scores"
        )
    if not candidates:
        raise ValueError("candidate list is empty")

    breakdowns: list[ScoreBreakdown] = []
    best_index: int | None = None
    best_fused = -math.inf
    for k, candidate in enumerate(candidates):
        components = (candidate.lm_prob, its[k], tts[k])
        fused = fused_score(weights, *components)
        breakdowns.append(
            ScoreBreakdown(candidate.token, candidate.lm_prob, its[k], tts[k], fused)
        )
        if not all(math.isfinite(c) for c in components):
            logger.warning(
                "rejecting candidate %d (%r): non-finite score component %r",
                k,
                candidate.token,
                components,
            )
            continue
        if fused > best_fused:
            best_fused = fused
            best_index = k
    if best_index is None:
        raise ValueError("every candidate had a non-finite score component")
    return best_index, breakdowns


class ScoringContext:
    """Everything needed to score candidate sentences for one image.

    Holds the image embedding, the cross-modal and sentence embedders,
    and the sentence embeddings of the retrieved captions, computed once
    here and reused for every mask of every iteration.
    """

    def __init__(
        self,
        image_embedding: EmbeddingVector,
        retrieved_captions: Sequence[str],
        text_embedder,
        sentence_embedder,
    ):
        if image_embedding.space != CROSS_MODAL:
            raise ValueError(
                f"image embedding must live in the {CROSS_MODAL!r} space"
            )
        captions = list(retrieved_captions)
        if not captions:
            raise ValueError("retrieved caption list is empty")
        self.image_embedding = image_embedding
        self.text_embedder = text_embedder
        self.sentence_embedder = sentence_embedder
        self.memory_vectors = list(sentence_embedder.embed_sentences(captions))

    def select(
        self,
        candidate_sentences: Sequence[str],
        candidates: Sequence[CandidateWord],
        weights: FusionWeights,
    ) -> tuple[int, list[ScoreBreakdown]]:
        its = score_its(candidate_sentences, self.image_embedding, self.text_embedder)
        tts = score_tts(candidate_sentences, self.memory_vectors, self.sentence_embedder)
        return fuse_and_select(candidates, its, tts, weights)
