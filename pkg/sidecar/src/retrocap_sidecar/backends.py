"""Model backends behind the HTTP surface.

The lite backend synthesizes deterministic unit vectors from token
hashes, so the whole service runs without model weights while keeping
the geometry the engine relies on: texts sharing tokens land closer
together than unrelated texts, and image bytes that decode as UTF-8
embed exactly like that text, which makes fixtures controllable.

Real checkpoints are a deployment concern: the four model identifiers
in ServiceConfig say what to load, and a deployment that vendors those
weights plugs in its own backend here. Requesting one without weights
is a startup failure, not a degraded fallback.
"""

from __future__ import annotations

import hashlib
import logging
from functools import lru_cache
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

CROSS_MODAL_SPACE = "cross_modal"
SENTENCE_SPACE = "sentence"
CROSS_MODAL_DIM = 512
SENTENCE_DIM = 384

PROTOCOL_ACTIONS = ("copy", "replace", "insert")

# the constrained LM's native labels, mapped to the wire protocol's three
NATIVE_ACTION_LABELS = {
    "copy": "copy",
    "keep": "copy",
    "replace": "replace",
    "substitute": "replace",
    "insert": "insert",
    "prepend": "insert",
}

_ARTICLES = ("a", "the", "an")
_CONNECTORS = ("on", "with", "and", "in", "near", "under", "over", "by", "at", "beside")
_STOPLIKE = frozenset(
    _ARTICLES
    + _CONNECTORS
    + ("of", "to", "that", "this", "is", "are", "was", "it", "above", "depicts")
)


class BackendStartupError(RuntimeError):
    """The configured backend cannot be brought up."""


def map_action_label(label: str) -> str:
    """Native LM label -> protocol action; unknown labels degrade to copy."""
    action = NATIVE_ACTION_LABELS.get(label)
    if action is None:
        logger.warning("unknown LM action label %r, coercing to copy", label)
        return "copy"
    return action


class LiteBackend:
    """Deterministic stand-in for the four model roles."""

    cross_modal_dim = CROSS_MODAL_DIM
    sentence_dim = SENTENCE_DIM

    def __init__(self, seed: int = 0):
        self.seed = seed

    # embedding synthesis

    @lru_cache(maxsize=65536)
    def _token_vector(self, space: str, token: str, dim: int) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.seed}|{space}|{token}".encode(), digest_size=8
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vector = rng.standard_normal(dim).astype(np.float32)
        return vector / np.linalg.norm(vector)

    def _embed_tokens(self, tokens: Sequence[str], space: str, dim: int) -> np.ndarray:
        mean = np.mean(
            [self._token_vector(space, token, dim) for token in tokens], axis=0
        )
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            raise ValueError("tokens cancel out to a zero vector")
        return (mean / norm).astype(np.float32)

    def _embed_text(self, text: str, space: str, dim: int) -> np.ndarray:
        tokens = text.lower().split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        return self._embed_tokens(tokens, space, dim)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack(
            [self._embed_text(t, CROSS_MODAL_SPACE, CROSS_MODAL_DIM) for t in texts]
        )

    def embed_sentences(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack(
            [self._embed_text(t, SENTENCE_SPACE, SENTENCE_DIM) for t in texts]
        )

    def embed_image(self, data: bytes) -> np.ndarray:
        if not data:
            raise ValueError("image is empty")
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            digest = hashlib.blake2b(
                f"{self.seed}|image".encode() + data, digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vector = rng.standard_normal(CROSS_MODAL_DIM).astype(np.float32)
            return vector / np.linalg.norm(vector)
        return self._embed_text(text, CROSS_MODAL_SPACE, CROSS_MODAL_DIM)

    # constrained LM

    def propose(
        self, tokens: Sequence[str], locked: Sequence[bool], k_w: int
    ) -> tuple[list[str], list[tuple[int, list[tuple[str, float]]]]]:
        """Native (label, mask) proposal: articles before bare content
        words, connectors between adjacent content words, converging to
        all-keep once the sentence is saturated."""
        labels = ["keep"] * len(tokens)
        masks: list[tuple[int, list[tuple[str, float]]]] = []
        lowered = [t.lower() for t in tokens]
        for i, token in enumerate(lowered):
            if token in _STOPLIKE:
                continue
            previous = lowered[i - 1] if i > 0 else None
            if previous in _ARTICLES:
                continue
            if previous is None or previous in _STOPLIKE:
                vocabulary = _ARTICLES + _CONNECTORS
            else:
                vocabulary = _CONNECTORS + _ARTICLES
            labels[i] = "prepend"
            candidates = [
                (word, 0.9 * 0.6**rank) for rank, word in enumerate(vocabulary[:k_w])
            ]
            masks.append((i, candidates))
        return labels, masks

    # evaluation score

    def blip2_score(self, data: bytes, text: str) -> float:
        image_vec = self.embed_image(data)
        text_vec = self._embed_text(text, CROSS_MODAL_SPACE, CROSS_MODAL_DIM)
        return 2.0 * float(np.dot(image_vec, text_vec))


def build_backend(config) -> LiteBackend:
    """Instantiate the configured backend, or fail startup loudly."""
    if config.backend == "lite":
        return LiteBackend(seed=config.seed)
    raise BackendStartupError(
        f"backend {config.backend!r} needs model weights for "
        f"{config.cross_modal_model!r}, {config.sentence_model!r}, "
        f"{config.lm_model!r} and {config.scorer_model!r}, which are not "
        "bundled; only 'lite' is available in this build"
    )
