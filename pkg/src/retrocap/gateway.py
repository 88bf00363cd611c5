"""Model gateway: the four model interfaces the pipeline depends on,
deterministic mock implementations, and an HTTP client for the sidecar.

The interfaces are an image embedder and a text embedder sharing one
cross-modal space, a sentence embedder in its own space, and a
constrained LM that proposes per-token actions plus candidate words for
masks. Mocks are pure functions of (seed, input), so the whole pipeline
is testable and reproducible without any neural backend.
"""

from __future__ import annotations

import base64
import hashlib
import math
import os
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .parsing import normalize_text
from .vectors import CROSS_MODAL, SENTENCE, EmbeddingVector, l2_normalize

SIDECAR_URL_ENV = "MEACAP_SIDECAR_URL"

COPY, REPLACE, INSERT = "copy", "replace", "insert"
ACTIONS = (COPY, REPLACE, INSERT)


class GatewayError(Exception):
    """Base class for model-gateway failures."""


class BackendUnreachableError(GatewayError):
    """The sidecar could not be reached."""


class ProtocolError(GatewayError):
    """The backend returned a malformed or out-of-contract response."""

    def __init__(self, message: str, request_echo: object = None):
        if request_echo is not None:
            message = f"{message} (request: {request_echo!r})"
        super().__init__(message)
        self.request_echo = request_echo


class BackendRequestError(GatewayError):
    """The backend answered with a structured error."""

    def __init__(self, code: str, message: str, status: int):
        super().__init__(f"[{code}] {message} (HTTP {status})")
        self.code = code
        self.status = status


@dataclass(frozen=True)
class ImageInput:
    """Raw image file content plus an optional format hint."""

    data: bytes
    format_hint: str | None = None

    def __post_init__(self) -> None:
        if not self.data:
            raise ValueError("image input must contain at least one byte")

    @classmethod
    def from_file(cls, path) -> "ImageInput":
        from pathlib import Path

        p = Path(path)
        return cls(p.read_bytes(), format_hint=p.suffix.lstrip(".") or None)


@dataclass(frozen=True)
class LMProposal:
    """Action sequence for a token list plus candidate words per mask.

    ``mask_candidates`` maps a token position to its (token, probability)
    list: for a replace action the mask sits at that position, for an
    insert action it sits immediately before it. Candidate lists are
    sorted by descending probability; probabilities are finite and
    non-negative.
    """

    actions: tuple[str, ...]
    mask_candidates: tuple[tuple[int, tuple[tuple[str, float], ...]], ...]

    def __post_init__(self) -> None:
        for action in self.actions:
            if action not in ACTIONS:
                raise ProtocolError(f"unknown action {action!r}")
        expected = {i for i, a in enumerate(self.actions) if a in (REPLACE, INSERT)}
        got = {pos for pos, _ in self.mask_candidates}
        if expected != got:
            raise ProtocolError(
                f"mask positions {sorted(got)} do not match replace/insert "
                f"positions {sorted(expected)}"
            )
        for pos, candidates in self.mask_candidates:
            prev = math.inf
            for token, prob in candidates:
                if not math.isfinite(prob) or prob < 0:
                    raise ProtocolError(
                        f"candidate {token!r} at position {pos} has invalid "
                        f"probability {prob!r}"
                    )
                if prob > prev:
                    raise ProtocolError(
                        f"candidates at position {pos} are not sorted by "
                        "descending probability"
                    )
                prev = prob

    def candidates_for(self, position: int) -> tuple[tuple[str, float], ...]:
        for pos, candidates in self.mask_candidates:
            if pos == position:
                return candidates
        raise KeyError(position)


@runtime_checkable
class ImageEmbedder(Protocol):
    def embed_image(self, image: ImageInput) -> EmbeddingVector: ...


@runtime_checkable
class CrossModalTextEmbedder(Protocol):
    def embed_text(self, text: str) -> EmbeddingVector: ...

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


@runtime_checkable
class SentenceEmbedder(Protocol):
    def embed_sentence(self, text: str) -> EmbeddingVector: ...

    def embed_sentences(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


@runtime_checkable
class ConstrainedLM(Protocol):
    def propose(
        self, tokens: Sequence[str], locked: Sequence[bool], k_w: int
    ) -> LMProposal: ...


def _hash_seed(*parts: str) -> int:
    digest = hashlib.blake2b("|".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


class _HashEmbedder:
    """Deterministic unit vectors keyed by normalized text.

    Each token gets a seeded pseudo-random unit vector; a text embeds as
    the normalized mean of its token vectors, so texts sharing tokens
    have correlated embeddings and clustering tests see real structure.
    """

    def __init__(self, seed: int, dim: int, space: str, salt: str):
        self.seed = seed
        self.dim = dim
        self.space = space
        self._salt = salt
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is None:
            rng = np.random.default_rng(_hash_seed(str(self.seed), self._salt, token))
            cached = l2_normalize(rng.standard_normal(self.dim))
            self._token_cache[token] = cached
        return cached

    def embed(self, text: str) -> EmbeddingVector:
        tokens = normalize_text(text).split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        mean = np.mean([self._token_vector(t) for t in tokens], axis=0)
        return EmbeddingVector(l2_normalize(mean), self.space)


# Function-word inventory for the heuristic mock LM.
_ARTICLES = ("a", "the", "an")
_CONNECTORS = ("on", "with", "and", "in", "near", "under", "over", "by", "at", "beside")
_STOPLIKE = frozenset(_ARTICLES) | frozenset(_CONNECTORS) | frozenset(
    """of to from that this is are was were sits sitting stands standing has
    have it its their above image depicts while""".split()
)


class MockGateway:
    """Deterministic stand-in for all four model interfaces.

    Image bytes that decode as UTF-8 text embed exactly like that text,
    so fixtures can control image-text similarity by writing "images"
    whose bytes are a scene description; any other bytes map to a seeded
    hash vector. The LM is a convergent heuristic: it inserts an article
    in front of each bare content token and a connector word between
    adjacent content tokens, then reports all-copy.
    """

    def __init__(self, seed: int = 0, cross_modal_dim: int = 512, sentence_dim: int = 384):
        self.seed = seed
        self._cross = _HashEmbedder(seed, cross_modal_dim, CROSS_MODAL, "cross")
        self._sentence = _HashEmbedder(seed, sentence_dim, SENTENCE, "sentence")

    # cross-modal space

    def embed_image(self, image: ImageInput) -> EmbeddingVector:
        if not image.data:
            raise ValueError("image input must contain at least one byte")
        try:
            text = image.data.decode("utf-8")
        except UnicodeDecodeError:
            text = ""
        if text and normalize_text(text):
            return self._cross.embed(text)
        rng = np.random.default_rng(
            _hash_seed(str(self.seed), "image", image.data.hex())
        )
        return EmbeddingVector(l2_normalize(rng.standard_normal(self._cross.dim)), CROSS_MODAL)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._cross.embed(text)

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self._cross.embed(t) for t in texts]

    # sentence space

    def embed_sentence(self, text: str) -> EmbeddingVector:
        return self._sentence.embed(text)

    def embed_sentences(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self._sentence.embed(t) for t in texts]

    # constrained LM

    def propose(
        self, tokens: Sequence[str], locked: Sequence[bool], k_w: int
    ) -> LMProposal:
        if not tokens:
            raise ValueError("token list must be non-empty")
        if k_w < 1:
            raise ValueError(f"k_w must be >= 1, got {k_w}")
        actions = [COPY] * len(tokens)
        masks: list[tuple[int, tuple[tuple[str, float], ...]]] = []
        lowered = [t.lower() for t in tokens]
        for i, token in enumerate(lowered):
            if token in _STOPLIKE:
                continue
            prev = lowered[i - 1] if i > 0 else None
            if prev in _ARTICLES:
                continue
            if prev is None or prev in _STOPLIKE:
                vocabulary = _ARTICLES + _CONNECTORS
            else:
                vocabulary = _CONNECTORS + _ARTICLES
            actions[i] = INSERT
            candidates = tuple(
                (word, 0.9 * (0.6**rank))
                for rank, word in enumerate(vocabulary[:k_w])
            )
            masks.append((i, candidates))
        return LMProposal(tuple(actions), tuple(masks))

    # evaluation score

    def blip2_score(self, image: ImageInput, text: str) -> float:
        """Weighted image-text similarity: 2 * cos of the mock embeddings."""
        return 2.0 * self.embed_image(image).cosine(self.embed_text(text))


class ScriptedLM:
    """Replays a fixed list of proposals; used to drive the refine engine
    through exact scenarios. After the script ends it returns all-copy."""

    def __init__(self, script: Sequence):
        self._script = list(script)
        self.calls = 0

    def propose(
        self, tokens: Sequence[str], locked: Sequence[bool], k_w: int
    ) -> LMProposal:
        step = self.calls
        self.calls += 1
        if step < len(self._script):
            entry = self._script[step]
            proposal = entry(tokens, locked, k_w) if callable(entry) else entry
            if len(proposal.actions) != len(tokens):
                raise ProtocolError(
                    f"scripted step {step} has {len(proposal.actions)} actions "
                    f"for {len(tokens)} tokens"
                )
            return proposal
        return LMProposal(tuple(COPY for _ in tokens), ())


def _as_float_list(vector: EmbeddingVector) -> list[float]:
    return [float(x) for x in vector.values]


class SidecarClient:
    """HTTP client for the model sidecar, speaking the JSON wire protocol.

    The base address comes from the constructor or the MEACAP_SIDECAR_URL
    environment variable. Implements the same four interfaces as
    MockGateway, so the pipeline treats both backends identically.
    """

    def __init__(
        self,
        base_url: str | None = None,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        base_url = base_url or os.environ.get(SIDECAR_URL_ENV)
        if not base_url:
            raise ValueError(
                f"no sidecar URL: pass base_url or set {SIDECAR_URL_ENV}"
            )
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "SidecarClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _post(self, endpoint: str, payload: dict) -> dict:
        try:
            response = self._client.post(endpoint, json=payload)
        except httpx.TransportError as exc:
            raise BackendUnreachableError(
                f"sidecar unreachable at {self._client.base_url}{endpoint}: {exc}"
            ) from exc
        if response.status_code >= 300:
            try:
                error = response.json()["error"]
                raise BackendRequestError(
                    str(error.get("code", "unknown")),
                    str(error.get("message", "")),
                    response.status_code,
                )
            except (KeyError, ValueError) as exc:
                raise ProtocolError(
                    f"HTTP {response.status_code} without structured error body",
                    request_echo={"endpoint": endpoint},
                ) from exc
        try:
            return response.json()
        except ValueError as exc:
            raise ProtocolError(
                "response body is not JSON", request_echo={"endpoint": endpoint}
            ) from exc

    def _parse_vector(self, body: dict, expected_space: str, endpoint: str) -> EmbeddingVector:
        try:
            values = np.asarray(body["embedding"], dtype=np.float32)
            space = body["space"]
        except KeyError as exc:
            raise ProtocolError(f"missing field {exc} in {endpoint} response") from exc
        if space != expected_space:
            raise ProtocolError(
                f"{endpoint} returned space {space!r}, expected {expected_space!r}"
            )
        return EmbeddingVector(l2_normalize(values), expected_space)

    def embed_image(self, image: ImageInput) -> EmbeddingVector:
        payload = {"image_b64": base64.b64encode(image.data).decode("ascii")}
        body = self._post("/v1/embed_image", payload)
        return self._parse_vector(body, CROSS_MODAL, "/v1/embed_image")

    def _embed_batch(
        self, endpoint: str, texts: Sequence[str], space: str
    ) -> list[EmbeddingVector]:
        texts = list(texts)
        body = self._post(endpoint, {"texts": texts})
        try:
            rows = body["embeddings"]
            got_space = body["space"]
        except KeyError as exc:
            raise ProtocolError(f"missing field {exc} in {endpoint} response") from exc
        if got_space != space:
            raise ProtocolError(
                f"{endpoint} returned space {got_space!r}, expected {space!r}"
            )
        if len(rows) != len(texts):
            raise ProtocolError(
                f"{endpoint} returned {len(rows)} embeddings for {len(texts)} texts"
            )
        return [
            EmbeddingVector(l2_normalize(np.asarray(row, dtype=np.float32)), space)
            for row in rows
        ]

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._embed_batch("/v1/embed_text", [text], CROSS_MODAL)[0]

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return self._embed_batch("/v1/embed_text", texts, CROSS_MODAL)

    def embed_sentence(self, text: str) -> EmbeddingVector:
        return self._embed_batch("/v1/embed_sentence", [text], SENTENCE)[0]

    def embed_sentences(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return self._embed_batch("/v1/embed_sentence", texts, SENTENCE)

    def propose(
        self, tokens: Sequence[str], locked: Sequence[bool], k_w: int
    ) -> LMProposal:
        payload = {"tokens": list(tokens), "locked": list(locked), "k_w": k_w}
        body = self._post("/v1/lm_propose", payload)
        try:
            actions = tuple(body["actions"])
            masks = tuple(
                (
                    int(mask["position"]),
                    tuple((c["token"], float(c["p"])) for c in mask["candidates"]),
                )
                for mask in body["masks"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(
                f"malformed lm_propose response: {exc}", request_echo=payload
            ) from exc
        return LMProposal(actions, masks)

    def blip2_score(self, image: ImageInput, text: str) -> float:
        payload = {
            "image_b64": base64.b64encode(image.data).decode("ascii"),
            "text": text,
        }
        body = self._post("/v1/blip2_score", payload)
        try:
            return float(body["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError("malformed blip2_score response") from exc
