"""HTTP surface: five JSON endpoints speaking the gateway wire protocol.

Every error, including request-schema violations, comes back as
{"error": {"code", "message"}} with a non-2xx status, because that is
what the engine-side client parses.
"""

from __future__ import annotations

import base64
import binascii
import logging
import threading
from typing import Sequence

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .backends import (
    CROSS_MODAL_SPACE,
    SENTENCE_SPACE,
    LiteBackend,
    build_backend,
    map_action_label,
)
from .config import ServiceConfig

logger = logging.getLogger(__name__)


class EmbedImageRequest(BaseModel):
    image_b64: str


class EmbedTextsRequest(BaseModel):
    texts: list[str]


class ProposeRequest(BaseModel):
    tokens: list[str]
    locked: list[bool]
    k_w: int


class Blip2Request(BaseModel):
    image_b64: str
    text: str


class RequestError(Exception):
    """Maps to a structured protocol error response."""

    def __init__(self, code: str, message: str, status: int = 422):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


def _error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": {"code": code, "message": message}}
    )


def _decode_image(image_b64: str) -> bytes:
    try:
        data = base64.b64decode(image_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise RequestError("bad_image", f"image_b64 is not valid base64: {exc}")
    if not data:
        raise RequestError("bad_image", "decoded image is empty")
    return data


def create_app(config: ServiceConfig, backend: LiteBackend | None = None) -> FastAPI:
    backend = backend or build_backend(config)
    app = FastAPI(title="retrocap-sidecar", docs_url=None, redoc_url=None)
    # real checkpoints are not reentrant; serialize model calls
    model_lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return _error_response(422, "invalid_request", str(exc.errors()[:3]))

    @app.exception_handler(RequestError)
    async def on_request_error(request: Request, exc: RequestError):
        return _error_response(exc.status, exc.code, exc.message)

    @app.exception_handler(Exception)
    async def on_unexpected(request: Request, exc: Exception):
        logger.exception("unhandled error serving %s", request.url.path)
        return _error_response(500, "internal", f"{type(exc).__name__}: {exc}")

    def embed_batch(texts: Sequence[str], embed) -> list[list[float]]:
        if not texts:
            raise RequestError("invalid_request", "texts must be non-empty")
        rows: list[list[float]] = []
        for start in range(0, len(texts), config.max_batch):
            chunk = texts[start : start + config.max_batch]
            try:
                with model_lock:
                    embedded = embed(chunk)
            except ValueError as exc:
                raise RequestError("bad_text", str(exc))
            rows.extend([float(x) for x in row] for row in embedded)
        return rows

    @app.post("/v1/embed_image")
    async def embed_image(request: EmbedImageRequest):
        data = _decode_image(request.image_b64)
        with model_lock:
            vector = backend.embed_image(data)
        return {
            "embedding": [float(x) for x in vector],
            "dim": backend.cross_modal_dim,
            "space": CROSS_MODAL_SPACE,
        }

    @app.post("/v1/embed_text")
    async def embed_text(request: EmbedTextsRequest):
        rows = embed_batch(request.texts, backend.embed_texts)
        return {
            "embeddings": rows,
            "dim": backend.cross_modal_dim,
            "space": CROSS_MODAL_SPACE,
        }

    @app.post("/v1/embed_sentence")
    async def embed_sentence(request: EmbedTextsRequest):
        rows = embed_batch(request.texts, backend.embed_sentences)
        return {
            "embeddings": rows,
            "dim": backend.sentence_dim,
            "space": SENTENCE_SPACE,
        }

    @app.post("/v1/lm_propose")
    async def lm_propose(request: ProposeRequest):
        if not request.tokens:
            raise RequestError("invalid_request", "tokens must be non-empty")
        if len(request.locked) != len(request.tokens):
            raise RequestError(
                "invalid_request",
                f"{len(request.locked)} locked flags for {len(request.tokens)} tokens",
            )
        if request.k_w < 1:
            raise RequestError("invalid_request", f"k_w must be >= 1, got {request.k_w}")
        with model_lock:
            labels, masks = backend.propose(
                request.tokens, request.locked, request.k_w
            )
        return {
            "actions": [map_action_label(label) for label in labels],
            "masks": [
                {
                    "position": position,
                    "candidates": [
                        {"token": token, "p": float(p)} for token, p in candidates
                    ],
                }
                for position, candidates in masks
            ],
        }

    @app.post("/v1/blip2_score")
    async def blip2_score(request: Blip2Request):
        data = _decode_image(request.image_b64)
        if not request.text.strip():
            raise RequestError("bad_text", "text must be non-empty")
        with model_lock:
            score = backend.blip2_score(data, request.text)
        return {"score": score}

    return app
