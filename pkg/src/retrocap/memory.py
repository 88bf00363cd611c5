"""Textual memory: a dense matrix of unit-norm caption embeddings with
exact top-N cosine retrieval and a persistent binary index format.

Retrieval is an exact brute-force scan. Both sides are unit-norm, so
cosine reduces to a dot product; the scan is chunked with a bounded
candidate pool and may fan out over worker threads, but the merged
result is always identical to a sequential exhaustive sort with the
documented tie-break (ascending entry id).

Index file format, little-endian:
    magic "MEAC" (4 bytes)
    version u32 = 1
    dimension u32
    count u64
    corpus_tag: u16 byte-length + UTF-8 bytes
    count x dimension float32 embedding matrix, row-major
    count x (u32 byte-length + UTF-8 caption bytes)
    CRC32 of all preceding bytes (u32)
"""

from __future__ import annotations

import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vectors import CROSS_MODAL, EmbeddingVector

logger = logging.getLogger(__name__)

MAGIC = b"MEAC"
FORMAT_VERSION = 1

# Rows per scan chunk; 64Ki rows x 512 dims x 4 bytes = 128 MiB.
DEFAULT_CHUNK_ROWS = 65536

# Embedder batch size during index builds.
_BUILD_BATCH = 256


class IndexFormatError(Exception):
    """Base class for index file format violations."""


class BadMagicError(IndexFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(IndexFormatError):
    """File declares a format version this reader does not support."""


class TruncatedFileError(IndexFormatError):
    """File ends before the declared contents are complete."""


class ChecksumMismatchError(IndexFormatError):
    """Stored CRC32 does not match the file contents."""


@dataclass(frozen=True)
class MemoryEntry:
    """One stored caption with its dense id and unit-norm embedding."""

    id: int
    caption: str
    embedding: EmbeddingVector


@dataclass(frozen=True)
class RetrievedSet:
    """Top-N retrieval result: (entry, score) pairs, scores non-increasing,
    ties broken by ascending entry id."""

    items: tuple[tuple[MemoryEntry, float], ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def captions(self) -> list[str]:
        return [entry.caption for entry, _ in self.items]

    @property
    def ids(self) -> list[int]:
        return [entry.id for entry, _ in self.items]

    @property
    def scores(self) -> list[float]:
        return [score for _, score in self.items]


class MemoryIndex:
    """Immutable in-memory store of caption embeddings.

    ``matrix`` is a count x dimension float32 array whose rows are the
    unit-norm embeddings in entry-id order. Safe to share across
    concurrent readers once constructed.
    """

    def __init__(
        self,
        matrix: np.ndarray,
        captions: Sequence[str],
        corpus_tag: str = "",
        rejected_count: int = 0,
    ):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[0] != len(captions):
            raise ValueError(
                f"{matrix.shape[0]} embeddings vs {len(captions)} captions"
            )
        if matrix.shape[0] > 0:
            norms = np.linalg.norm(matrix, axis=1)
            bad = np.abs(norms - 1.0) > 1e-4
            if bad.any():
                raise ValueError(
                    f"{int(bad.sum())} stored embeddings are not unit-norm"
                )
        matrix.setflags(write=False)
        self.matrix = matrix
        self.captions = tuple(captions)
        self.corpus_tag = corpus_tag
        self.rejected_count = rejected_count

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])

    def entry(self, entry_id: int) -> MemoryEntry:
        if not 0 <= entry_id < self.count:
            raise IndexError(f"entry id {entry_id} out of range [0, {self.count})")
        return MemoryEntry(
            id=entry_id,
            caption=self.captions[entry_id],
            embedding=EmbeddingVector(self.matrix[entry_id].copy(), CROSS_MODAL),
        )

    @property
    def entries(self) -> Iterable[MemoryEntry]:
        for i in range(self.count):
            yield self.entry(i)


def build_index(captions: Sequence[str], embedder, corpus_tag: str = "") -> MemoryIndex:
    """Embed ``captions`` and assemble a MemoryIndex.

    Entries keep input order; ids are dense 0..count-1. Embeddings are
    re-normalized before storage. Captions whose embedding has
    (near-)zero norm are rejected, logged with their input position, and
    counted in the result's ``rejected_count``.

    The embedder must expose ``embed_texts(texts) -> sequence`` of
    EmbeddingVector or raw array-likes, all of one dimension.
    """
    captions = list(captions)
    if not captions:
        raise ValueError("caption list is empty")
    for pos, caption in enumerate(captions):
        if not caption or not caption.strip():
            raise ValueError(f"caption at position {pos} is empty")

    rows: list[np.ndarray] = []
    kept_captions: list[str] = []
    rejected = 0
    dimension: int | None = None

    for start in range(0, len(captions), _BUILD_BATCH):
        batch = captions[start : start + _BUILD_BATCH]
        vectors = embedder.embed_texts(batch)
        if len(vectors) != len(batch):
            raise ValueError(
                f"embedder returned {len(vectors)} vectors for {len(batch)} texts"
            )
        for offset, vec in enumerate(vectors):
            arr = vec.values if isinstance(vec, EmbeddingVector) else np.asarray(vec)
            arr = arr.astype(np.float32, copy=False).reshape(-1)
            if dimension is None:
                dimension = arr.shape[0]
            elif arr.shape[0] != dimension:
                raise ValueError(
                    f"embedding dimension changed from {dimension} to "
                    f"{arr.shape[0]} at caption {start + offset}"
                )
            norm = float(np.linalg.norm(arr.astype(np.float64)))
            if norm < 1e-12:
                rejected += 1
                logger.warning(
                    "rejecting caption %d: zero-norm embedding (%r)",
                    start + offset,
                    batch[offset][:60],
                )
                continue
            rows.append((arr / np.float32(norm)).astype(np.float32))
            kept_captions.append(batch[offset])

    if not rows:
        matrix = np.empty((0, dimension or 0), dtype=np.float32)
    else:
        matrix = np.vstack(rows)
    return MemoryIndex(matrix, kept_captions, corpus_tag, rejected_count=rejected)


def _chunk_candidates(scores: np.ndarray, base: int, n: int) -> list[tuple[float, int]]:
    """Top-n (score, id) pairs within one chunk, including every entry tied
    with the n-th score so the global merge can apply the id tie-break."""
    if scores.shape[0] <= n:
        idx = np.arange(scores.shape[0])
    else:
        part = np.argpartition(scores, -n)[-n:]
        kth = scores[part].min()
        idx = np.nonzero(scores >= kth)[0]
    return [(float(scores[i]), base + int(i)) for i in idx]


def retrieve_top_n(
    index: MemoryIndex,
    query: EmbeddingVector,
    n: int,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    workers: int = 1,
) -> RetrievedSet:
    """Exact top-``n`` entries by cosine similarity to ``query``.

    Equivalent to scoring every entry, sorting by (-score, id), and
    taking the first min(n, count). ``workers`` > 1 fans chunks out over
    threads; the result is identical either way. Scores are the float32
    dot products as computed per chunk; BLAS may round the last bit
    differently for different chunk shapes, so only a fixed ``chunk_rows``
    is guaranteed bit-reproducible.
    """
    if index.count == 0:
        raise ValueError("cannot retrieve from an empty index")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if query.space != CROSS_MODAL:
        raise ValueError(f"query must be a cross-modal embedding, got {query.space!r}")
    if query.dimension != index.dimension:
        raise ValueError(
            f"query dimension {query.dimension} != index dimension {index.dimension}"
        )

    q = query.values
    spans = [
        (start, min(start + chunk_rows, index.count))
        for start in range(0, index.count, chunk_rows)
    ]

    def scan(span: tuple[int, int]) -> list[tuple[float, int]]:
        start, stop = span
        scores = index.matrix[start:stop] @ q
        return _chunk_candidates(scores, start, n)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(scan, spans))
    else:
        partials = [scan(span) for span in spans]

    candidates = [pair for chunk in partials for pair in chunk]
    candidates.sort(key=lambda pair: (-pair[0], pair[1]))
    top = candidates[: min(n, index.count)]
    items = tuple((index.entry(entry_id), score) for score, entry_id in top)
    return RetrievedSet(items)


def save_index(index: MemoryIndex, path: str | Path) -> None:
    """Write the index to ``path`` in the binary format above."""
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", index.dimension),
        struct.pack("<Q", index.count),
    ]
    tag_bytes = index.corpus_tag.encode("utf-8")
    if len(tag_bytes) > 0xFFFF:
        raise ValueError("corpus_tag longer than 65535 bytes")
    parts.append(struct.pack("<H", len(tag_bytes)))
    parts.append(tag_bytes)
    parts.append(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
    for caption in index.captions:
        raw = caption.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def load_index(path: str | Path) -> MemoryIndex:
    """Read an index file, verifying structure and checksum.

    Raises BadMagicError, UnsupportedVersionError, TruncatedFileError, or
    ChecksumMismatchError as distinct failure modes.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"file is {len(data)} bytes, shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")

    pos = 4

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > len(data):
            raise TruncatedFileError(
                f"file ends inside {what} (need {size} bytes at offset {pos}, "
                f"file is {len(data)} bytes)"
            )
        chunk = data[pos : pos + size]
        pos += size
        return chunk

    def take_text(size: int, what: str) -> str:
        raw = take(size, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"{what} is not valid UTF-8: {exc}") from exc

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}"
        )
    (dimension,) = struct.unpack("<I", take(4, "dimension"))
    (count,) = struct.unpack("<Q", take(8, "count"))
    (tag_len,) = struct.unpack("<H", take(2, "corpus_tag length"))
    corpus_tag = take_text(tag_len, "corpus_tag")

    matrix_bytes = take(count * dimension * 4, "embedding matrix")
    matrix = np.frombuffer(matrix_bytes, dtype="<f4").reshape(count, dimension)

    captions: list[str] = []
    for i in range(count):
        (cap_len,) = struct.unpack("<I", take(4, f"caption {i} length"))
        captions.append(take_text(cap_len, f"caption {i}"))

    payload_end = pos
    (stored_crc,) = struct.unpack("<I", take(4, "checksum"))
    if pos != len(data):
        raise IndexFormatError(f"{len(data) - pos} trailing bytes after checksum")
    actual_crc = zlib.crc32(data[:payload_end]) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise ChecksumMismatchError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    return MemoryIndex(matrix, captions, corpus_tag)
