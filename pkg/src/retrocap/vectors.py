"""Unit-norm embedding vectors tagged with the space they live in.

Two embedding spaces exist in the pipeline and must never be mixed:
``cross_modal`` (image/text encoder pair) and ``sentence`` (sentence
encoder). Cosine between vectors from different spaces is a contract
violation and raises rather than silently returning a number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CROSS_MODAL = "cross_modal"
SENTENCE = "sentence"

# |norm - 1| tolerance for stored vectors
NORM_ATOL = 1e-4


class SpaceMismatchError(TypeError):
    """Raised when two vectors from different embedding spaces are compared."""


class ZeroVectorError(ValueError):
    """Raised when a vector with zero (or near-zero) L2 norm is normalized."""


def l2_normalize(values: np.ndarray) -> np.ndarray:
    """Return ``values`` scaled to unit L2 norm as float32.

    Raises ZeroVectorError when the norm is too small to normalize safely.
    """
    arr = np.asarray(values, dtype=np.float32)
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if norm < 1e-12:
        raise ZeroVectorError("cannot normalize a zero-norm vector")
    return (arr / np.float32(norm)).astype(np.float32)


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-dimension, unit-norm float32 vector in a tagged space."""

    values: np.ndarray
    space: str = CROSS_MODAL

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {arr.shape}")
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        if abs(norm - 1.0) > NORM_ATOL:
            raise ValueError(f"embedding norm {norm:.6f} not within {NORM_ATOL} of 1.0")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_raw(cls, values: np.ndarray, space: str = CROSS_MODAL) -> "EmbeddingVector":
        """Normalize arbitrary values and wrap them. Rejects zero vectors."""
        return cls(l2_normalize(values), space)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def cosine(self, other: "EmbeddingVector") -> float:
        """Cosine similarity with another vector from the same space."""
        if self.space != other.space:
            raise SpaceMismatchError(
                f"cannot compare {self.space!r} vector with {other.space!r} vector"
            )
        if self.dimension != other.dimension:
            raise ValueError(
                f"dimension mismatch: {self.dimension} vs {other.dimension}"
            )
        return float(np.dot(self.values, other.values))
