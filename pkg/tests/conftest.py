"""Shared fixtures: a deterministic gateway, a small caption corpus, and
helpers for building synthetic indexes."""

from __future__ import annotations

import numpy as np
import pytest

from retrocap.gateway import MockGateway
from retrocap.memory import MemoryIndex, build_index

CORPUS = [
    "a teddy bear sits on a red chair",
    "a small teddy bear on a wooden chair",
    "the teddy bear rests on a chair in the room",
    "a brown teddy bear sitting on a chair",
    "a teddy bear placed on a comfortable chair",
    "a dog runs across the green field",
    "two dogs play with a ball in the park",
    "a cat sleeps on the warm windowsill",
    "a man rides a bicycle down the street",
    "an airplane flies over the snowy mountains",
]


@pytest.fixture(scope="session")
def gateway() -> MockGateway:
    return MockGateway(seed=3)


@pytest.fixture(scope="session")
def small_index(gateway) -> MemoryIndex:
    return build_index(CORPUS, gateway, corpus_tag="fixtures")


def random_unit_matrix(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    matrix = rng.standard_normal((count, dim)).astype(np.float32)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return (matrix / norms).astype(np.float32)


def synthetic_index(rng: np.random.Generator, count: int, dim: int) -> MemoryIndex:
    matrix = random_unit_matrix(rng, count, dim)
    captions = [f"entry {i}" for i in range(count)]
    return MemoryIndex(matrix, captions, corpus_tag="synthetic")
