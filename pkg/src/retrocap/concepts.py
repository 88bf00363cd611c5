"""Concept clustering, frequency filtering, key-concept selection, ordering.

Candidate concepts parsed from retrieved captions are merged into
clusters by sentence-embedding similarity, scored by how often their
members occur across the retrieved captions, and reduced to one key
concept per surviving cluster by image similarity. Triplet relations
between concepts then fix the keyword order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

from .parsing import ConceptNode, TextGraph, normalize_text, strip_plural
from .vectors import EmbeddingVector

logger = logging.getLogger(__name__)

MAX_KEY_CONCEPTS = 8


@dataclass(frozen=True)
class ClusterConfig:
    """Similarity threshold for merging and the cluster-frequency cutoff."""

    tau: float = 0.6
    cf_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class ConceptCluster:
    """A connected component of similar concept nodes.

    ``member_indices`` point into the node list the cluster was built
    from. ``cf`` is filled in by annotate_cf; it can exceed 1.0 because
    every member occurrence in every caption counts.
    """

    members: tuple[ConceptNode, ...]
    member_indices: tuple[int, ...]
    cf: float | None = None
    key_concept: str | None = None

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("cluster must have at least one member")
        if len(self.members) != len(self.member_indices):
            raise ValueError("members and member_indices must be parallel")


@dataclass(frozen=True)
class KeyConceptSet:
    """Ordered key concepts plus the relations that justify the order.

    ``image_similarities`` is parallel to ``concepts``. ``member_map``
    records which original node texts each key concept stands for, so
    triplet endpoints can be resolved to key concepts later.
    """

    concepts: tuple[str, ...]
    image_similarities: tuple[float, ...]
    ordering_relations: tuple[tuple[str, str], ...] = ()
    member_map: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if len(self.concepts) != len(set(self.concepts)):
            raise ValueError(f"duplicate key concepts: {self.concepts}")
        if len(self.concepts) != len(self.image_similarities):
            raise ValueError("concepts and image_similarities must be parallel")


class _UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # attach the larger root under the smaller so component ids
            # stay tied to the earliest member
            if ri < rj:
                self.parent[rj] = ri
            else:
                self.parent[ri] = rj


def cluster_concepts(
    nodes: Sequence[ConceptNode], embedder, config: ClusterConfig
) -> list[ConceptCluster]:
    """Group nodes into connected components under cosine similarity.

    An edge exists between two nodes iff the cosine of their sentence
    embeddings is strictly greater than tau; identical normalized texts
    are always merged regardless of float rounding. Clusters are ordered
    by their smallest member index, members by ascending index.
    """
    nodes = list(nodes)
    if not nodes:
        raise ValueError("node list is empty")
    vectors = embedder.embed_sentences([node.text for node in nodes])
    uf = _UnionFind(len(nodes))
    texts = [normalize_text(node.text) for node in nodes]
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if texts[i] == texts[j] or vectors[i].cosine(vectors[j]) > config.tau:
                uf.union(i, j)

    components: dict[int, list[int]] = {}
    for i in range(len(nodes)):
        components.setdefault(uf.find(i), []).append(i)
    clusters = []
    for root in sorted(components, key=lambda r: min(components[r])):
        indices = tuple(sorted(components[root]))
        clusters.append(
            ConceptCluster(tuple(nodes[i] for i in indices), indices)
        )
    return clusters


def _tokens_match(window: Sequence[str], needle: Sequence[str]) -> bool:
    if any(a != b for a, b in zip(window[:-1], needle[:-1])):
        return False
    return window[-1] == needle[-1] or strip_plural(window[-1]) == strip_plural(
        needle[-1]
    )


def _occurs_in(needle_tokens: list[str], caption_tokens: list[str]) -> bool:
    n = len(needle_tokens)
    if n == 0 or n > len(caption_tokens):
        return False
    return any(
        _tokens_match(caption_tokens[start : start + n], needle_tokens)
        for start in range(len(caption_tokens) - n + 1)
    )


def compute_cf(cluster: ConceptCluster, retrieved) -> float:
    """Concept-cluster frequency: member occurrences across the retrieved
    captions divided by the caption count.

    Occurrence is a contiguous token-subsequence match after lowercase
    normalization, tolerant of a bare plural suffix on the final token;
    every member is counted in every caption, so the result can exceed
    1.0 for multi-member clusters.
    """
    captions = retrieved.captions
    if not captions:
        raise ValueError("retrieved set is empty")
    caption_tokens = [normalize_text(c).split() for c in captions]
    hits = 0
    for member in cluster.members:
        needle = normalize_text(member.text).split()
        hits += sum(1 for tokens in caption_tokens if _occurs_in(needle, tokens))
    return hits / len(captions)


def annotate_cf(clusters: Sequence[ConceptCluster], retrieved) -> list[ConceptCluster]:
    """Return clusters with their cf field populated."""
    return [replace(c, cf=compute_cf(c, retrieved)) for c in clusters]


def filter_clusters(
    clusters: Sequence[ConceptCluster], config: ClusterConfig
) -> list[ConceptCluster]:
    """Keep clusters whose cf is strictly above the threshold, in order."""
    for cluster in clusters:
        if cluster.cf is None:
            raise ValueError("cluster frequency not computed; run annotate_cf first")
    return [c for c in clusters if c.cf > config.cf_threshold]


def select_key_concepts(
    clusters: Sequence[ConceptCluster],
    image_embedding: EmbeddingVector,
    text_embedder,
) -> KeyConceptSet:
    """Pick per cluster the member most similar to the image.

    Similarity is the cosine between the image embedding and the
    cross-modal text embedding of the bare member text. Ties go to the
    lower member index. Duplicate texts across clusters keep their first
    occurrence, and at most MAX_KEY_CONCEPTS concepts survive, preferring
    higher image similarity.
    """
    clusters = list(clusters)
    if not clusters:
        raise ValueError("cluster list is empty")

    all_texts = [m.text for c in clusters for m in c.members]
    vectors = text_embedder.embed_texts(all_texts)
    sims = [image_embedding.cosine(v) for v in vectors]

    chosen: list[tuple[str, float]] = []
    member_map: list[tuple[str, str]] = []
    seen: dict[str, int] = {}
    offset = 0
    for cluster in clusters:
        size = len(cluster.members)
        cluster_sims = sims[offset : offset + size]
        offset += size
        best = max(range(size), key=lambda i: (cluster_sims[i], -i))
        key = normalize_text(cluster.members[best].text)
        if key in seen:
            logger.debug("key concept %r duplicated across clusters; keeping first", key)
        else:
            seen[key] = len(chosen)
            chosen.append((key, cluster_sims[best]))
        for member in cluster.members:
            member_map.append((normalize_text(member.text), key))

    if len(chosen) > MAX_KEY_CONCEPTS:
        ranked = sorted(
            range(len(chosen)), key=lambda i: (-chosen[i][1], i)
        )[:MAX_KEY_CONCEPTS]
        keep = set(ranked)
        dropped = {chosen[i][0] for i in range(len(chosen)) if i not in keep}
        logger.info("capping key concepts at %d, dropping %s", MAX_KEY_CONCEPTS, sorted(dropped))
        chosen = [chosen[i] for i in sorted(keep)]
        member_map = [(text, key) for text, key in member_map if key not in dropped]

    return KeyConceptSet(
        concepts=tuple(text for text, _ in chosen),
        image_similarities=tuple(sim for _, sim in chosen),
        member_map=tuple(member_map),
    )


def _topological_order(
    concepts: Sequence[str], sims: Sequence[float], pairs: Sequence[tuple[str, str]]
) -> list[int] | None:
    """Kahn's algorithm over precedence pairs; None when a cycle exists.

    Among ready nodes the highest image similarity goes first, ties by
    ascending original index, so unrelated concepts come out in
    descending-similarity order.
    """
    index = {c: i for i, c in enumerate(concepts)}
    out_edges: dict[int, set[int]] = {i: set() for i in range(len(concepts))}
    in_degree = [0] * len(concepts)
    for before, after in pairs:
        b, a = index[before], index[after]
        if a not in out_edges[b]:
            out_edges[b].add(a)
            in_degree[a] += 1
    order: list[int] = []
    ready = [i for i in range(len(concepts)) if in_degree[i] == 0]
    while ready:
        ready.sort(key=lambda i: (-sims[i], i))
        node = ready.pop(0)
        order.append(node)
        for succ in sorted(out_edges[node]):
            in_degree[succ] -= 1
            if in_degree[succ] == 0:
                ready.append(succ)
    if len(order) != len(concepts):
        return None
    return order


def order_concepts(key_set: KeyConceptSet, graphs: Sequence[TextGraph]) -> KeyConceptSet:
    """Order key concepts by triplet precedence: subjects before objects.

    Each triplet whose endpoints both resolve (through cluster
    membership) to key concepts contributes a precedence pair. The pairs
    drive a deterministic topological sort; if they form a cycle, the
    relations are discarded and concepts fall back to descending image
    similarity.
    """
    mapping = dict(key_set.member_map)
    pairs: list[tuple[str, str]] = []
    for graph in graphs:
        for triplet in graph.triplets:
            if triplet.object is None:
                continue
            before = mapping.get(normalize_text(triplet.subject))
            after = mapping.get(normalize_text(triplet.object))
            if before and after and before != after:
                pair = (before, after)
                if pair not in pairs:
                    pairs.append(pair)

    order = _topological_order(key_set.concepts, key_set.image_similarities, pairs)
    if order is None:
        logger.info("cyclic concept precedence %s; ordering by image similarity", pairs)
        order = sorted(
            range(len(key_set.concepts)),
            key=lambda i: (-key_set.image_similarities[i], i),
        )
    return KeyConceptSet(
        concepts=tuple(key_set.concepts[i] for i in order),
        image_similarities=tuple(key_set.image_similarities[i] for i in order),
        ordering_relations=tuple(pairs),
        member_map=key_set.member_map,
    )
