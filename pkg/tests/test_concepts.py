"""Concept clustering, frequency filtering, selection, and ordering,
checked against naive oracles."""

from __future__ import annotations

import numpy as np
import pytest

from retrocap.concepts import (
    ClusterConfig,
    ConceptCluster,
    KeyConceptSet,
    annotate_cf,
    cluster_concepts,
    compute_cf,
    filter_clusters,
    order_concepts,
    select_key_concepts,
)
from retrocap.gateway import MockGateway
from retrocap.memory import MemoryEntry, RetrievedSet
from retrocap.parsing import ConceptNode, parse_caption
from retrocap.vectors import CROSS_MODAL, SENTENCE, EmbeddingVector


def make_nodes(texts):
    return [ConceptNode(t, 0, "subject") for t in texts]


def make_retrieved(captions):
    items = []
    for i, caption in enumerate(captions):
        vec = EmbeddingVector.from_raw(np.eye(8)[i % 8], CROSS_MODAL)
        items.append((MemoryEntry(i, caption, vec), 1.0 - i * 0.01))
    return RetrievedSet(tuple(items))


class FixedSentenceEmbedder:
    """Returns preset sentence-space vectors keyed by text."""

    def __init__(self, table):
        self.table = {
            text: EmbeddingVector.from_raw(np.asarray(v, dtype=np.float32), SENTENCE)
            for text, v in table.items()
        }

    def embed_sentences(self, texts):
        return [self.table[t] for t in texts]

    def embed_sentence(self, text):
        return self.table[text]


class FixedTextEmbedder:
    """Returns preset cross-modal vectors keyed by text."""

    def __init__(self, table):
        self.table = {
            text: EmbeddingVector.from_raw(np.asarray(v, dtype=np.float32), CROSS_MODAL)
            for text, v in table.items()
        }

    def embed_texts(self, texts):
        return [self.table[t] for t in texts]

    def embed_text(self, text):
        return self.table[text]


def oracle_components(vectors, texts, tau):
    """O(N^3) reachability closure over the similarity graph."""
    n = len(vectors)
    adjacent = [
        [
            i == j or texts[i] == texts[j] or vectors[i].cosine(vectors[j]) > tau
            for j in range(n)
        ]
        for i in range(n)
    ]
    # Floyd-Warshall style transitive closure
    for k in range(n):
        for i in range(n):
            if adjacent[i][k]:
                for j in range(n):
                    if adjacent[k][j]:
                        adjacent[i][j] = True
    seen = set()
    components = []
    for i in range(n):
        if i in seen:
            continue
        component = tuple(j for j in range(n) if adjacent[i][j])
        seen.update(component)
        components.append(component)
    return components


class TestClustering:
    def test_identical_texts_always_co_cluster(self, gateway):
        nodes = make_nodes(["dog", "dog"])
        clusters = cluster_concepts(nodes, gateway, ClusterConfig(tau=0.99))
        assert len(clusters) == 1
        assert clusters[0].member_indices == (0, 1)

    def test_orthogonal_embeddings_stay_singletons(self):
        embedder = FixedSentenceEmbedder(
            {"a": [1, 0, 0], "b": [0, 1, 0], "c": [0, 0, 1]}
        )
        clusters = cluster_concepts(
            make_nodes(["a", "b", "c"]), embedder, ClusterConfig(tau=0.6)
        )
        assert [c.member_indices for c in clusters] == [(0,), (1,), (2,)]

    def test_transitive_merge(self):
        """a~b and b~c merge all three even though a and c are far apart."""
        embedder = FixedSentenceEmbedder(
            {"a": [1, 0], "b": [0.8, 0.6], "c": [0.28, 0.96]}
        )
        clusters = cluster_concepts(
            make_nodes(["a", "b", "c"]), embedder, ClusterConfig(tau=0.7)
        )
        assert len(clusters) == 1

    def test_empty_nodes_rejected(self, gateway):
        with pytest.raises(ValueError):
            cluster_concepts([], gateway, ClusterConfig())

    @pytest.mark.parametrize("tau", [0.3, 0.55, 0.6, 0.9])
    def test_matches_reachability_oracle(self, gateway, tau):
        """Random node sets: clusters equal the transitive closure."""
        rng = np.random.default_rng(int(tau * 100))
        vocab = [
            "dog", "puppy", "hound", "cat", "kitten", "chair", "seat",
            "bench", "car", "truck", "bear", "teddy", "ball", "park",
        ]
        for trial in range(25):
            count = int(rng.integers(2, 20))
            texts = [
                " ".join(rng.choice(vocab, size=rng.integers(1, 3)))
                for _ in range(count)
            ]
            nodes = make_nodes(texts)
            vectors = gateway.embed_sentences(texts)
            expected = oracle_components(vectors, texts, tau)
            got = cluster_concepts(nodes, gateway, ClusterConfig(tau=tau))
            assert [c.member_indices for c in got] == expected, f"trial {trial}"

    def test_tau_monotonicity(self, gateway):
        """Raising tau never decreases the cluster count."""
        rng = np.random.default_rng(77)
        vocab = ["dog", "cat", "chair", "bear", "car", "tree", "ball"]
        texts = [
            " ".join(rng.choice(vocab, size=rng.integers(1, 3))) for _ in range(15)
        ]
        nodes = make_nodes(texts)
        counts = [
            len(cluster_concepts(nodes, gateway, ClusterConfig(tau=t)))
            for t in (0.2, 0.4, 0.6, 0.8, 0.95)
        ]
        assert counts == sorted(counts)


class TestClusterFrequency:
    def test_single_member_fraction(self):
        captions = ["a dog runs", "a dog sleeps", "the dog eats", "a cat", "a bird"]
        cluster = ConceptCluster((ConceptNode("dog", 0, "subject"),), (0,))
        assert compute_cf(cluster, make_retrieved(captions)) == pytest.approx(0.6)

    def test_two_members_can_exceed_one(self):
        captions = ["a dog and a cat"] * 5
        cluster = ConceptCluster(
            (ConceptNode("dog", 0, "subject"), ConceptNode("cat", 0, "subject")),
            (0, 1),
        )
        assert compute_cf(cluster, make_retrieved(captions)) == pytest.approx(2.0)

    def test_plural_tolerance_on_final_token(self):
        captions = ["two dogs play", "a dog barks"]
        cluster = ConceptCluster((ConceptNode("dog", 0, "subject"),), (0,))
        assert compute_cf(cluster, make_retrieved(captions)) == pytest.approx(1.0)

    def test_multi_token_members_match_contiguously(self):
        captions = ["a teddy bear on a chair", "a bear with a teddy"]
        cluster = ConceptCluster((ConceptNode("teddy bear", 0, "subject"),), (0,))
        # only the first caption contains "teddy bear" as a contiguous run
        assert compute_cf(cluster, make_retrieved(captions)) == pytest.approx(0.5)

    def test_no_substring_false_positives(self):
        captions = ["a catalog on the desk"]
        cluster = ConceptCluster((ConceptNode("cat", 0, "subject"),), (0,))
        assert compute_cf(cluster, make_retrieved(captions)) == 0.0

    def test_matches_counting_oracle(self, gateway):
        """Randomized fixtures: cf equals a naive double-loop recount."""
        rng = np.random.default_rng(42)
        vocab = ["dog", "cat", "bear", "chair", "ball", "park", "car", "tree"]
        for trial in range(100):
            captions = [
                " ".join(rng.choice(vocab, size=rng.integers(2, 6)))
                for _ in range(5)
            ]
            member_count = int(rng.integers(1, 4))
            members = tuple(
                ConceptNode(str(rng.choice(vocab)), 0, "subject")
                for _ in range(member_count)
            )
            cluster = ConceptCluster(members, tuple(range(member_count)))
            expected = 0
            for member in members:
                for caption in captions:
                    if member.text in caption.split():
                        expected += 1
            got = compute_cf(cluster, make_retrieved(captions))
            assert got == pytest.approx(expected / 5), f"trial {trial}"


class TestFilter:
    def config(self):
        return ClusterConfig(tau=0.6)

    def cluster_with_cf(self, cf):
        return ConceptCluster((ConceptNode("x", 0, "subject"),), (0,), cf=cf)

    def test_strict_threshold(self):
        clusters = [self.cluster_with_cf(cf) for cf in (0.6, 0.4, 0.5)]
        kept = filter_clusters(clusters, self.config())
        assert [c.cf for c in kept] == [0.6]

    def test_all_zero_yields_empty(self):
        clusters = [self.cluster_with_cf(0.0) for _ in range(4)]
        assert filter_clusters(clusters, self.config()) == []

    def test_matches_comprehension_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cfs = [float(rng.uniform(0, 2)) for _ in range(rng.integers(1, 10))]
            clusters = [self.cluster_with_cf(cf) for cf in cfs]
            kept = filter_clusters(clusters, self.config())
            assert [c.cf for c in kept] == [cf for cf in cfs if cf > 0.5]

    def test_missing_cf_rejected(self):
        bare = ConceptCluster((ConceptNode("x", 0, "subject"),), (0,))
        with pytest.raises(ValueError):
            filter_clusters([bare], self.config())


class TestSelection:
    def test_argmax_of_two(self):
        image = EmbeddingVector.from_raw([1, 0, 0], CROSS_MODAL)
        embedder = FixedTextEmbedder(
            {"bear": [0.7, 0.714, 0], "teddy bear": [0.9, 0.436, 0]}
        )
        cluster = ConceptCluster(
            (ConceptNode("bear", 0, "subject"), ConceptNode("teddy bear", 0, "subject")),
            (0, 1),
            cf=1.0,
        )
        key_set = select_key_concepts([cluster], image, embedder)
        assert key_set.concepts == ("teddy bear",)

    def test_singleton_cluster_keeps_its_member(self):
        image = EmbeddingVector.from_raw([1, 0], CROSS_MODAL)
        embedder = FixedTextEmbedder({"dog": [0, 1]})
        cluster = ConceptCluster((ConceptNode("dog", 0, "subject"),), (0,), cf=1.0)
        assert select_key_concepts([cluster], image, embedder).concepts == ("dog",)

    def test_tie_breaks_by_member_index(self):
        image = EmbeddingVector.from_raw([1, 0], CROSS_MODAL)
        embedder = FixedTextEmbedder({"b": [0, 1], "a": [0, 1]})
        cluster = ConceptCluster(
            (ConceptNode("b", 0, "subject"), ConceptNode("a", 0, "subject")),
            (0, 1),
            cf=1.0,
        )
        assert select_key_concepts([cluster], image, embedder).concepts == ("b",)

    def test_duplicates_across_clusters_keep_first(self):
        image = EmbeddingVector.from_raw([1, 0], CROSS_MODAL)
        embedder = FixedTextEmbedder({"dog": [1, 0]})
        c1 = ConceptCluster((ConceptNode("dog", 0, "subject"),), (0,), cf=1.0)
        c2 = ConceptCluster((ConceptNode("dog", 1, "subject"),), (1,), cf=1.0)
        key_set = select_key_concepts([c1, c2], image, embedder)
        assert key_set.concepts == ("dog",)

    def test_cap_keeps_highest_similarity(self, gateway):
        image = gateway.embed_text("dog park ball")
        texts = [f"thing{i}" for i in range(12)]
        clusters = [
            ConceptCluster((ConceptNode(t, 0, "subject"),), (i,), cf=1.0)
            for i, t in enumerate(texts)
        ]
        key_set = select_key_concepts(clusters, image, gateway)
        assert len(key_set.concepts) == 8
        sims = dict(zip(key_set.concepts, key_set.image_similarities))
        all_sims = {
            t: image.cosine(gateway.embed_text(t)) for t in texts
        }
        kept_cutoff = min(sims.values())
        dropped = [t for t in texts if t not in sims]
        assert all(all_sims[t] <= kept_cutoff for t in dropped)

    def test_matches_per_cluster_argmax_oracle(self, gateway):
        """Random clusters: selection equals a full-scan argmax."""
        rng = np.random.default_rng(13)
        vocab = ["dog", "cat", "bear", "chair", "ball", "park", "car", "sofa"]
        image = gateway.embed_text("a dog with a ball in a park")
        for trial in range(30):
            clusters = []
            position = 0
            used = set()
            for _ in range(int(rng.integers(1, 7))):
                size = int(rng.integers(1, 4))
                texts = []
                while len(texts) < size:
                    t = " ".join(rng.choice(vocab, size=rng.integers(1, 3)))
                    if t not in used:
                        used.add(t)
                        texts.append(t)
                members = tuple(ConceptNode(t, 0, "subject") for t in texts)
                clusters.append(
                    ConceptCluster(members, tuple(range(position, position + size)), cf=1.0)
                )
                position += size
            key_set = select_key_concepts(clusters, image, gateway)
            expected = []
            for cluster in clusters:
                sims = [
                    image.cosine(gateway.embed_text(m.text)) for m in cluster.members
                ]
                best = max(range(len(sims)), key=lambda i: (sims[i], -i))
                text = cluster.members[best].text
                if text not in expected:
                    expected.append(text)
            assert list(key_set.concepts) == expected[: len(key_set.concepts)], f"trial {trial}"


class TestOrdering:
    def key_set(self, concepts, sims, member_map=None):
        return KeyConceptSet(
            concepts=tuple(concepts),
            image_similarities=tuple(sims),
            member_map=tuple(member_map or [(c, c) for c in concepts]),
        )

    def test_subject_precedes_object(self):
        graphs = [parse_caption("a bear sits on a chair")]
        key_set = self.key_set(["chair", "bear"], [0.9, 0.8])
        ordered = order_concepts(key_set, graphs)
        assert ordered.concepts == ("bear", "chair")
        assert ("bear", "chair") in ordered.ordering_relations

    def test_unrelated_concepts_fall_back_to_similarity(self):
        ordered = order_concepts(self.key_set(["a", "b"], [0.6, 0.8]), [])
        assert ordered.concepts == ("b", "a")

    def test_cycle_falls_back_to_similarity(self):
        graphs = [
            parse_caption("a bear watches a chair"),
            parse_caption("a chair holds a bear"),
        ]
        key_set = self.key_set(["bear", "chair"], [0.5, 0.9])
        ordered = order_concepts(key_set, graphs)
        assert ordered.concepts == ("chair", "bear")
        assert len(ordered.ordering_relations) == 2

    def test_membership_resolves_through_cluster(self):
        """A triplet endpoint that is a cluster member, not the key
        concept itself, still contributes precedence."""
        graphs = [parse_caption("a puppy chases a ball")]
        key_set = self.key_set(
            ["dog", "ball"],
            [0.4, 0.9],
            member_map=[("puppy", "dog"), ("dog", "dog"), ("ball", "ball")],
        )
        ordered = order_concepts(key_set, graphs)
        assert ordered.concepts == ("dog", "ball")

    def test_chain_order(self):
        graphs = [
            parse_caption("a man holds a dog"),
            parse_caption("a dog chases a ball"),
        ]
        key_set = self.key_set(["ball", "dog", "man"], [0.9, 0.8, 0.1])
        ordered = order_concepts(key_set, graphs)
        assert ordered.concepts == ("man", "dog", "ball")
