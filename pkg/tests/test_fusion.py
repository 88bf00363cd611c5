"""Fusion scoring: component oracles, argmax selection, degenerate
weights, and the cached scoring context."""

from __future__ import annotations

import math

import numpy as np
import pytest

from retrocap.fusion import (
    CandidateScoringError,
    CandidateWord,
    FusionWeights,
    ScoringContext,
    fuse_and_select,
    fused_score,
    score_its,
    score_tts,
)
from retrocap.gateway import MockGateway
from retrocap.vectors import CROSS_MODAL, EmbeddingVector


class TestWeights:
    def test_defaults(self):
        w = FusionWeights()
        assert (w.alpha, w.beta, w.gamma) == (0.1, 0.4, 0.2)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            FusionWeights(alpha=-0.1)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            FusionWeights(0.0, 0.0, 0.0)


class TestScoreIts:
    def test_identical_embedding_scores_one(self, gateway):
        sentence = "a dog in a park"
        image = gateway.embed_text(sentence)
        scores = score_its([sentence], image, gateway)
        assert scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_embedding_scores_zero(self):
        class TwoVectorEmbedder:
            def embed_texts(self, texts):
                return [EmbeddingVector.from_raw([0.0, 1.0], CROSS_MODAL) for _ in texts]

        image = EmbeddingVector.from_raw([1.0, 0.0], CROSS_MODAL)
        assert score_its(["x"], image, TwoVectorEmbedder())[0] == pytest.approx(0.0, abs=1e-7)

    def test_matches_dot_product_oracle(self, gateway):
        rng = np.random.default_rng(21)
        vocab = ["dog", "cat", "ball", "chair", "park", "tree", "car"]
        sentences = [
            " ".join(rng.choice(vocab, size=4)) for _ in range(200)
        ]
        image = gateway.embed_text("a dog and a ball")
        got = score_its(sentences, image, gateway)
        expected = [
            float(np.dot(image.values, gateway.embed_text(s).values))
            for s in sentences
        ]
        assert got == pytest.approx(expected, abs=1e-6)

    def test_empty_candidates_rejected(self, gateway):
        with pytest.raises(ValueError):
            score_its([], gateway.embed_text("x"), gateway)

    def test_failure_names_candidate_index(self):
        class FailsOnSecond:
            def embed_texts(self, texts):
                raise RuntimeError("batch down")

            def embed_text(self, text):
                if text == "bad":
                    raise RuntimeError("boom")
                return EmbeddingVector.from_raw([1.0, 0.0], CROSS_MODAL)

        image = EmbeddingVector.from_raw([1.0, 0.0], CROSS_MODAL)
        with pytest.raises(CandidateScoringError) as excinfo:
            score_its(["ok", "bad"], image, FailsOnSecond())
        assert excinfo.value.index == 1


class TestScoreTts:
    def test_identity_with_single_memory(self, gateway):
        caption = "a cat on a sofa"
        memory = gateway.embed_sentences([caption])
        scores = score_tts([caption], memory, gateway)
        assert scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_mean_of_two(self):
        class Fixed:
            table = {
                "m1": [1.0, 0.0, 0.0],
                "m2": [0.0, 1.0, 0.0],
                "cand": [0.4, 0.8, 0.4472135954999579],
            }

            def embed_sentences(self, texts):
                return [
                    EmbeddingVector.from_raw(self.table[t], "sentence") for t in texts
                ]

        fixed = Fixed()
        memory = fixed.embed_sentences(["m1", "m2"])
        # cosines are 0.4 and 0.8, mean 0.6
        assert score_tts(["cand"], memory, fixed)[0] == pytest.approx(0.6, abs=1e-6)

    def test_matches_double_loop_oracle(self, gateway):
        rng = np.random.default_rng(31)
        vocab = ["dog", "cat", "ball", "chair", "park"]
        memory_captions = [" ".join(rng.choice(vocab, size=3)) for _ in range(5)]
        candidates = [" ".join(rng.choice(vocab, size=4)) for _ in range(50)]
        memory = gateway.embed_sentences(memory_captions)
        got = score_tts(candidates, memory, gateway)
        expected = []
        for candidate in candidates:
            v = gateway.embed_sentence(candidate)
            expected.append(
                sum(float(np.dot(m.values, v.values)) for m in memory) / len(memory)
            )
        assert got == pytest.approx(expected, abs=1e-6)


class TestFuseAndSelect:
    def candidates(self, probs):
        return [CandidateWord(f"w{i}", p) for i, p in enumerate(probs)]

    def test_lm_only_weights_reduce_to_lm_argmax(self):
        cands = self.candidates([0.2, 0.9, 0.5])
        index, _ = fuse_and_select(cands, [0.9, 0.1, 0.5], [0.9, 0.1, 0.5], FusionWeights(1, 0, 0))
        assert index == 1

    def test_its_only_weights(self):
        cands = self.candidates([0.9, 0.1, 0.5])
        index, _ = fuse_and_select(cands, [0.2, 0.9, 0.5], [0.1, 0.1, 0.9], FusionWeights(0, 1, 0))
        assert index == 1

    def test_tts_only_weights(self):
        cands = self.candidates([0.9, 0.1, 0.5])
        index, _ = fuse_and_select(cands, [0.9, 0.2, 0.5], [0.1, 0.1, 0.9], FusionWeights(0, 0, 1))
        assert index == 2

    def test_tie_breaks_by_ascending_index(self):
        cands = self.candidates([0.5, 0.5, 0.5])
        index, _ = fuse_and_select(cands, [0.5, 0.5, 0.5], [0.5, 0.5, 0.5], FusionWeights())
        assert index == 0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fuse_and_select(self.candidates([0.5]), [0.5, 0.5], [0.5], FusionWeights())

    def test_non_finite_candidate_excluded(self, caplog):
        cands = self.candidates([0.9, 0.5])
        with caplog.at_level("WARNING"):
            index, breakdowns = fuse_and_select(
                cands, [float("nan"), 0.1], [0.0, 0.0], FusionWeights()
            )
        assert index == 1
        assert len(breakdowns) == 2
        assert any("non-finite" in r.message for r in caplog.records)

    def test_all_non_finite_is_an_error(self):
        cands = self.candidates([0.9, 0.5])
        with pytest.raises(ValueError):
            fuse_and_select(cands, [math.inf, math.nan], [0.0, 0.0], FusionWeights())

    def test_matches_recompute_oracle(self):
        """100 random 200-candidate fixtures under default weights."""
        rng = np.random.default_rng(99)
        weights = FusionWeights()
        for trial in range(100):
            lm = rng.uniform(0, 1, size=200)
            its = rng.uniform(-1, 1, size=200)
            tts = rng.uniform(-1, 1, size=200)
            cands = self.candidates(lm.tolist())
            index, breakdowns = fuse_and_select(cands, its.tolist(), tts.tolist(), weights)
            fused = [
                weights.alpha * lm[k] + weights.beta * its[k] + weights.gamma * tts[k]
                for k in range(200)
            ]
            expected = max(range(200), key=lambda k: (fused[k], -k))
            assert index == expected, f"trial {trial}"
            assert [b.fused for b in breakdowns] == pytest.approx(fused)

    def test_linearity_in_its(self):
        """Changing its[k] by delta moves fused[k] by exactly beta*delta."""
        weights = FusionWeights(0.1, 0.4, 0.2)
        cands = self.candidates([0.3, 0.7])
        _, base = fuse_and_select(cands, [0.2, 0.5], [0.1, 0.1], weights)
        _, bumped = fuse_and_select(cands, [0.2, 0.5 + 0.25], [0.1, 0.1], weights)
        assert bumped[1].fused - base[1].fused == pytest.approx(0.4 * 0.25, abs=1e-12)
        assert bumped[0].fused == base[0].fused

    def test_argmax_invariant_under_constant_shift(self):
        rng = np.random.default_rng(17)
        weights = FusionWeights()
        for _ in range(20):
            lm = rng.uniform(0, 1, size=30).tolist()
            its = rng.uniform(-1, 1, size=30).tolist()
            tts = rng.uniform(-1, 1, size=30).tolist()
            cands = self.candidates(lm)
            base, _ = fuse_and_select(cands, its, tts, weights)
            shifted, _ = fuse_and_select(
                cands, [x + 0.37 for x in its], tts, weights
            )
            assert shifted == base

    def test_breakdown_arithmetic_is_exact(self):
        weights = FusionWeights(0.1, 0.4, 0.2)
        _, [b] = fuse_and_select(self.candidates([0.62]), [0.31], [-0.2], weights)
        assert b.fused == fused_score(weights, 0.62, 0.31, -0.2)


class TestScoringContext:
    def test_memory_embeddings_computed_once(self):
        class CountingEmbedder(MockGateway):
            def __init__(self):
                super().__init__(seed=1)
                self.sentence_batches = 0

            def embed_sentences(self, texts):
                self.sentence_batches += 1
                return super().embed_sentences(texts)

        g = CountingEmbedder()
        image = g.embed_text("a dog")
        context = ScoringContext(image, ["m1 dog", "m2 cat"], g, g)
        assert g.sentence_batches == 1
        for _ in range(3):
            context.select(
                ["a dog runs", "a dog sits"],
                [CandidateWord("runs", 0.9), CandidateWord("sits", 0.5)],
                FusionWeights(),
            )
        # one batch per select call for the candidates; memory never again
        assert g.sentence_batches == 4

    def test_rejects_sentence_space_image(self, gateway):
        with pytest.raises(ValueError):
            ScoringContext(
                gateway.embed_sentence("a dog"), ["m"], gateway, gateway
            )

    def test_rejects_empty_memory(self, gateway):
        with pytest.raises(ValueError):
            ScoringContext(gateway.embed_text("a dog"), [], gateway, gateway)
