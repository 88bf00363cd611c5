"""End-to-end captioning: embed, retrieve, parse, filter, refine.

One function takes an image and a memory index and walks the whole
chain, recording per-stage timings and the intermediates needed by the
inspect command.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .concepts import (
    ClusterConfig,
    KeyConceptSet,
    annotate_cf,
    cluster_concepts,
    filter_clusters,
    order_concepts,
    select_key_concepts,
)
from .fusion import ScoringContext
from .gateway import ImageInput
from .memory import MemoryIndex, RetrievedSet, retrieve_top_n
from .parsing import collect_nodes, normalize_text, parse_caption
from .refine import DecodeConfig, RefinementTrace, run_refinement
from .vectors import EmbeddingVector

logger = logging.getLogger(__name__)


@dataclass
class CaptionResult:
    """What the caption command emits for one image."""

    image_path: str
    caption: str
    key_concepts: list[str]
    retrieved_ids: list[int]
    termination: str
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "image_path": self.image_path,
            "caption": self.caption,
            "key_concepts": self.key_concepts,
            "retrieved_ids": self.retrieved_ids,
            "termination": self.termination,
            "timings": self.timings,
        }


@dataclass
class PipelineIntermediates:
    """Everything the pipeline computed before and during refinement."""

    image_embedding: EmbeddingVector
    retrieved: RetrievedSet
    graphs: list
    clusters: list
    key_set: KeyConceptSet
    trace: RefinementTrace | None = None


def _fallback_key_set(nodes, image_embedding, gateway) -> KeyConceptSet:
    """When filtering removed everything: keep the single node whose text
    is most similar to the image, so a caption is still produced."""
    texts: list[str] = []
    for node in nodes:
        text = normalize_text(node.text)
        if text and text not in texts:
            texts.append(text)
    vectors = gateway.embed_texts(texts)
    sims = [image_embedding.cosine(v) for v in vectors]
    best = max(range(len(texts)), key=lambda i: (sims[i], -i))
    logger.info("concept filter kept nothing; falling back to %r", texts[best])
    return KeyConceptSet(
        concepts=(texts[best],),
        image_similarities=(sims[best],),
        member_map=((texts[best], texts[best]),),
    )


def derive_key_concepts(
    image_embedding: EmbeddingVector,
    retrieved: RetrievedSet,
    gateway,
    cluster_config: ClusterConfig,
) -> tuple[list, list, KeyConceptSet]:
    """Parse retrieved captions and reduce them to ordered key concepts.

    Returns (graphs, annotated clusters, ordered key set). The key set
    may be empty only when no caption yielded any concept node.
    """
    graphs = [parse_caption(caption) for caption in retrieved.captions]
    nodes = collect_nodes(graphs)
    if not nodes:
        logger.warning("no concept nodes parsed from %d captions", len(retrieved))
        return graphs, [], KeyConceptSet(concepts=(), image_similarities=())
    clusters = annotate_cf(
        cluster_concepts(nodes, gateway, cluster_config), retrieved
    )
    kept = filter_clusters(clusters, cluster_config)
    if kept:
        key_set = select_key_concepts(kept, image_embedding, gateway)
        key_set = order_concepts(key_set, graphs)
    else:
        key_set = _fallback_key_set(nodes, image_embedding, gateway)
    return graphs, clusters, key_set


def caption_image(
    image: ImageInput,
    image_path: str,
    index: MemoryIndex,
    gateway,
    cluster_config: ClusterConfig | None = None,
    decode_config: DecodeConfig | None = None,
    retrieval_workers: int = 1,
) -> tuple[CaptionResult, PipelineIntermediates]:
    """Run the full pipeline for one image."""
    cluster_config = cluster_config or ClusterConfig()
    decode_config = decode_config or DecodeConfig()
    timings: dict[str, float] = {}
    started = time.perf_counter()

    mark = time.perf_counter()
    image_embedding = gateway.embed_image(image)
    if image_embedding.dimension != index.dimension:
        raise ValueError(
            f"image embedding dimension {image_embedding.dimension} does not "
            f"match memory index dimension {index.dimension}"
        )
    timings["embed_ms"] = (time.perf_counter() - mark) * 1000

    mark = time.perf_counter()
    retrieved = retrieve_top_n(
        index, image_embedding, decode_config.n_d, workers=retrieval_workers
    )
    timings["retrieve_ms"] = (time.perf_counter() - mark) * 1000

    mark = time.perf_counter()
    graphs, clusters, key_set = derive_key_concepts(
        image_embedding, retrieved, gateway, cluster_config
    )
    timings["concepts_ms"] = (time.perf_counter() - mark) * 1000

    mark = time.perf_counter()
    context = ScoringContext(image_embedding, retrieved.captions, gateway, gateway)
    caption, trace = run_refinement(key_set, gateway, context, decode_config)
    timings["refine_ms"] = (time.perf_counter() - mark) * 1000
    timings["total_ms"] = (time.perf_counter() - started) * 1000

    result = CaptionResult(
        image_path=image_path,
        caption=caption,
        key_concepts=list(key_set.concepts),
        retrieved_ids=list(retrieved.ids),
        termination=trace.termination,
        timings=timings,
    )
    intermediates = PipelineIntermediates(
        image_embedding=image_embedding,
        retrieved=retrieved,
        graphs=graphs,
        clusters=clusters,
        key_set=key_set,
        trace=trace,
    )
    return result, intermediates
