"""Rule-based extraction of subject-predicate-object triplets from captions.

A small deterministic grammar stands in for a full dependency parser:
determiner-adjective-noun chunking for noun phrases, verb/preposition
grouping for predicates. Unknown words default to nouns, which suits
caption text. Precomputed triplets from an external parser can be
ingested instead via ``load_triplets``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

DETERMINERS = frozenset(
    """a an the this that these those some any each every no all both
    another other its his her their our my your several many few more most
    one two three four five six seven eight nine ten""".split()
)

PREPOSITIONS = frozenset(
    """on in at with under over near by behind beside above below across
    through from to of onto into beneath against along around atop amid
    amongst among inside outside past toward towards upon within without
    next during before after between""".split()
)

CONJUNCTIONS = frozenset({"and", "or", "while", "as"})

ADJECTIVES = frozenset(
    """red blue green yellow orange purple pink brown black white gray grey
    golden silver big small large little huge tiny tall short long wide
    narrow old young new modern ancient wooden metal plastic glass stone
    brick colorful bright dark light shiny dirty clean wet dry empty full
    open closed broken beautiful pretty cute happy sad angry busy quiet
    crowded snowy sunny cloudy rainy foggy grassy sandy rocky urban rural
    vintage fresh frozen hot cold warm cool delicious giant miniature
    striped spotted fluffy furry hairy bald round square flat steep lush
    double single left right upper lower front back middle distant nearby""".split()
)

VERBS = frozenset(
    """is are was were be being been has have had do does did
    sit sits sat stand stands stood run runs ran walk walks walked
    ride rides rode jump jumps jumped fly flies flew eat eats ate
    drink drinks drank hold holds held carry carries carried wear wears
    wore play plays played look looks looked watch watches watched
    sleep sleeps slept lie lies lay lays swim swims swam drive drives
    drove park parks parked catch catches caught throw throws threw
    kick kicks kicked read reads talk talks talked speak speaks spoke
    graze grazes grazed rest rests rested lean leans leaned hang hangs
    hung perch perches perched float floats floated sail sails sailed
    surf surfs ski skis skied skate skates skated climb climbs climbed
    pose poses posed smile smiles smiled wave waves waved reach reaches
    reached feed feeds fed pull pulls pulled push pushes pushed serve
    serves served cut cuts chase chases chased face faces faced contain
    contains contained fill fills filled cover covers covered show shows
    showed display displays displayed gather gathers gathered travel
    travels traveled cross crosses crossed enjoy enjoys enjoyed prepare
    prepares prepared work works worked depicts depict""".split()
)

_PUNCT_EDGE = re.compile(r"^[^\w]+|[^\w]+$")


def normalize_text(text: str) -> str:
    """Lowercase, strip edge punctuation per token, collapse whitespace."""
    tokens = []
    for raw in text.lower().split():
        tok = _PUNCT_EDGE.sub("", raw)
        if tok:
            tokens.append(tok)
    return " ".join(tokens)


def strip_plural(token: str) -> str:
    """Drop a bare plural suffix: -es after sibilant endings, else -s."""
    if len(token) > 3 and token.endswith(("sses", "xes", "zes", "ches", "shes")):
        return token[:-2]
    if len(token) > 2 and token.endswith("s") and not token.endswith(("ss", "us", "is")):
        return token[:-1]
    return token


@dataclass(frozen=True)
class Triplet:
    """Normalized subject-predicate-object; object is None for
    intransitive patterns."""

    subject: str
    predicate: str
    object: str | None = None


@dataclass(frozen=True)
class TextGraph:
    """Triplets extracted from one caption plus the deduplicated node
    list (subjects and objects) in first-occurrence order."""

    source_caption: str
    triplets: tuple[Triplet, ...]
    nodes: tuple[str, ...]


@dataclass(frozen=True)
class ConceptNode:
    """One candidate concept: a node text, which retrieved caption it
    came from, and whether it first appeared as a subject or object."""

    text: str
    origin_graph: int
    role: str  # "subject" | "object"


# Token classes used by the chunker.
_DET, _ADJ, _NOUN, _VERB, _PREP, _CONJ = "det", "adj", "noun", "verb", "prep", "conj"


def _classify(token: str, expecting_head: bool) -> str:
    if token in DETERMINERS:
        return _DET
    if token in CONJUNCTIONS:
        return _CONJ
    if token in PREPOSITIONS:
        return _PREP
    # After a determiner or adjective a head noun is expected, so verb-shaped
    # words read as nouns there ("a painting", "the bear").
    if token in VERBS or (len(token) >= 5 and token.endswith("ing")):
        return _NOUN if expecting_head else _VERB
    if token in ADJECTIVES:
        return _ADJ
    return _NOUN


def _chunk(tokens: list[str]) -> list[tuple[str, str]]:
    """Group tokens into ("np", text) / ("pred", text) chunks."""
    chunks: list[tuple[str, str]] = []
    np_parts: list[str] = []
    np_has_head = False
    det_pending = False
    pred_parts: list[str] = []

    def close_np() -> None:
        nonlocal np_parts, np_has_head
        if np_parts and np_has_head:
            chunks.append(("np", " ".join(np_parts)))
        np_parts = []
        np_has_head = False

    def close_pred() -> None:
        nonlocal pred_parts
        if pred_parts:
            chunks.append(("pred", " ".join(pred_parts)))
        pred_parts = []

    for token in tokens:
        expecting_head = det_pending or (bool(np_parts) and not np_has_head)
        kind = _classify(token, expecting_head)
        if kind == _DET:
            close_np()
            close_pred()
            det_pending = True
            continue
        det_pending = False
        if kind == _CONJ:
            close_np()
            close_pred()
        elif kind == _ADJ:
            close_pred()
            if np_has_head:
                close_np()
            np_parts.append(token)
        elif kind == _NOUN:
            close_pred()
            np_parts.append(token)
            np_has_head = True
        elif kind == _VERB:
            close_np()
            pred_parts.append(token)
        elif kind == _PREP:
            if not pred_parts:
                close_np()
            pred_parts.append(token)
    close_np()
    close_pred()
    return chunks


def parse_caption(caption: str) -> TextGraph:
    """Parse one caption into a TextGraph. Pure and deterministic.

    A caption without a detectable predicate yields nodes with an empty
    triplet list; a whitespace-only caption yields an empty graph.
    """
    tokens = normalize_text(caption).split()
    chunks = _chunk(tokens)

    triplets: list[Triplet] = []
    for i, (kind, text) in enumerate(chunks):
        if kind != "pred":
            continue
        subject = next(
            (t for k, t in reversed(chunks[:i]) if k == "np"),
            None,
        )
        if subject is None:
            continue
        obj = None
        if i + 1 < len(chunks) and chunks[i + 1][0] == "np":
            obj = chunks[i + 1][1]
        triplets.append(Triplet(subject, text, obj))

    nodes: list[str] = []
    for kind, text in chunks:
        if kind == "np" and text not in nodes:
            nodes.append(text)
    return TextGraph(caption, tuple(triplets), tuple(nodes))


def load_triplets(path: str | Path, strict: bool = False) -> dict[str, TextGraph]:
    """Read precomputed triplets from a JSON-lines file.

    Each line is {"caption": str, "triplets": [[subject, predicate,
    object], ...]} with a null object allowed. Malformed lines are
    skipped with a warning (or raise when ``strict``). Duplicate
    captions: the last line wins, with a warning.
    """
    graphs: dict[str, TextGraph] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                caption = record["caption"]
                rows = record["triplets"]
                triplets = []
                for row in rows:
                    subject, predicate, obj = row
                    triplets.append(
                        Triplet(
                            normalize_text(subject),
                            normalize_text(predicate),
                            normalize_text(obj) if obj is not None else None,
                        )
                    )
            except (KeyError, ValueError, TypeError) as exc:
                message = f"line {lineno}: malformed triplet record ({exc})"
                if strict:
                    raise ValueError(message) from exc
                logger.warning("%s; skipping", message)
                continue
            if caption in graphs:
                logger.warning(
                    "line %d: duplicate caption %r, keeping the later entry",
                    lineno,
                    caption[:60],
                )
            nodes: list[str] = []
            for t in triplets:
                for endpoint in (t.subject, t.object):
                    if endpoint and endpoint not in nodes:
                        nodes.append(endpoint)
            graphs[caption] = TextGraph(caption, tuple(triplets), tuple(nodes))
    return graphs


def collect_nodes(graphs: list[TextGraph]) -> list[ConceptNode]:
    """Concatenate the nodes of all graphs, tagged with their origin index.

    Duplicates across graphs are preserved; clustering handles
    deduplication downstream. A node's role is taken from its first
    triplet occurrence; nodes outside any triplet default to subject.
    """
    nodes: list[ConceptNode] = []
    for graph_index, graph in enumerate(graphs):
        roles: dict[str, str] = {}
        for triplet in graph.triplets:
            roles.setdefault(triplet.subject, "subject")
            if triplet.object is not None:
                roles.setdefault(triplet.object, "object")
        for text in graph.nodes:
            nodes.append(ConceptNode(text, graph_index, roles.get(text, "subject")))
    return nodes
