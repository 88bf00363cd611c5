"""Iterative keywords-to-sentence refinement.

Starting from the ordered key concepts (optionally behind a fixed
prefix), each iteration asks the constrained LM for a per-token action
sequence, coerces any action that would damage a locked token, turns the
surviving replace/insert actions into masks, and fills the masks left to
right with the fusion-selected word. The loop stops at a full-copy
action sequence or the iteration cap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .concepts import KeyConceptSet
from .fusion import CandidateWord, FusionWeights, ScoreBreakdown, ScoringContext
from .gateway import COPY, INSERT, REPLACE, ProtocolError

logger = logging.getLogger(__name__)

DEFAULT_PREFIX = "The image above depicts that"

TERMINATED_FULL_COPY = "full_copy"
TERMINATED_MAX_ITERATIONS = "max_iterations"


class NoConstraintsError(ValueError):
    """Neither keywords nor a prefix: there is nothing to refine."""


@dataclass(frozen=True)
class DecodeConfig:
    """Knobs for one refinement run."""

    k_w: int = 200
    n_d: int = 5
    max_iterations: int = 15
    prefix: str | None = DEFAULT_PREFIX
    weights: FusionWeights = field(default_factory=FusionWeights)

    def __post_init__(self) -> None:
        if self.k_w < 1:
            raise ValueError(f"k_w must be >= 1, got {self.k_w}")
        if self.n_d < 1:
            raise ValueError(f"n_d must be >= 1, got {self.n_d}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")

    def prefix_tokens(self) -> list[str]:
        return self.prefix.split() if self.prefix else []


@dataclass(frozen=True)
class SentenceState:
    """The token sequence at one iteration.

    ``locked`` marks prefix and keyword tokens, which can never be
    replaced. ``lock_groups`` gives every locked token the id of the
    keyword (or prefix) it belongs to, so inserts between two tokens of
    the same keyword can be refused while inserts between different
    keywords stay legal.
    """

    tokens: tuple[str, ...]
    locked: tuple[bool, ...]
    lock_groups: tuple[int | None, ...]
    iteration: int = 0
    prefix_group: int | None = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("sentence state must contain at least one token")
        if not (len(self.tokens) == len(self.locked) == len(self.lock_groups)):
            raise ValueError("tokens, locked, and lock_groups must be parallel")
        for is_locked, group in zip(self.locked, self.lock_groups):
            if is_locked != (group is not None):
                raise ValueError("locked flags and lock_groups disagree")
        if self.iteration < 0:
            raise ValueError(f"iteration must be >= 0, got {self.iteration}")

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class ActionSequence:
    """Per-token copy/replace/insert decisions after coercion."""

    actions: tuple[str, ...]

    def is_all_copy(self) -> bool:
        return all(a == COPY for a in self.actions)


@dataclass(frozen=True)
class DecisionRecord:
    """One filled mask: where, what was chosen, and the score trace."""

    iteration: int
    position: int
    action: str
    chosen_token: str
    top5: tuple[ScoreBreakdown, ...]

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "position": self.position,
            "action": self.action,
            "chosen_token": self.chosen_token,
            "top5": [b.to_json() for b in self.top5],
        }


@dataclass
class RefinementTrace:
    """States after every iteration plus every word decision made."""

    states: list[SentenceState]
    decisions: list[DecisionRecord]
    termination: str


def initialize_from_keywords(
    key_set: KeyConceptSet, config: DecodeConfig
) -> SentenceState:
    """Build the iteration-0 state: prefix tokens then keyword tokens,
    all locked, each keyword one lock group."""
    tokens: list[str] = []
    locked: list[bool] = []
    groups: list[int | None] = []
    group = 0
    prefix_tokens = config.prefix_tokens()
    if prefix_tokens:
        tokens.extend(prefix_tokens)
        locked.extend([True] * len(prefix_tokens))
        groups.extend([group] * len(prefix_tokens))
        group += 1
    for concept in key_set.concepts:
        concept_tokens = concept.split()
        tokens.extend(concept_tokens)
        locked.extend([True] * len(concept_tokens))
        groups.extend([group] * len(concept_tokens))
        group += 1
    if not tokens:
        raise NoConstraintsError(
            "no keywords and no prefix; refinement has nothing to start from"
        )
    return SentenceState(
        tuple(tokens),
        tuple(locked),
        tuple(groups),
        iteration=0,
        prefix_group=0 if prefix_tokens else None,
    )


def _coerce_actions(raw: Sequence[str], state: SentenceState) -> list[str]:
    """Force actions that would break a locked token back to copy.

    Replace on a locked position is refused. Insert before a locked
    position is generally fine; it is refused when it would land inside
    one lock group (between two tokens of the same keyword) or anywhere
    in the prefix, which is a fixed sentence head nothing may precede.
    """
    effective = list(raw)
    for i, action in enumerate(effective):
        if action == REPLACE and state.locked[i]:
            effective[i] = COPY
        elif action == INSERT:
            group = state.lock_groups[i]
            inside_group = (
                i > 0 and group is not None and group == state.lock_groups[i - 1]
            )
            in_prefix = group is not None and group == state.prefix_group
            if inside_group or in_prefix:
                effective[i] = COPY
    return effective


def refine_step(
    state: SentenceState,
    lm,
    context: ScoringContext,
    config: DecodeConfig,
) -> tuple[SentenceState, ActionSequence, list[DecisionRecord]]:
    """Run one refinement iteration.

    Masks are materialized and filled strictly left to right; each chosen
    word is committed before the next mask is scored, so later masks see
    earlier decisions. Decision records carry the executed (1-based)
    iteration number and the mask's position in the pre-step token list.
    """
    if state.iteration >= config.max_iterations:
        raise ValueError(
            f"state already at iteration {state.iteration} >= cap {config.max_iterations}"
        )
    proposal = lm.propose(list(state.tokens), list(state.locked), config.k_w)
    if len(proposal.actions) != len(state.tokens):
        raise ProtocolError(
            f"LM returned {len(proposal.actions)} actions for {len(state.tokens)} tokens"
        )
    effective = _coerce_actions(proposal.actions, state)

    tokens = list(state.tokens)
    locked = list(state.locked)
    groups = list(state.lock_groups)
    records: list[DecisionRecord] = []
    iteration = state.iteration + 1
    offset = 0
    for position, action in enumerate(effective):
        if action == COPY:
            continue
        raw_candidates = proposal.candidates_for(position)
        if not raw_candidates:
            raise ProtocolError(
                f"LM returned zero candidates for mask at position {position}"
            )
        candidates = [CandidateWord(t, p) for t, p in raw_candidates]
        at = position + offset
        sentences = []
        for candidate in candidates:
            if action == REPLACE:
                trial = tokens[:at] + [candidate.token] + tokens[at + 1 :]
            else:
                trial = tokens[:at] + [candidate.token] + tokens[at:]
            sentences.append(" ".join(trial))
        best, breakdowns = context.select(sentences, candidates, config.weights)
        chosen = candidates[best].token
        if action == REPLACE:
            tokens[at] = chosen
            locked[at] = False
            groups[at] = None
        else:
            tokens.insert(at, chosen)
            locked.insert(at, False)
            groups.insert(at, None)
            offset += 1
        top5 = tuple(
            sorted(breakdowns, key=lambda b: -b.fused)[:5]
        )
        records.append(
            DecisionRecord(iteration, position, action, chosen, top5)
        )

    new_state = SentenceState(
        tuple(tokens),
        tuple(locked),
        tuple(groups),
        iteration=iteration,
        prefix_group=state.prefix_group,
    )
    return new_state, ActionSequence(tuple(effective)), records


def detokenize(state: SentenceState) -> str:
    """Join the final tokens, dropping the prefix if one was configured."""
    return " ".join(
        token
        for token, group in zip(state.tokens, state.lock_groups)
        if state.prefix_group is None or group != state.prefix_group
    )


def contains_keywords(tokens: Sequence[str], key_set: KeyConceptSet) -> bool:
    """True when every key concept is a contiguous run in ``tokens``."""
    token_list = list(tokens)
    for concept in key_set.concepts:
        needle = concept.split()
        n = len(needle)
        found = any(
            token_list[start : start + n] == needle
            for start in range(len(token_list) - n + 1)
        )
        if not found:
            return False
    return True


def run_refinement(
    key_set: KeyConceptSet,
    lm,
    context: ScoringContext,
    config: DecodeConfig,
) -> tuple[str, RefinementTrace]:
    """Refine from keywords to a caption.

    Stops when an iteration's coerced action sequence is all copy (a
    fixed point: nothing changed and nothing will) or when the iteration
    cap is reached. The returned caption is the final token sequence
    without the prefix.
    """
    state = initialize_from_keywords(key_set, config)
    states = [state]
    decisions: list[DecisionRecord] = []
    termination = TERMINATED_MAX_ITERATIONS
    while state.iteration < config.max_iterations:
        state, actions, records = refine_step(state, lm, context, config)
        states.append(state)
        decisions.extend(records)
        if actions.is_all_copy():
            termination = TERMINATED_FULL_COPY
            break
    caption = detokenize(state)
    if not contains_keywords(state.tokens, key_set):
        # locking makes this unreachable; check anyway so a regression
        # cannot silently drop a keyword
        raise AssertionError(
            f"keyword lost during refinement: {key_set.concepts} not all in {state.tokens}"
        )
    return caption, RefinementTrace(states, decisions, termination)
