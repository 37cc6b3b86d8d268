"""Split candidate responses into atomic facts.

Two routes: ask the backend to enumerate facts (prompt mode), or fall back
to plain sentence splitting. Math answers always use sentence mode, since
their "facts" are reasoning steps, not checkable claims.
"""

from __future__ import annotations

import re
from typing import Optional, Sequence

from .core import Candidate, DecompositionMode, Fact, TaskKind, split_sentences
from .gateway import CallLog, ChatRequest, Gateway
from .prompts import PromptCatalog


class EmptyDecomposition(Exception):
    """The decomposition reply contained no usable items."""


_ITEM_RE = re.compile(r"^\s*\d+[.)]\s+(.*)$")


def parse_numbered_list(text: str) -> list:
    """Extract items from a numbered-list reply.

    An item line looks like ``1. ...`` or ``2) ...``. Non-matching lines
    directly under an item are continuations and get merged in; a blank line
    ends the item, so trailing chatter after the list is discarded, as is
    any preamble before the first item. Items that end up empty are dropped.
    """
    items: list = []
    open_item = False
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            items.append([m.group(1).strip()])
            open_item = True
        elif not line.strip():
            open_item = False
        elif open_item:
            items[-1].append(line.strip())
    merged = []
    for parts in items:
        joined = " ".join(p for p in parts if p)
        if joined:
            merged.append(joined)
    return merged


def build_decompose_request(
    text: str, catalog: PromptCatalog, max_tokens: int = 1024
) -> ChatRequest:
    prompt = catalog.render("decompose", text=text)
    return ChatRequest.user(prompt, temperature=0.0, max_tokens=max_tokens)


def parse_decomposition(candidate_index: int, reply_text: str) -> list:
    """Turn a decomposition reply into Facts for the given candidate.

    Exact duplicate items within the one reply are dropped (the prompt asks
    for non-repeated facts; models still repeat themselves), and fact
    indices number the deduplicated list.
    """
    items = parse_numbered_list(reply_text)
    seen = set()
    unique = []
    for item in items:
        if item in seen:
            continue
        seen.add(item)
        unique.append(item)
    if not unique:
        raise EmptyDecomposition(
            f"candidate {candidate_index}: no facts parsed from reply"
        )
    return [
        Fact(candidate_index=candidate_index, fact_index=j, text=item)
        for j, item in enumerate(unique)
    ]


def decompose_by_prompt(
    candidate: Candidate,
    gateway: Gateway,
    catalog: PromptCatalog,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> list:
    """Ask the backend to enumerate the candidate's facts (temperature 0)."""
    request = build_decompose_request(candidate.text, catalog, max_tokens)
    response = gateway.complete(request, purpose="decompose", log=log)
    return parse_decomposition(candidate.index, response.text)


def decompose_by_sentence(candidate: Candidate) -> list:
    return [
        Fact(candidate_index=candidate.index, fact_index=j, text=sentence)
        for j, sentence in enumerate(split_sentences(candidate.text))
    ]


def decompose_all(
    candidates: Sequence[Candidate],
    mode: DecompositionMode,
    task_kind: TaskKind,
    gateway: Gateway,
    catalog: PromptCatalog,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> tuple:
    """Decompose every candidate, returning (updated candidates, flags).

    Prompt-mode calls for the whole batch run concurrently. A candidate
    whose prompt decomposition comes back empty falls back to sentence
    splitting and is flagged rather than failed.
    """
    flags: list = []
    use_sentences = mode is DecompositionMode.SENTENCE or task_kind is TaskKind.MATH
    if use_sentences:
        return [c.with_facts(decompose_by_sentence(c)) for c in candidates], flags

    batch = [build_decompose_request(c.text, catalog, max_tokens) for c in candidates]
    responses = gateway.complete_many(batch, purpose="decompose", log=log)
    updated = []
    for candidate, response in zip(candidates, responses):
        try:
            facts = parse_decomposition(candidate.index, response.text)
        except EmptyDecomposition:
            facts = decompose_by_sentence(candidate)
            flags.append(f"decompose_fallback_sentence:{candidate.index}")
        updated.append(candidate.with_facts(facts))
    return updated, flags
