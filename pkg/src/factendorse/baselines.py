"""Reference methods the pipeline is compared against.

Self-consistency (majority vote over extracted answers), universal
self-consistency (the model picks the most consistent of its own samples),
chain-of-verification (draft, plan checks, answer them independently,
rewrite), and a single refine pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import Candidate, Query, TaskKind
from .decompose import parse_numbered_list
from .gateway import CallLog, ChatRequest, Gateway, derive_seed
from .prompts import PromptCatalog


class NoExtractableAnswers(Exception):
    """No sampled response yielded a parseable final answer."""


# Last number in the reply is taken as the final answer; commas allowed.
_NUMBER_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?")

_CHOICE_RE = re.compile(
    r"\b(?:response|candidate|option|answer|sample)\s*#?\s*(\d{1,3})\b", re.IGNORECASE
)
_ORDINALS = {
    "first": 1,
    "second": 2,
    "third": 3,
    "fourth": 4,
    "fifth": 5,
    "sixth": 6,
    "seventh": 7,
    "eighth": 8,
    "ninth": 9,
    "tenth": 10,
}
_ORDINAL_RE = re.compile(
    r"\b(" + "|".join(_ORDINALS) + r")\b", re.IGNORECASE
)
_BARE_INT_RE = re.compile(r"\b(\d{1,3})\b")


def normalize_number(token: str) -> str:
    """Canonical form for numeric answer comparison.

    Strips commas, a leading dollar sign, a trailing period, and redundant
    trailing zeros after a decimal point, so "1,372.50" and "1372.5" agree.
    """
    s = token.strip().replace(",", "").lstrip("$").rstrip(".")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s


@dataclass(frozen=True)
class AnswerExtraction:
    task_kind: TaskKind
    raw_response: str
    extracted: Optional[str]

    @property
    def answer(self) -> Optional[str]:
        return self.extracted


def extract_final_answer(response: str, task_kind: TaskKind) -> AnswerExtraction:
    """Pull the comparable final answer out of a response.

    Math: the last number anywhere in the text, normalized; unset when the
    text contains no number. Short QA: the whole response (recall-style
    matching happens downstream). Long-form has no single answer.
    """
    if task_kind is TaskKind.MATH:
        matches = _NUMBER_RE.findall(response)
        extracted = normalize_number(matches[-1]) if matches else None
        return AnswerExtraction(task_kind, response, extracted or None)
    if task_kind is TaskKind.SHORT_QA:
        return AnswerExtraction(task_kind, response, response)
    return AnswerExtraction(task_kind, response, None)


def modal_answer(answers: Sequence[str]) -> str:
    """Most frequent answer; ties go to the one that appeared first."""
    if not answers:
        raise ValueError("no answers to vote over")
    counts: dict = {}
    for a in answers:
        counts[a] = counts.get(a, 0) + 1
    best_count = max(counts.values())
    tied = [a for a, c in counts.items() if c == best_count]
    return min(tied, key=answers.index)


def self_consistency(
    query: Query,
    n: int,
    temperature: float,
    gateway: Gateway,
    catalog: PromptCatalog,
    seed: int = 0,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> tuple:
    """Majority vote over n chain-of-thought samples (math tasks only).

    Returns (winning answer, sampled candidates). Samples that yield no
    parseable number are excluded from the vote; if none parse, raises.
    """
    if query.task_kind is not TaskKind.MATH:
        raise ValueError("self-consistency voting needs a math task")
    if n < 2:
        raise ValueError("self-consistency needs n >= 2")
    prompt = catalog.render("sc_math", query=query.text)
    batch = [
        ChatRequest.user(
            prompt,
            temperature=temperature,
            max_tokens=max_tokens,
            seed_hint=derive_seed(seed, query.id, f"sample-{i}"),
        )
        for i in range(n)
    ]
    responses = gateway.complete_many(batch, purpose="sample", log=log)
    candidates = [Candidate(index=i, text=r.text) for i, r in enumerate(responses)]
    answers = []
    for response in responses:
        extraction = extract_final_answer(response.text, TaskKind.MATH)
        if extraction.answer is not None:
            answers.append(extraction.answer)
    if not answers:
        raise NoExtractableAnswers(f"query {query.id}: no sample produced a number")
    return modal_answer(answers), candidates


def parse_choice(text: str, n: int) -> tuple:
    """Parse which of n candidates a chooser reply picked.

    Tries an explicit "Response 3" style mention, then ordinal words, then
    a bare integer. Returns (zero-based index, parsed_ok); unparseable or
    out-of-range replies fall back to the first candidate with
    parsed_ok False.
    """
    m = _CHOICE_RE.search(text)
    if m:
        value = int(m.group(1))
        if 1 <= value <= n:
            return value - 1, True
    m = _ORDINAL_RE.search(text)
    if m:
        value = _ORDINALS[m.group(1).lower()]
        if 1 <= value <= n:
            return value - 1, True
    m = _BARE_INT_RE.search(text)
    if m:
        value = int(m.group(1))
        if 1 <= value <= n:
            return value - 1, True
    return 0, False


def universal_self_consistency(
    query: Query,
    n: int,
    temperature: float,
    gateway: Gateway,
    catalog: PromptCatalog,
    seed: int = 0,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> tuple:
    """Ask the model to pick the most consistent of its own n samples.

    Returns (chosen response verbatim, candidates, flags). The chooser call
    runs at temperature 0.
    """
    candidates = gateway.sample_candidates(
        query, n, temperature, seed=seed, log=log, max_tokens=max_tokens
    )
    numbered = "\n\n".join(
        f"Response {c.index + 1}: {c.text}" for c in candidates
    )
    prompt = catalog.render("usc_choose", query=query.text, candidates=numbered)
    reply = gateway.complete(
        ChatRequest.user(prompt, temperature=0.0, max_tokens=max_tokens),
        purpose="usc_choose",
        log=log,
    )
    index, parsed_ok = parse_choice(reply.text, len(candidates))
    flags = [] if parsed_ok else ["usc_unparsed_choice"]
    return candidates[index].text, candidates, flags


def chain_of_verification(
    query: Query,
    gateway: Gateway,
    catalog: PromptCatalog,
    temperature: float = 1.0,
    seed: int = 0,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> tuple:
    """Draft, plan verification questions, answer them independently, rewrite.

    The draft samples at the configured temperature (with a derived seed
    hint); planning, answering, and the final rewrite run at temperature 0.
    Each planned question is answered in its own context, without the draft,
    so the check cannot just repeat the draft's mistake. Returns
    (final text, flags); an empty question plan returns the draft flagged.
    """
    draft = gateway.complete(
        ChatRequest.user(
            catalog.render("cove_draft", query=query.text),
            temperature=temperature,
            max_tokens=max_tokens,
            seed_hint=derive_seed(seed, query.id, "cove-draft"),
        ),
        purpose="cove_draft",
        log=log,
    )
    plan = gateway.complete(
        ChatRequest.user(
            catalog.render("cove_plan", query=query.text, draft=draft.text),
            temperature=0.0,
            max_tokens=max_tokens,
        ),
        purpose="cove_plan",
        log=log,
    )
    questions = parse_numbered_list(plan.text)
    if not questions:
        return draft.text, ["cove_no_questions"]
    batch = [
        ChatRequest.user(
            catalog.render("cove_answer", question=q),
            temperature=0.0,
            max_tokens=max_tokens,
        )
        for q in questions
    ]
    answers = gateway.complete_many(batch, purpose="cove_answer", log=log)
    qa = "\n".join(
        f"Question {i + 1}: {q}\nAnswer {i + 1}: {a.text}"
        for i, (q, a) in enumerate(zip(questions, answers))
    )
    final = gateway.complete(
        ChatRequest.user(
            catalog.render("cove_final", query=query.text, draft=draft.text, qa=qa),
            temperature=0.0,
            max_tokens=max_tokens,
        ),
        purpose="cove_final",
        log=log,
    )
    return final.text, []


def refine(
    query: Query,
    gateway: Gateway,
    catalog: PromptCatalog,
    temperature: float = 1.0,
    seed: int = 0,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> str:
    """One self-refinement pass: draft, then revise it for factual errors."""
    draft = gateway.complete(
        ChatRequest.user(
            catalog.render("cove_draft", query=query.text),
            temperature=temperature,
            max_tokens=max_tokens,
            seed_hint=derive_seed(seed, query.id, "refine-draft"),
        ),
        purpose="refine_draft",
        log=log,
    )
    revised = gateway.complete(
        ChatRequest.user(
            catalog.render("refine", query=query.text, draft=draft.text),
            temperature=0.0,
            max_tokens=max_tokens,
        ),
        purpose="refine_final",
        log=log,
    )
    return revised.text
