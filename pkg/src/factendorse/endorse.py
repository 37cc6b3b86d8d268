"""Score each fact by how strongly the other candidates endorse it.

For a fact f from candidate i, every other candidate k acts as a verifier:
the fact is checked against candidate k's own content and the reply is
parsed into true / false / inconclusive. The endorsement score is the
weighted mean of those verdicts,

    g(f) = (1 / (N - 1)) * sum over k != i of w(verdict_k)

with weights w(true)=1, w(inconclusive)=0.5, w(false)=0 by default. To keep
verification prompts short, the counterpart's content is pruned to its K
facts most lexically similar to f under Okapi BM25.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .core import ALL, Candidate, Fact, PipelineConfig, Verdict, VerdictLabel, tokenize
from .gateway import CallLog, ChatRequest, Gateway
from .prompts import PromptCatalog


class EmptyCorpus(Exception):
    """BM25 has nothing to rank: the counterpart has no facts."""


class MissingVerdicts(Exception):
    """A fact is missing verdicts from one or more counterparts."""


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.5
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")


def bm25_scores(
    query_fact: Fact, corpus: Sequence[Fact], params: Bm25Params = Bm25Params()
) -> list:
    """Okapi BM25 score of each corpus fact against the query fact.

    idf(t) = ln((n - df(t) + 0.5) / (df(t) + 0.5) + 1), and the per-document
    score sums idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
    over the query's token list, so a token repeated in the query contributes
    once per occurrence.
    """
    if not corpus:
        raise EmptyCorpus("cannot score against an empty corpus")
    docs = [tokenize(f.text) for f in corpus]
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    df: Counter = Counter()
    for doc in docs:
        df.update(set(doc))
    idf = {t: math.log((n - c + 0.5) / (c + 0.5) + 1.0) for t, c in df.items()}
    query_tokens = tokenize(query_fact.text)
    scores = []
    for doc in docs:
        tf = Counter(doc)
        if avgdl > 0:
            norm = params.k1 * (1.0 - params.b + params.b * len(doc) / avgdl)
        else:
            norm = params.k1
        score = 0.0
        for t in query_tokens:
            freq = tf.get(t, 0)
            if freq:
                score += idf[t] * freq * (params.k1 + 1.0) / (freq + norm)
        scores.append(score)
    return scores


@dataclass(frozen=True)
class PrunedContext:
    """What a verifier candidate contributes as context for one fact check.

    ``kept_facts`` are in descending BM25 order (ties broken by fact index);
    ``rendered`` is the text actually placed in the prompt, which restores
    the candidate's original fact order for readability.
    """

    candidate_index: int
    kept_facts: tuple
    rendered: str


def prune_context(
    fact: Fact,
    other: Candidate,
    k,
    params: Bm25Params = Bm25Params(),
) -> PrunedContext:
    """Select the counterpart content used to verify ``fact``.

    With ``k == "all"`` the counterpart's full response text is used
    untouched. Otherwise its top-k facts by BM25 similarity to the fact are
    kept.
    """
    if other.index == fact.candidate_index:
        raise ValueError("a candidate cannot verify its own fact")
    if not other.facts:
        raise EmptyCorpus(f"candidate {other.index} has no facts to prune")
    if k == ALL:
        return PrunedContext(other.index, tuple(other.facts), other.text)
    if not isinstance(k, int) or k < 1:
        raise ValueError("k must be a positive int or 'all'")
    scores = bm25_scores(fact, other.facts, params)
    order = sorted(
        range(len(other.facts)),
        key=lambda i: (-scores[i], other.facts[i].fact_index),
    )
    kept = tuple(other.facts[i] for i in order[:k])
    in_reading_order = sorted(kept, key=lambda f: f.fact_index)
    rendered = " ".join(f.text for f in in_reading_order)
    return PrunedContext(other.index, kept, rendered)


def build_verify_request(
    fact: Fact, context: PrunedContext, catalog: PromptCatalog, max_tokens: int = 1024
) -> ChatRequest:
    prompt = catalog.render("verify", context=context.rendered, fact=fact.text)
    return ChatRequest.user(prompt, temperature=0.0, max_tokens=max_tokens)


_LABEL_RES = (
    (VerdictLabel.TRUE, re.compile(r"\btrue\b", re.IGNORECASE)),
    (VerdictLabel.FALSE, re.compile(r"\bfalse\b", re.IGNORECASE)),
    (VerdictLabel.INCONCLUSIVE, re.compile(r"\binconclusive\b", re.IGNORECASE)),
)


def parse_verdict(raw_text: str) -> Verdict:
    """Earliest label keyword wins; no keyword at all means inconclusive."""
    best: Optional[tuple] = None
    for label, pattern in _LABEL_RES:
        m = pattern.search(raw_text)
        if m and (best is None or m.start() < best[0]):
            best = (m.start(), label)
    label = best[1] if best else VerdictLabel.INCONCLUSIVE
    return Verdict(label=label, raw_text=raw_text)


def verify(
    fact: Fact,
    context: PrunedContext,
    gateway: Gateway,
    catalog: PromptCatalog,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> Verdict:
    """One fact against one counterpart's pruned context (temperature 0)."""
    request = build_verify_request(fact, context, catalog, max_tokens)
    response = gateway.complete(request, purpose="verify", log=log)
    return parse_verdict(response.text)


def endorsement_score(
    fact: Fact, weights: Mapping[VerdictLabel, float], n_candidates: int
) -> float:
    """Mean verdict weight over the fact's N-1 counterpart verdicts."""
    expected = n_candidates - 1
    if len(fact.verdicts) != expected:
        raise MissingVerdicts(
            f"fact ({fact.candidate_index},{fact.fact_index}) has "
            f"{len(fact.verdicts)} verdicts, expected {expected}"
        )
    total = 0.0
    for k in sorted(fact.verdicts):
        total += weights[fact.verdicts[k].label]
    return total / expected


def endorse_all(
    candidates: Sequence[Candidate],
    config: PipelineConfig,
    gateway: Gateway,
    catalog: PromptCatalog,
    log: Optional[CallLog] = None,
) -> tuple:
    """Collect all cross-candidate verdicts and score every fact.

    Returns (updated candidates, flags). Verification calls for the whole
    fact-by-counterpart grid run concurrently through the gateway. A
    counterpart with no facts of its own cannot verify anything, so it
    contributes an inconclusive verdict without a backend call, and the
    pair is flagged.
    """
    params = Bm25Params(k1=config.bm25_k1, b=config.bm25_b)
    flags: list = []
    batch: list = []
    slots: list = []
    preset: dict = {}

    for ci, candidate in enumerate(candidates):
        for fj, fact in enumerate(candidate.facts):
            for other in candidates:
                if other.index == candidate.index:
                    continue
                try:
                    context = prune_context(fact, other, config.context_k, params)
                except EmptyCorpus:
                    preset[(ci, fj, other.index)] = Verdict(
                        VerdictLabel.INCONCLUSIVE, raw_text=""
                    )
                    flags.append(
                        f"empty_counterpart:{candidate.index}:{fact.fact_index}:{other.index}"
                    )
                    continue
                batch.append(
                    build_verify_request(fact, context, catalog, config.max_tokens)
                )
                slots.append((ci, fj, other.index))

    responses = gateway.complete_many(batch, purpose="verify", log=log)

    verdicts: dict = {key: value for key, value in preset.items()}
    for (ci, fj, k), response in zip(slots, responses):
        verdicts[(ci, fj, k)] = parse_verdict(response.text)

    updated = []
    for ci, candidate in enumerate(candidates):
        new_facts = []
        for fj, fact in enumerate(candidate.facts):
            fact_verdicts = {
                k: verdicts[(ci, fj, k)]
                for k in (c.index for c in candidates)
                if k != candidate.index
            }
            scored = fact.with_verdicts(fact_verdicts)
            scored = scored.with_score(
                endorsement_score(scored, config.verdict_weights, len(candidates))
            )
            new_facts.append(scored)
        updated.append(candidate.with_facts(new_facts))
    return updated, flags
