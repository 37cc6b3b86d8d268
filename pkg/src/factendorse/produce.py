"""Turn scored candidates into a final response.

Two production paths. Selection returns the candidate whose facts have the
highest mean endorsement score. Regeneration filters facts by score,
deduplicates them with a small k-means over bag-of-words vectors, and asks
the backend to answer again grounded on the surviving facts.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Candidate, ClusterPolicy, Fact, Query, tokenize
from .gateway import CallLog, ChatRequest, Gateway
from .prompts import PromptCatalog


class NoCandidates(Exception):
    """Selection was asked to choose among zero candidates."""


_KMEANS_MAX_ITERS = 100
_KMEANS_RESTARTS = 10
# Up to this many points, minimize the k-means objective exactly by
# enumerating partitions (Bell(8) = 4140, cheap); beyond it, Lloyd restarts.
_EXACT_MAX_POINTS = 8


def select_response(candidates: Sequence[Candidate]) -> Candidate:
    """Candidate with the highest mean fact score; ties keep the lowest index.

    A candidate with no facts gets mean 0, so it can still win when every
    other candidate scored worse overall. Scores must already be filled in.
    """
    if not candidates:
        raise NoCandidates("nothing to select from")
    best = None
    best_mean = -math.inf
    for candidate in candidates:
        if candidate.facts:
            for fact in candidate.facts:
                if fact.score is None:
                    raise ValueError(
                        f"candidate {candidate.index} has an unscored fact"
                    )
            mean = sum(f.score for f in candidate.facts) / len(candidate.facts)
        else:
            mean = 0.0
        if mean > best_mean:
            best = candidate
            best_mean = mean
    return best


def filter_facts(facts: Sequence[Fact], alpha: float, m: int) -> list:
    """Keep facts with score >= alpha drawn from the first m candidates.

    Output order is (candidate index, fact index). Raising alpha can only
    shrink the result.
    """
    kept = [
        f
        for f in facts
        if f.candidate_index < m and f.score is not None and f.score >= alpha
    ]
    return sorted(kept, key=lambda f: (f.candidate_index, f.fact_index))


def cluster_count(
    candidates: Sequence[Candidate],
    policy: ClusterPolicy,
    fixed_clusters: Optional[int] = None,
    surviving: Optional[int] = None,
) -> int:
    """How many clusters to deduplicate into.

    The dynamic policy uses the average fact count across candidates,
    rounded half-up, so the grounding set stays about the size of one
    typical response. The count is floored at 1 and capped at the number
    of surviving facts when that is known.
    """
    if policy is ClusterPolicy.FIXED:
        if fixed_clusters is None or fixed_clusters < 1:
            raise ValueError("fixed policy needs fixed_clusters >= 1")
        count = fixed_clusters
    else:
        if not candidates:
            raise ValueError("dynamic cluster policy needs candidates")
        mean = sum(len(c.facts) for c in candidates) / len(candidates)
        count = max(1, math.floor(mean + 0.5))
    if surviving is not None:
        count = min(count, surviving)
    return max(1, count)


@dataclass(frozen=True)
class FactSet:
    """Deduplicated grounding facts plus the clustering that produced them.

    ``facts`` holds one representative per non-empty cluster, ordered by
    cluster id. The assignment and distance maps are keyed by
    (candidate_index, fact_index) and cover every input fact.
    """

    facts: tuple
    cluster_assignments: dict
    centroid_distances: dict

    @classmethod
    def empty(cls) -> "FactSet":
        return cls(facts=(), cluster_assignments={}, centroid_distances={})


def _vectorize(facts: Sequence[Fact]) -> np.ndarray:
    """L2-normalized bag-of-words count vectors, one row per fact."""
    token_lists = [tokenize(f.text) for f in facts]
    vocab = sorted({t for tokens in token_lists for t in tokens})
    index = {t: i for i, t in enumerate(vocab)}
    matrix = np.zeros((len(facts), max(len(vocab), 1)), dtype=float)
    for row, tokens in enumerate(token_lists):
        for t in tokens:
            matrix[row, index[t]] += 1.0
    norms = np.linalg.norm(matrix, axis=1)
    nonzero = norms > 0
    matrix[nonzero] /= norms[nonzero, None]
    return matrix


def _farthest_first(points: np.ndarray, c: int, first: int) -> list:
    centers = [first]
    d2 = ((points - points[first]) ** 2).sum(axis=1)
    while len(centers) < c:
        nxt = int(np.argmax(d2))
        centers.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return centers


def _exact_partition(points: np.ndarray, c: int) -> tuple:
    """Globally optimal k-means assignment for small inputs.

    Enumerates every partition of the points into exactly c non-empty
    clusters (as restricted growth strings, so the enumeration order and
    therefore tie-breaking are deterministic) and keeps the first one with
    the lowest within-cluster sum of squares. Returns (assign, d2, wcss)
    shaped like ``_lloyd``.
    """
    n = points.shape[0]
    assign = np.zeros(n, dtype=int)
    best: Optional[tuple] = None

    def rec(i: int, used: int) -> None:
        nonlocal best
        if n - i < c - used:
            return
        if i == n:
            if used != c:
                return
            wcss = 0.0
            for cid in range(c):
                block = points[assign == cid]
                wcss += float(((block - block.mean(axis=0)) ** 2).sum())
            if best is None or wcss < best[0] - 1e-12:
                best = (wcss, assign.copy())
            return
        for cid in range(min(used + 1, c)):
            assign[i] = cid
            rec(i + 1, used + (1 if cid == used else 0))

    rec(0, 0)
    wcss, final = best
    centroids = np.stack([points[final == cid].mean(axis=0) for cid in range(c)])
    own = ((points - centroids[final]) ** 2).sum(axis=1)
    return final, own, float(own.sum())


def _lloyd(points: np.ndarray, center_indices: list) -> tuple:
    """Lloyd's iterations from the given seeds; returns (assign, d2, wcss).

    Ties assign to the lowest cluster id. An empty cluster is re-seeded at
    the point farthest from its current centroid (never stealing the sole
    member of another cluster), which keeps every cluster non-empty.
    """
    n = points.shape[0]
    c = len(center_indices)
    centroids = points[center_indices].copy()
    previous = None
    assign = np.zeros(n, dtype=int)
    for _ in range(_KMEANS_MAX_ITERS):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for cid in range(c):
            if np.any(assign == cid):
                continue
            counts = np.bincount(assign, minlength=c)
            own = d2[np.arange(n), assign]
            movable = counts[assign] > 1
            candidates_d2 = np.where(movable, own, -1.0)
            assign[int(np.argmax(candidates_d2))] = cid
        if previous is not None and np.array_equal(assign, previous):
            break
        previous = assign.copy()
        for cid in range(c):
            centroids[cid] = points[assign == cid].mean(axis=0)
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    own = d2[np.arange(n), assign]
    return assign, own, float(own.sum())


def cluster_and_pick(facts: Sequence[Fact], c: int, seed: int) -> FactSet:
    """K-means deduplication: one representative fact per cluster.

    Small inputs (at most ``_EXACT_MAX_POINTS`` facts) are clustered by
    exhaustive search for the true k-means optimum. Larger inputs run
    Lloyd's algorithm from several farthest-first seedings (the order of
    trial starting points comes from ``seed``) and keep the clustering with
    the lowest within-cluster sum of squares, so near-duplicate facts
    reliably land in one cluster. Within a cluster the representative is
    the fact closest to the centroid, ties broken by (candidate index,
    fact index). The result is a pure function of (facts, c, seed).
    """
    if not facts:
        raise ValueError("cannot cluster zero facts")
    if c < 1:
        raise ValueError("cluster count must be >= 1")
    c = min(c, len(facts))
    points = _vectorize(facts)
    n = len(facts)

    if n <= _EXACT_MAX_POINTS:
        assign, own_d2, _ = _exact_partition(points, c)
    else:
        rng = random.Random(seed)
        firsts = list(range(n))
        rng.shuffle(firsts)
        firsts = firsts[:_KMEANS_RESTARTS]

        best = None
        for first in firsts:
            centers = _farthest_first(points, c, first)
            assign, own_d2, wcss = _lloyd(points, centers)
            if best is None or wcss < best[0]:
                best = (wcss, assign, own_d2)
        _, assign, own_d2 = best

    keyed = lambda f: (f.candidate_index, f.fact_index)
    assignments = {keyed(f): int(assign[i]) for i, f in enumerate(facts)}
    distances = {keyed(f): float(math.sqrt(own_d2[i])) for i, f in enumerate(facts)}

    picked = []
    for cid in range(c):
        members = [i for i in range(n) if assign[i] == cid]
        if not members:
            continue
        best_i = min(
            members,
            key=lambda i: (own_d2[i], facts[i].candidate_index, facts[i].fact_index),
        )
        picked.append(facts[best_i])
    return FactSet(
        facts=tuple(picked),
        cluster_assignments=assignments,
        centroid_distances=distances,
    )


def render_fact_list(facts: Sequence[Fact]) -> str:
    return "\n".join(f"{i + 1}. {f.text}" for i, f in enumerate(facts))


def regenerate(
    query: Query,
    fact_set: FactSet,
    candidates: Sequence[Candidate],
    gateway: Gateway,
    catalog: PromptCatalog,
    log: Optional[CallLog] = None,
    max_tokens: int = 1024,
) -> tuple:
    """Answer the query again, grounded on the deduplicated facts.

    The grounding facts go into the prompt as a numbered list. When no fact
    survived filtering there is nothing to ground on, so this falls back to
    selection among the original candidates and flags it. Returns
    (final text, flags).
    """
    if not fact_set.facts:
        chosen = select_response(candidates)
        return chosen.text, ["regenerate_fallback_select"]
    prompt = catalog.render(
        "regenerate", facts=render_fact_list(fact_set.facts), query=query.text
    )
    request = ChatRequest.user(prompt, temperature=0.0, max_tokens=max_tokens)
    response = gateway.complete(request, purpose="regenerate", log=log)
    return response.text, []
