"""Final-response production: selection, filtering, k-means dedup, regeneration."""

from __future__ import annotations

import itertools
import math
import random

import numpy as np
import pytest

from factendorse.core import Candidate, ClusterPolicy, Fact, Query, TaskKind
from factendorse.gateway import Gateway, ScriptRule, ScriptedBackend
from factendorse.produce import (
    FactSet,
    NoCandidates,
    _vectorize,
    cluster_and_pick,
    cluster_count,
    filter_facts,
    regenerate,
    render_fact_list,
    select_response,
)
from factendorse.prompts import load_catalog


def _fact(text: str, ci: int = 0, fj: int = 0, score=None) -> Fact:
    return Fact(candidate_index=ci, fact_index=fj, text=text, score=score)


def _facts(texts) -> list:
    return [_fact(t, ci=0, fj=j) for j, t in enumerate(texts)]


# ---------------------------------------------------------------------------
# Exhaustive clustering oracle, written before the implementation: enumerate
# every partition of the points into exactly k non-empty parts and take the
# smallest within-cluster sum of squares about each part's mean.


def partitions_into(indices: list, k: int):
    n = len(indices)

    def rec(i: int, parts: list):
        if i == n:
            if len(parts) == k:
                yield [list(p) for p in parts]
            return
        for p in parts:
            p.append(indices[i])
            yield from rec(i + 1, parts)
            p.pop()
        if len(parts) < k:
            parts.append([indices[i]])
            yield from rec(i + 1, parts)
            parts.pop()

    yield from rec(0, [])


def partition_wcss(points: np.ndarray, parts: list) -> float:
    total = 0.0
    for part in parts:
        block = points[part]
        mean = block.mean(axis=0)
        total += float(((block - mean) ** 2).sum())
    return total


def oracle_best_wcss(points: np.ndarray, k: int) -> float:
    k = min(k, len(points))
    return min(
        partition_wcss(points, parts)
        for parts in partitions_into(list(range(len(points))), k)
    )


def test_partition_oracle_sanity():
    # Three collinear points; two clusters must isolate the far one.
    pts = np.array([[0.0], [0.1], [5.0]])
    assert oracle_best_wcss(pts, 2) == pytest.approx(0.005)
    assert oracle_best_wcss(pts, 3) == 0.0
    assert oracle_best_wcss(pts, 1) == pytest.approx(
        float(((pts - pts.mean()) ** 2).sum())
    )


def test_vectorize_hand_example():
    matrix = _vectorize(_facts(["a b", "b a", "a"]))
    root_half = 1 / math.sqrt(2)
    assert matrix.shape == (3, 2)
    assert matrix[0] == pytest.approx([root_half, root_half])
    assert matrix[1] == pytest.approx([root_half, root_half])
    assert matrix[2] == pytest.approx([1.0, 0.0])
    # Every non-empty row is unit length.
    assert np.linalg.norm(matrix, axis=1) == pytest.approx([1.0, 1.0, 1.0])


def _check_cluster_run(facts: list, c: int, seed: int = 0) -> None:
    points = _vectorize(facts)
    result = cluster_and_pick(facts, c, seed=seed)
    key = lambda f: (f.candidate_index, f.fact_index)

    # The maps cover every input fact.
    assert set(result.cluster_assignments) == {key(f) for f in facts}
    assert set(result.centroid_distances) == {key(f) for f in facts}

    # Achieved WCSS matches the exhaustive optimum.
    achieved = sum(d * d for d in result.centroid_distances.values())
    best = oracle_best_wcss(points, c)
    assert achieved == pytest.approx(best, abs=1e-9), (
        f"suboptimal clustering: got {achieved}, oracle {best}"
    )

    # One representative per non-empty cluster, each minimizing the distance
    # to its centroid, ties broken by (candidate_index, fact_index).
    effective_c = min(c, len(facts))
    assert len(result.facts) == effective_c
    by_fact = {key(f): f for f in facts}
    for rep in result.facts:
        cid = result.cluster_assignments[key(rep)]
        members = [
            k for k, assigned in result.cluster_assignments.items() if assigned == cid
        ]
        rep_rank = (result.centroid_distances[key(rep)], *key(rep))
        for member in members:
            member_rank = (result.centroid_distances[member], *member)
            assert rep_rank <= (member_rank[0] + 1e-12, *member_rank[1:]), (
                f"cluster {cid}: {key(rep)} is not the closest member"
            )
        assert by_fact[key(rep)] is rep


def test_kmeans_structured_battery_matches_oracle():
    alphabet = ["a", "b", "a b", "c"]
    checked = 0
    for n in range(2, 7):
        for combo in itertools.combinations_with_replacement(alphabet, n):
            for c in (1, 2, 3):
                if c > n:
                    continue
                _check_cluster_run(_facts(list(combo)), c)
                checked += 1
    assert checked > 500


def test_kmeans_random_battery_matches_oracle():
    rng = random.Random(17)
    vocab = ["red", "blue", "green", "tall", "short"]
    for trial in range(40):
        n = rng.randint(2, 6)
        texts = [
            " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 4)))
            for _ in range(n)
        ]
        c = rng.randint(1, 4)
        _check_cluster_run(_facts(texts), c, seed=trial)


def test_kmeans_is_pure_function_of_inputs():
    facts = _facts(["x y", "x y", "z", "w z", "x"])
    first = cluster_and_pick(facts, 2, seed=3)
    second = cluster_and_pick(facts, 2, seed=3)
    assert first == second
    # A different seed may start elsewhere but must reach the same optimum.
    third = cluster_and_pick(facts, 2, seed=99)
    wcss = lambda r: sum(d * d for d in r.centroid_distances.values())
    assert wcss(first) == pytest.approx(wcss(third), abs=1e-9)


def test_kmeans_identical_facts_collapse():
    facts = [
        _fact("same text", ci=0, fj=0),
        _fact("same text", ci=0, fj=1),
        _fact("same text", ci=1, fj=0),
        _fact("same text", ci=1, fj=1),
    ]
    result = cluster_and_pick(facts, 2, seed=0)
    assert len(result.facts) == 2
    assert all(f.text == "same text" for f in result.facts)
    assert all(d == pytest.approx(0.0) for d in result.centroid_distances.values())


def test_kmeans_near_duplicates_land_together():
    facts = _facts(
        [
            "the capital of France is Paris",
            "Paris is the capital of France",
            "bananas are yellow fruit",
            "a banana is a yellow fruit",
        ]
    )
    result = cluster_and_pick(facts, 2, seed=0)
    assign = result.cluster_assignments
    key = lambda j: (0, j)
    assert assign[key(0)] == assign[key(1)]
    assert assign[key(2)] == assign[key(3)]
    assert assign[key(0)] != assign[key(2)]


def test_kmeans_input_validation():
    with pytest.raises(ValueError):
        cluster_and_pick([], 2, seed=0)
    with pytest.raises(ValueError):
        cluster_and_pick(_facts(["a"]), 0, seed=0)
    # c greater than n collapses to n clusters.
    result = cluster_and_pick(_facts(["a", "b"]), 5, seed=0)
    assert len(result.facts) == 2


def test_select_response_hand_case():
    candidates = [
        Candidate(index=0, text="low", facts=[_fact("f", 0, 0, score=0.25)]),
        Candidate(
            index=1,
            text="high",
            facts=[_fact("g", 1, 0, score=1.0), _fact("h", 1, 1, score=0.5)],
        ),
        Candidate(index=2, text="mid", facts=[_fact("i", 2, 0, score=0.7)]),
    ]
    assert select_response(candidates).index == 1


def test_select_response_tie_keeps_lowest_index():
    candidates = [
        Candidate(index=0, text="a", facts=[_fact("f", 0, 0, score=0.5)]),
        Candidate(index=1, text="b", facts=[_fact("g", 1, 0, score=0.5)]),
    ]
    assert select_response(candidates).index == 0


def test_select_response_factless_candidate_scores_zero():
    candidates = [
        Candidate(index=0, text="nothing extracted"),
        Candidate(index=1, text="bad", facts=[_fact("f", 1, 0, score=-0.5)]),
    ]
    # All-negative means lose to the factless candidate's zero.
    assert select_response(candidates).index == 0


def test_select_response_errors():
    with pytest.raises(NoCandidates):
        select_response([])
    with pytest.raises(ValueError):
        select_response([Candidate(index=0, text="t", facts=[_fact("f", 0, 0)])])


def test_filter_facts_hand_case():
    facts = [
        _fact("keep hi", ci=1, fj=1, score=0.9),
        _fact("drop low", ci=0, fj=0, score=0.3),
        _fact("keep edge", ci=0, fj=1, score=0.8),
        _fact("beyond m", ci=2, fj=0, score=1.0),
        _fact("keep first", ci=0, fj=0, score=0.8),
    ]
    kept = filter_facts(facts, alpha=0.8, m=2)
    assert [(f.candidate_index, f.fact_index) for f in kept] == [(0, 0), (0, 1), (1, 1)]
    assert all(f.score >= 0.8 for f in kept)


def test_filter_facts_alpha_monotone():
    rng = random.Random(41)
    for _ in range(200):
        facts = [
            _fact(f"fact {j}", ci=rng.randint(0, 3), fj=j, score=rng.random())
            for j in range(rng.randint(0, 30))
        ]
        a1 = rng.random()
        a2 = rng.random()
        if a2 < a1:
            a1, a2 = a2, a1
        m = rng.randint(1, 4)
        keys = lambda kept: {(f.candidate_index, f.fact_index) for f in kept}
        low, high = filter_facts(facts, a1, m), filter_facts(facts, a2, m)
        assert keys(high) <= keys(low)
        assert len(high) <= len(low)


def test_cluster_count_examples():
    def with_counts(counts):
        return [
            Candidate(index=i, text="t", facts=[
                _fact(f"f{i}-{j}", ci=i, fj=j) for j in range(n)
            ])
            for i, n in enumerate(counts)
        ]

    assert cluster_count(with_counts([12, 14, 16]), ClusterPolicy.DYNAMIC_AVG) == 14
    # Mean 3.5 rounds half-up to 4.
    assert cluster_count(with_counts([3, 4]), ClusterPolicy.DYNAMIC_AVG) == 4
    # Floor at one even when candidates have no facts.
    assert cluster_count(with_counts([0, 0]), ClusterPolicy.DYNAMIC_AVG) == 1
    # Cap at the surviving fact count, for both policies.
    assert cluster_count(with_counts([12, 14, 16]), ClusterPolicy.DYNAMIC_AVG, surviving=5) == 5
    assert cluster_count([], ClusterPolicy.FIXED, fixed_clusters=8, surviving=3) == 3
    assert cluster_count([], ClusterPolicy.FIXED, fixed_clusters=8) == 8
    with pytest.raises(ValueError):
        cluster_count([], ClusterPolicy.FIXED)
    with pytest.raises(ValueError):
        cluster_count([], ClusterPolicy.DYNAMIC_AVG)


def test_render_fact_list():
    facts = _facts(["First fact.", "Second fact."])
    assert render_fact_list(facts) == "1. First fact.\n2. Second fact."
    assert render_fact_list([]) == ""


def _query() -> Query:
    return Query(id="bio-0001", text="Tell me a bio of Pat", task_kind=TaskKind.LONGFORM)


def test_regenerate_happy_path():
    facts = _facts(["Pat was born in 1901.", "Pat retired in 1956."])
    fact_set = FactSet(
        facts=tuple(facts),
        cluster_assignments={(0, 0): 0, (0, 1): 1},
        centroid_distances={(0, 0): 0.0, (0, 1): 0.0},
    )
    backend = ScriptedBackend(
        [ScriptRule(reply="A grounded bio.", prompt_contains=("Knowledge from other sources:",))]
    )
    log = []
    text, flags = regenerate(
        _query(), fact_set, [], Gateway(backend), load_catalog(), log=log
    )
    assert text == "A grounded bio."
    assert flags == []
    assert len(log) == 1
    assert log[0].purpose == "regenerate"
    prompt = log[0].request["messages"][0]["content"]
    assert "1. Pat was born in 1901.\n2. Pat retired in 1956." in prompt
    assert prompt.endswith("answer the question: Tell me a bio of Pat")
    assert log[0].request["temperature"] == 0.0


def test_regenerate_empty_set_falls_back_to_selection():
    candidates = [
        Candidate(index=0, text="best", facts=[_fact("f", 0, 0, score=0.9)]),
        Candidate(index=1, text="worse", facts=[_fact("g", 1, 0, score=0.1)]),
    ]
    backend = ScriptedBackend([])  # any call would be a script miss
    text, flags = regenerate(
        _query(), FactSet.empty(), candidates, Gateway(backend), load_catalog()
    )
    assert text == "best"
    assert flags == ["regenerate_fallback_select"]
