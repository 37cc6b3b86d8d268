"""Domain types and text utilities shared across the pipeline.

Every dataclass here is frozen: stages never mutate a value in place, they
build updated copies (``dataclasses.replace``), so instances are safe to
share across worker threads. All types serialize to plain JSON-compatible
dicts so run records can be persisted and reloaded without loss.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

# Sentinel for "use the full counterpart text, no context pruning".
ALL = "all"


class TaskKind(str, Enum):
    LONGFORM = "longform"
    SHORT_QA = "short_qa"
    MATH = "math"


class VerdictLabel(str, Enum):
    TRUE = "true"
    FALSE = "false"
    INCONCLUSIVE = "inconclusive"


class DecompositionMode(str, Enum):
    PROMPT = "prompt"
    SENTENCE = "sentence"


class ProductionMode(str, Enum):
    SELECT = "select"
    REGENERATE = "regenerate"


class ClusterPolicy(str, Enum):
    DYNAMIC_AVG = "dynamic_avg"
    FIXED = "fixed"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


@dataclass(frozen=True)
class Query:
    """A single user question plus the task family it belongs to."""

    id: str
    text: str
    task_kind: TaskKind

    def __post_init__(self) -> None:
        _require(bool(self.id), "query id must be non-empty")
        _require(bool(self.text), "query text must be non-empty")

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "task_kind": self.task_kind.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Query":
        return cls(id=d["id"], text=d["text"], task_kind=TaskKind(d["task_kind"]))


@dataclass(frozen=True)
class Verdict:
    """One counterpart's judgement of one fact, with the raw reply kept for audit."""

    label: VerdictLabel
    raw_text: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label.value, "raw_text": self.raw_text}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Verdict":
        return cls(label=VerdictLabel(d["label"]), raw_text=d.get("raw_text", ""))


@dataclass(frozen=True)
class Fact:
    """An atomic statement extracted from candidate ``candidate_index``.

    ``verdicts`` maps a counterpart candidate index to that candidate's
    judgement of this fact. ``score`` is filled in once all verdicts are
    collected; it stays None until then.
    """

    candidate_index: int
    fact_index: int
    text: str
    verdicts: Mapping[int, Verdict] = field(default_factory=dict)
    score: Optional[float] = None

    def __post_init__(self) -> None:
        _require(self.candidate_index >= 0, "candidate_index must be >= 0")
        _require(self.fact_index >= 0, "fact_index must be >= 0")
        _require(bool(self.text), "fact text must be non-empty")
        for k in self.verdicts:
            _require(
                k != self.candidate_index,
                "a fact cannot carry a verdict from its own candidate",
            )
        # Defensive copy so a shared input dict cannot mutate this fact later.
        object.__setattr__(self, "verdicts", dict(self.verdicts))

    def with_verdicts(self, verdicts: Mapping[int, Verdict]) -> "Fact":
        return replace(self, verdicts=dict(verdicts))

    def with_score(self, score: float) -> "Fact":
        return replace(self, score=score)

    def to_dict(self) -> dict:
        return {
            "candidate_index": self.candidate_index,
            "fact_index": self.fact_index,
            "text": self.text,
            "verdicts": {str(k): v.to_dict() for k, v in sorted(self.verdicts.items())},
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Fact":
        return cls(
            candidate_index=d["candidate_index"],
            fact_index=d["fact_index"],
            text=d["text"],
            verdicts={int(k): Verdict.from_dict(v) for k, v in d.get("verdicts", {}).items()},
            score=d.get("score"),
        )


@dataclass(frozen=True)
class Candidate:
    """One sampled response and, after decomposition, its atomic facts."""

    index: int
    text: str
    facts: tuple = ()

    def __post_init__(self) -> None:
        _require(self.index >= 0, "candidate index must be >= 0")
        object.__setattr__(self, "facts", tuple(self.facts))
        for f in self.facts:
            _require(
                f.candidate_index == self.index,
                "every fact must point back at its candidate",
            )

    def with_facts(self, facts: Sequence[Fact]) -> "Candidate":
        return replace(self, facts=tuple(facts))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text": self.text,
            "facts": [f.to_dict() for f in self.facts],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Candidate":
        return cls(
            index=d["index"],
            text=d["text"],
            facts=tuple(Fact.from_dict(f) for f in d.get("facts", [])),
        )


def default_verdict_weights() -> dict:
    return {
        VerdictLabel.TRUE: 1.0,
        VerdictLabel.INCONCLUSIVE: 0.5,
        VerdictLabel.FALSE: 0.0,
    }


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob the pipeline reads, in one validated bundle.

    ``context_k`` is either a positive int or the string ``"all"`` (no
    pruning). ``m_candidates`` is None for "use all candidates as verifiers
    and fact sources". ``fixed_clusters`` only applies when
    ``cluster_policy`` is FIXED.
    """

    n_candidates: int = 10
    context_k: Any = 3
    alpha: float = 0.8
    m_candidates: Optional[int] = None
    temperature: float = 1.0
    top_p: float = 0.95
    max_tokens: int = 1024
    seed: int = 0
    verdict_weights: Mapping[VerdictLabel, float] = field(
        default_factory=default_verdict_weights
    )
    decomposition_mode: DecompositionMode = DecompositionMode.PROMPT
    production_mode: ProductionMode = ProductionMode.REGENERATE
    cluster_policy: ClusterPolicy = ClusterPolicy.DYNAMIC_AVG
    fixed_clusters: Optional[int] = None
    bm25_k1: float = 1.5
    bm25_b: float = 0.75
    max_inflight: int = 8

    def __post_init__(self) -> None:
        _require(self.n_candidates >= 2, "n_candidates must be >= 2")
        if self.context_k != ALL:
            _require(
                isinstance(self.context_k, int) and self.context_k >= 1,
                "context_k must be a positive int or 'all'",
            )
        _require(0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]")
        if self.m_candidates is not None:
            _require(
                1 <= self.m_candidates <= self.n_candidates,
                "m_candidates must lie in [1, n_candidates]",
            )
        _require(self.temperature >= 0.0, "temperature must be >= 0")
        _require(0.0 < self.top_p <= 1.0, "top_p must lie in (0, 1]")
        _require(self.max_tokens >= 1, "max_tokens must be >= 1")
        _require(self.max_inflight >= 1, "max_inflight must be >= 1")
        _require(self.bm25_k1 > 0.0, "bm25_k1 must be > 0")
        _require(0.0 <= self.bm25_b <= 1.0, "bm25_b must lie in [0, 1]")
        weights = dict(self.verdict_weights)
        _require(
            set(weights) == {VerdictLabel.TRUE, VerdictLabel.FALSE, VerdictLabel.INCONCLUSIVE},
            "verdict_weights must cover exactly true/false/inconclusive",
        )
        _require(
            weights[VerdictLabel.FALSE]
            <= weights[VerdictLabel.INCONCLUSIVE]
            <= weights[VerdictLabel.TRUE],
            "verdict weights must satisfy false <= inconclusive <= true",
        )
        if self.cluster_policy is ClusterPolicy.FIXED:
            _require(
                self.fixed_clusters is not None and self.fixed_clusters >= 1,
                "fixed cluster policy needs fixed_clusters >= 1",
            )
        object.__setattr__(self, "verdict_weights", weights)

    def effective_m(self) -> int:
        return self.m_candidates if self.m_candidates is not None else self.n_candidates

    def to_dict(self) -> dict:
        return {
            "n_candidates": self.n_candidates,
            "context_k": self.context_k,
            "alpha": self.alpha,
            "m_candidates": self.m_candidates,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "verdict_weights": {k.value: v for k, v in self.verdict_weights.items()},
            "decomposition_mode": self.decomposition_mode.value,
            "production_mode": self.production_mode.value,
            "cluster_policy": self.cluster_policy.value,
            "fixed_clusters": self.fixed_clusters,
            "bm25_k1": self.bm25_k1,
            "bm25_b": self.bm25_b,
            "max_inflight": self.max_inflight,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        kwargs: dict = {}
        plain = (
            "n_candidates",
            "context_k",
            "alpha",
            "m_candidates",
            "temperature",
            "top_p",
            "max_tokens",
            "seed",
            "fixed_clusters",
            "bm25_k1",
            "bm25_b",
            "max_inflight",
        )
        for key in plain:
            if key in d:
                kwargs[key] = d[key]
        if "verdict_weights" in d:
            kwargs["verdict_weights"] = {
                VerdictLabel(k): float(v) for k, v in d["verdict_weights"].items()
            }
        if "decomposition_mode" in d:
            kwargs["decomposition_mode"] = DecompositionMode(d["decomposition_mode"])
        if "production_mode" in d:
            kwargs["production_mode"] = ProductionMode(d["production_mode"])
        if "cluster_policy" in d:
            kwargs["cluster_policy"] = ClusterPolicy(d["cluster_policy"])
        return cls(**kwargs)


@dataclass(frozen=True)
class CallRecord:
    """One backend call as seen by the run trace."""

    purpose: str
    cache_key: str
    cache_hit: bool
    request: Mapping[str, Any]
    reply: str
    latency_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "purpose": self.purpose,
            "cache_key": self.cache_key,
            "cache_hit": self.cache_hit,
            "request": dict(self.request),
            "reply": self.reply,
            "latency_s": self.latency_s,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CallRecord":
        return cls(
            purpose=d["purpose"],
            cache_key=d["cache_key"],
            cache_hit=d["cache_hit"],
            request=dict(d["request"]),
            reply=d["reply"],
            latency_s=d.get("latency_s", 0.0),
        )


@dataclass(frozen=True)
class RunRecord:
    """Everything needed to audit or recompute one query's run.

    ``selected_facts`` is the grounding set handed to regeneration (empty for
    other production paths). ``final_facts`` holds the decomposed final
    response, which downstream metrics reuse. ``gold`` carries the dataset's
    reference (entity name, alias list, or numeric string) so reports can be
    rebuilt from records alone.
    """

    run_id: str
    method: str
    query: Query
    config: PipelineConfig
    candidates: tuple = ()
    selected_facts: tuple = ()
    final_response: str = ""
    final_facts: tuple = ()
    gold: Any = None
    flags: tuple = ()
    calls: tuple = ()
    timings: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "selected_facts", tuple(self.selected_facts))
        object.__setattr__(self, "final_facts", tuple(self.final_facts))
        object.__setattr__(self, "flags", tuple(self.flags))
        object.__setattr__(self, "calls", tuple(self.calls))
        object.__setattr__(self, "timings", dict(self.timings))

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "method": self.method,
            "query": self.query.to_dict(),
            "config": self.config.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
            "selected_facts": [f.to_dict() for f in self.selected_facts],
            "final_response": self.final_response,
            "final_facts": list(self.final_facts),
            "gold": self.gold,
            "flags": list(self.flags),
            "calls": [c.to_dict() for c in self.calls],
            "timings": dict(self.timings),
        }

    def canonical_dict(self) -> dict:
        """Serialization with wall-clock noise removed, for determinism checks."""
        d = self.to_dict()
        d.pop("timings", None)
        for call in d["calls"]:
            call.pop("latency_s", None)
        return d

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            method=d["method"],
            query=Query.from_dict(d["query"]),
            config=PipelineConfig.from_dict(d["config"]),
            candidates=tuple(Candidate.from_dict(c) for c in d.get("candidates", [])),
            selected_facts=tuple(Fact.from_dict(f) for f in d.get("selected_facts", [])),
            final_response=d.get("final_response", ""),
            final_facts=tuple(d.get("final_facts", [])),
            gold=d.get("gold"),
            flags=tuple(d.get("flags", [])),
            calls=tuple(CallRecord.from_dict(c) for c in d.get("calls", [])),
            timings=d.get("timings", {}),
        )

    @classmethod
    def from_json_line(cls, line: str) -> "RunRecord":
        return cls.from_dict(json.loads(line))


# Maximal runs of Unicode alphanumerics; underscore is deliberately excluded.
_TOKEN_RE = re.compile(r"[^\W_]+")

_TERMINATOR_RE = re.compile(r"[.!?]+(?=\s)")

# Common abbreviations whose trailing dot should not end a sentence.
_ABBREVIATIONS = frozenset(
    {
        "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "no.",
        "u.s.", "u.k.", "u.n.", "e.g.", "i.e.", "etc.", "vs.", "inc.",
        "ltd.", "co.", "dept.", "fig.", "al.", "approx.",
    }
)

_INITIAL_RE = re.compile(r"^[A-Za-z]\.$")


def tokenize(text: str) -> list:
    """Lowercased maximal runs of Unicode letters and digits.

    Punctuation of any kind (including underscore) separates tokens, so
    "A--B" yields ["a", "b"]. Idempotent on its own space-joined output.
    """
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list:
    """Best-effort sentence split on ./!/? followed by whitespace.

    Terminators stay attached to their sentence. A small abbreviation
    allowlist plus single-letter initials ("J.") suppress false splits.
    This is not a full segmenter; it only needs to behave sensibly on
    model-generated prose.
    """
    segments = []
    start = 0
    for m in _TERMINATOR_RE.finditer(text):
        end = m.end()
        head = text[start:end]
        words = head.split()
        last_word = words[-1] if words else head
        if last_word.lower() in _ABBREVIATIONS or _INITIAL_RE.match(last_word):
            continue
        segment = head.strip()
        if segment:
            segments.append(segment)
        start = end
    tail = text[start:].strip()
    if tail:
        segments.append(tail)
    return segments
