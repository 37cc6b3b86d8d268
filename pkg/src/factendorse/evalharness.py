"""Datasets, metrics, and reports.

Three dataset shapes: biography-style entity lists (long-form), question
and alias-list JSON (short QA), and JSONL math problems whose gold answer
sits after a "#### " marker. Metrics cover fact accuracy under a judge,
fact counts, answer recall, and exact match, plus a score-vs-truth
correlation report used to sanity-check endorsement scores.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .baselines import extract_final_answer, normalize_number
from .core import Query, TaskKind


class ParseError(Exception):
    """A dataset file did not match its documented shape."""


class JudgeUnavailable(Exception):
    """Fact accuracy was requested but no judge is configured."""


class DegenerateInput(Exception):
    """Correlation is undefined for this input (fewer than two distinct scores)."""


@dataclass(frozen=True)
class Example:
    """One evaluation item: the query to ask plus its gold reference.

    ``gold`` is task-shaped: the entity name for long-form biographies, the
    alias list for short QA, the normalized numeric string for math.
    """

    id: str
    query_text: str
    task_kind: TaskKind
    gold: object

    def to_query(self) -> Query:
        return Query(id=self.id, text=self.query_text, task_kind=self.task_kind)


def load_dataset(path: str, task_kind: TaskKind) -> list:
    if task_kind is TaskKind.LONGFORM:
        return _load_longform(path)
    if task_kind is TaskKind.SHORT_QA:
        return _load_short_qa(path)
    return _load_math(path)


def _load_longform(path: str) -> list:
    """One entity per line; the query asks for that entity's biography."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            entity = line.strip()
            if not entity:
                continue
            examples.append(
                Example(
                    id=f"bio-{line_no:04d}",
                    query_text=f"Tell me a bio of {entity}",
                    task_kind=TaskKind.LONGFORM,
                    gold=entity,
                )
            )
    if not examples:
        raise ParseError(f"{path}: no entities found")
    return examples


def _load_short_qa(path: str) -> list:
    """JSON array of question/alias items, or an object wrapping it in "Data".

    Accepts both a plain {"question", "aliases"} shape and the TriviaQA
    export shape ({"Question", "Answer": {"Aliases": [...]}}).
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(payload, Mapping) and "Data" in payload:
        payload = payload["Data"]
    if not isinstance(payload, list):
        raise ParseError(f"{path}: expected a list of question items")
    examples = []
    for pos, item in enumerate(payload, start=1):
        if not isinstance(item, Mapping):
            raise ParseError(f"{path}: item {pos} is not an object")
        question = item.get("question") or item.get("Question")
        if not question:
            raise ParseError(f"{path}: item {pos} has no question")
        aliases = item.get("aliases")
        if aliases is None:
            answer = item.get("Answer") or {}
            aliases = answer.get("Aliases") or answer.get("NormalizedAliases")
        if aliases is None and "answer" in item and isinstance(item["answer"], str):
            aliases = [item["answer"]]
        if not aliases:
            raise ParseError(f"{path}: item {pos} has no answer aliases")
        examples.append(
            Example(
                id=f"tqa-{pos:04d}",
                query_text=question,
                task_kind=TaskKind.SHORT_QA,
                gold=[str(a) for a in aliases],
            )
        )
    if not examples:
        raise ParseError(f"{path}: no questions found")
    return examples


_GOLD_MARKER = "####"


def _load_math(path: str) -> list:
    """JSONL of {"question", "answer"} where the answer ends "#### <number>"."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                item = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {line_no}: invalid JSON ({exc})") from exc
            question = item.get("question")
            answer = item.get("answer", "")
            if not question:
                raise ParseError(f"{path}: line {line_no}: missing question")
            if _GOLD_MARKER not in answer:
                raise ParseError(
                    f"{path}: line {line_no}: no '{_GOLD_MARKER}' gold marker"
                )
            gold = answer.rsplit(_GOLD_MARKER, 1)[1].strip()
            if not gold:
                raise ParseError(f"{path}: line {line_no}: empty gold answer")
            examples.append(
                Example(
                    id=f"gsm-{line_no:04d}",
                    query_text=question,
                    task_kind=TaskKind.MATH,
                    gold=normalize_number(gold),
                )
            )
    if not examples:
        raise ParseError(f"{path}: no problems found")
    return examples


def sample_examples(examples: Sequence[Example], k: int, seed: int) -> list:
    """Deterministic subset of k examples, original order preserved."""
    if k >= len(examples):
        return list(examples)
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(examples)), k))
    return [examples[i] for i in chosen]


def _normalize_span(text: str) -> str:
    return " ".join(text.lower().split())


def answer_recall(response: str, gold_aliases: Sequence[str]) -> bool:
    """True when any gold alias appears in the response.

    Matching is case-insensitive with whitespace runs collapsed, so line
    wrapping inside the response does not hide a hit.
    """
    if not gold_aliases:
        raise ValueError("answer_recall needs at least one gold alias")
    haystack = _normalize_span(response)
    for alias in gold_aliases:
        needle = _normalize_span(alias)
        if needle and needle in haystack:
            return True
    return False


def fact_count(response: str, decomposer: Callable[[str], Sequence[str]]) -> int:
    """Number of atomic facts in a response under the given decomposer."""
    if not response.strip():
        return 0
    return len(decomposer(response))


@dataclass(frozen=True)
class JudgeVerdict:
    fact: str
    supported: bool
    judge: str


class OracleJudge:
    """Judges facts against a known reference bank.

    A fact is supported when, after normalization, it equals a reference
    fact or one contains the other. This is only as good as the bank, which
    is the point: tests and offline evaluation control it exactly.
    """

    name = "oracle"

    def __init__(self, reference_facts: Sequence[str]):
        self._references = [_normalize_span(f) for f in reference_facts if f.strip()]

    def supports(self, fact: str) -> bool:
        probe = _normalize_span(fact)
        if not probe:
            return False
        for ref in self._references:
            if probe == ref or probe in ref or ref in probe:
                return True
        return False

    def verdicts(self, facts: Sequence[str]) -> list:
        return [
            JudgeVerdict(fact=f, supported=self.supports(f), judge=self.name)
            for f in facts
        ]


def judge_facts(facts: Sequence[str], judge: Optional[OracleJudge]) -> Optional[float]:
    """Fraction of facts the judge supports; None when there are no facts."""
    if judge is None:
        raise JudgeUnavailable("no judge configured for fact accuracy")
    if not facts:
        return None
    verdicts = judge.verdicts(facts)
    return sum(1 for v in verdicts if v.supported) / len(verdicts)


def exact_match_accuracy(responses: Sequence[str], golds: Sequence[str]) -> float:
    """Share of responses whose extracted final number matches the gold."""
    if len(responses) != len(golds):
        raise ValueError("responses and golds must align")
    if not responses:
        raise ValueError("nothing to score")
    hits = 0
    for response, gold in zip(responses, golds):
        extraction = extract_final_answer(response, TaskKind.MATH)
        if extraction.answer is not None and extraction.answer == normalize_number(gold):
            hits += 1
    return hits / len(responses)


@dataclass(frozen=True)
class BinStat:
    bin_index: int
    count: int
    mean_score: float
    mean_truth: float


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    bins: tuple

    def to_dict(self) -> dict:
        return {
            "pearson": self.pearson,
            "bins": [
                {
                    "bin_index": b.bin_index,
                    "count": b.count,
                    "mean_score": b.mean_score,
                    "mean_truth": b.mean_truth,
                }
                for b in self.bins
            ],
        }


def correlation_report(pairs: Sequence[tuple]) -> CorrelationReport:
    """Pearson correlation and decile curve for (score, is_true) pairs.

    Scores are ranked into up to ten equal-count bins; each bin reports its
    mean score and the fraction of true facts in it. Fewer than two pairs,
    or all scores identical, is degenerate and raises. All truths identical
    makes Pearson undefined; it is reported as 0.0.
    """
    if len(pairs) < 2:
        raise DegenerateInput("need at least two (score, truth) pairs")
    scores = np.array([float(s) for s, _ in pairs])
    truths = np.array([1.0 if t else 0.0 for _, t in pairs])
    if np.all(scores == scores[0]):
        raise DegenerateInput("all scores identical, correlation undefined")
    if np.all(truths == truths[0]):
        pearson = 0.0
    else:
        pearson = float(np.corrcoef(scores, truths)[0, 1])
    order = np.argsort(scores, kind="stable")
    bins = []
    for bin_index, chunk in enumerate(np.array_split(order, 10)):
        if len(chunk) == 0:
            continue
        bins.append(
            BinStat(
                bin_index=bin_index,
                count=int(len(chunk)),
                mean_score=float(scores[chunk].mean()),
                mean_truth=float(truths[chunk].mean()),
            )
        )
    return CorrelationReport(pearson=pearson, bins=tuple(bins))


@dataclass(frozen=True)
class ExampleMetrics:
    example_id: str
    fact_acc: Optional[float] = None
    n_fact: Optional[int] = None
    ans_rec: Optional[bool] = None
    acc: Optional[bool] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "fact_acc": self.fact_acc,
            "n_fact": self.n_fact,
            "ans_rec": self.ans_rec,
            "acc": self.acc,
            "error": self.error,
        }


def _mean_or_none(values: list) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return sum(present) / len(present)


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate metrics for one run, with the per-example breakdown kept.

    Aggregates are means over the examples where the metric applies;
    booleans aggregate to rates. A metric that applies nowhere is None.
    """

    method: str
    task_kind: TaskKind
    n_examples: int
    per_example: tuple
    fact_acc: Optional[float] = None
    n_fact: Optional[float] = None
    ans_rec: Optional[float] = None
    acc: Optional[float] = None

    @classmethod
    def build(
        cls, method: str, task_kind: TaskKind, per_example: Sequence[ExampleMetrics]
    ) -> "MetricsReport":
        return cls(
            method=method,
            task_kind=task_kind,
            n_examples=len(per_example),
            per_example=tuple(per_example),
            fact_acc=_mean_or_none([m.fact_acc for m in per_example]),
            n_fact=_mean_or_none(
                [float(m.n_fact) if m.n_fact is not None else None for m in per_example]
            ),
            ans_rec=_mean_or_none(
                [
                    (1.0 if m.ans_rec else 0.0) if m.ans_rec is not None else None
                    for m in per_example
                ]
            ),
            acc=_mean_or_none(
                [
                    (1.0 if m.acc else 0.0) if m.acc is not None else None
                    for m in per_example
                ]
            ),
        )

    def summary(self) -> dict:
        return {
            "method": self.method,
            "task_kind": self.task_kind.value,
            "n_examples": self.n_examples,
            "fact_acc": self.fact_acc,
            "n_fact": self.n_fact,
            "ans_rec": self.ans_rec,
            "acc": self.acc,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_example"] = [m.to_dict() for m in self.per_example]
        return d

    def to_text(self) -> str:
        def fmt(value: Optional[float]) -> str:
            return "-" if value is None else f"{value:.4f}"

        lines = [
            f"method: {self.method}",
            f"task: {self.task_kind.value}",
            f"examples: {self.n_examples}",
            "",
            f"{'metric':<10}{'value':>10}",
            f"{'fact_acc':<10}{fmt(self.fact_acc):>10}",
            f"{'n_fact':<10}{fmt(self.n_fact):>10}",
            f"{'ans_rec':<10}{fmt(self.ans_rec):>10}",
            f"{'acc':<10}{fmt(self.acc):>10}",
        ]
        return "\n".join(lines)
