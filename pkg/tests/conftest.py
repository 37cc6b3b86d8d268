"""Shared fixtures: planted scripted-backend worlds.

The bio world plants, for each fictional entity, a pool of true facts, a
couple of false facts, and one unverifiable fact. Candidate responses are
deterministic mixes of those pools, and the scripted rules answer every
pipeline prompt (sampling, decomposition, verification, regeneration, and
the baselines) consistently with the planted truth. That makes end-to-end
behavior fully predictable: endorsement scores, surviving facts, and judged
accuracy can all be computed by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import pytest

from factendorse.core import PipelineConfig
from factendorse.gateway import ScriptedBackend, ScriptRule, derive_seed
from factendorse.prompts import load_catalog

SEED = 0
TEMPERATURE = 1.0

_CITIES = ["Lyon", "Porto", "Tartu"]
_WRONG_CITIES = ["Madrid", "Oslo", "Riga"]
_FIELDS = ["chemistry", "linguistics", "geology"]
_UNIVERSITIES = ["Leeds", "Uppsala", "Ghent"]
_TOPICS = ["catalytic reactions", "vowel shifts", "sediment layers"]
_AWARDS = ["Meridian", "Lanford", "Copeland"]


def _numbered_reply(facts):
    lines = ["Here are the facts:", ""]
    lines += [f"{i + 1}. {fact}" for i, fact in enumerate(facts)]
    lines += ["", "Let me know if you need more."]
    return "\n".join(lines)


@dataclass
class BioWorld:
    entities: list
    n: int
    seed: int
    temperature: float
    config: PipelineConfig
    trues: dict = field(default_factory=dict)
    falses: dict = field(default_factory=dict)
    maybes: dict = field(default_factory=dict)
    candidate_texts: dict = field(default_factory=dict)
    candidate_facts: dict = field(default_factory=dict)
    regen_texts: dict = field(default_factory=dict)
    cove_final_texts: dict = field(default_factory=dict)
    refine_final_texts: dict = field(default_factory=dict)
    rule_dicts: list = field(default_factory=list)

    def example_id(self, entity: str) -> str:
        return f"bio-{self.entities.index(entity) + 1:04d}"

    def query_text(self, entity: str) -> str:
        return f"Tell me a bio of {entity}"

    def judge_bank(self) -> dict:
        return {self.example_id(e): list(self.trues[e]) for e in self.entities}

    def dataset_text(self) -> str:
        return "\n".join(self.entities) + "\n"

    def backend(self) -> ScriptedBackend:
        return ScriptedBackend([ScriptRule.from_dict(d) for d in self.rule_dicts])

    def rules_jsonl(self) -> str:
        return "\n".join(json.dumps(d, ensure_ascii=False) for d in self.rule_dicts) + "\n"


def _entity_facts(entity: str, position: int) -> tuple:
    city = _CITIES[position % len(_CITIES)]
    wrong_city = _WRONG_CITIES[position % len(_WRONG_CITIES)]
    year = 1901 + 7 * position
    trues = [
        f"{entity} was born in {city} in {year}.",
        f"{entity} studied {_FIELDS[position % 3]} at the University of "
        f"{_UNIVERSITIES[position % 3]}.",
        f"{entity} published a monograph on {_TOPICS[position % 3]} in {year + 30}.",
        f"{entity} received the {_AWARDS[position % 3]} Prize in {year + 35}.",
        f"{entity} retired from public life in {year + 55}.",
    ]
    falses = [
        f"{entity} was born in {wrong_city} in {year + 2}.",
        f"{entity} never published any academic work.",
    ]
    maybes = [f"{entity} may have spent a year abroad before {year + 20}."]
    return trues, falses, maybes


def _candidate_fact_lists(trues, falses, maybes, n: int) -> list:
    """Deterministic fact mix per candidate.

    Candidate 0 carries a planted false fact (it doubles as the base
    baseline's sample), candidate 1 is all-true, candidate 2 is the longest
    and carries a false plus the unverifiable fact. Beyond six candidates
    some mixes repeat, which is fine: sampling can repeat itself too.
    """
    assert n <= 10, "the planted world defines up to ten candidates"
    lists = []
    for i in range(n):
        facts = list(trues[: 3 + (i % 3)])
        if i % 2 == 0:
            facts.append(falses[(i // 2) % 2])
        if i == 2:
            facts.append(maybes[0])
        lists.append(facts)
    return lists


def build_bio_world(
    entities, n: int = 4, seed: int = SEED, temperature: float = TEMPERATURE
) -> BioWorld:
    config = PipelineConfig(
        n_candidates=n, context_k=3, alpha=0.8, temperature=temperature, seed=seed
    )
    world = BioWorld(
        entities=list(entities), n=n, seed=seed, temperature=temperature, config=config
    )
    sample_rules = []
    verify_rules = []
    other_rules = []
    decompose_texts: dict = {}
    all_facts_world: list = []

    for position, entity in enumerate(world.entities):
        trues, falses, maybes = _entity_facts(entity, position)
        world.trues[entity] = trues
        world.falses[entity] = falses
        world.maybes[entity] = maybes
        fact_lists = _candidate_fact_lists(trues, falses, maybes, n)
        world.candidate_facts[entity] = fact_lists
        texts = [" ".join(facts) for facts in fact_lists]
        world.candidate_texts[entity] = texts
        query_id = world.example_id(entity)
        query_text = world.query_text(entity)

        for i, text in enumerate(texts):
            hint = derive_seed(seed, query_id, f"sample-{i}")
            sample_rules.append(
                {
                    "match": {"prompt_contains": [f"seed_hint: {hint}", query_text]},
                    "reply": text,
                }
            )
            decompose_texts[text] = fact_lists[i]

        for fact in trues:
            verify_rules.append(
                {
                    "match": {"prompt_contains": [f'statement: "{fact}"']},
                    "reply": "True." if len(fact) % 2 == 0 else "That is true.",
                }
            )
        for fact in falses:
            verify_rules.append(
                {
                    "match": {"prompt_contains": [f'statement: "{fact}"']},
                    "reply": "False."
                    if len(fact) % 2 == 0
                    else "That is false, the text contradicts it.",
                }
            )
        for fact in maybes:
            verify_rules.append(
                {
                    "match": {"prompt_contains": [f'statement: "{fact}"']},
                    "reply": "Inconclusive, the text does not mention this.",
                }
            )
        all_facts_world.extend(trues + falses + maybes)

        regen_text = " ".join(trues)
        world.regen_texts[entity] = regen_text
        decompose_texts[regen_text] = trues
        other_rules.append(
            {
                "match": {
                    "prompt_contains": [f"answer the question: {query_text}"]
                },
                "reply": regen_text,
            }
        )

        other_rules.append(
            {
                "match": {
                    "prompt_contains": ["select the most consistent one", entity]
                },
                "reply": "Response 2",
            }
        )

        draft_hint = derive_seed(seed, query_id, "cove-draft")
        other_rules.append(
            {
                "match": {"prompt_contains": [f"seed_hint: {draft_hint}", query_text]},
                "reply": texts[0],
            }
        )
        question_born = f"Where was {entity} born?"
        question_pub = f"Did {entity} publish academic work?"
        other_rules.append(
            {
                "match": {"prompt_contains": ["List verification questions", entity]},
                "reply": f"1. {question_born}\n2. {question_pub}",
            }
        )
        other_rules.append(
            {
                "match": {"prompt_contains": [f"concisely and factually: {question_born}"]},
                "reply": trues[0],
            }
        )
        other_rules.append(
            {
                "match": {"prompt_contains": [f"concisely and factually: {question_pub}"]},
                "reply": trues[2],
            }
        )
        cove_final = " ".join(trues[:4])
        world.cove_final_texts[entity] = cove_final
        decompose_texts[cove_final] = trues[:4]
        other_rules.append(
            {
                "match": {
                    "prompt_contains": ["write a final corrected response", entity]
                },
                "reply": cove_final,
            }
        )

        refine_hint = derive_seed(seed, query_id, "refine-draft")
        other_rules.append(
            {
                "match": {"prompt_contains": [f"seed_hint: {refine_hint}", query_text]},
                "reply": texts[2 % n],
            }
        )
        refine_final = " ".join(trues[:3])
        world.refine_final_texts[entity] = refine_final
        decompose_texts[refine_final] = trues[:3]
        other_rules.append(
            {
                "match": {"prompt_contains": ["Review the previous response", entity]},
                "reply": refine_final,
            }
        )

    # No planted fact may contain another, or verify rules could shadow
    # each other.
    for a in all_facts_world:
        for b in all_facts_world:
            assert a == b or a not in b, f"fact {a!r} is contained in {b!r}"

    # Longer texts first so a decompose prompt never matches a rule for a
    # shorter text embedded in it.
    decompose_rules = [
        {
            "match": {"prompt_contains": ["List all non-repeated facts", text]},
            "reply": _numbered_reply(facts),
        }
        for text, facts in sorted(
            decompose_texts.items(), key=lambda kv: -len(kv[0])
        )
    ]

    world.rule_dicts = decompose_rules + verify_rules + sample_rules + other_rules
    return world


@dataclass
class MathWorld:
    questions: list
    golds: list
    answer_sets: list
    n: int
    seed: int
    rule_dicts: list = field(default_factory=list)

    def example_id(self, position: int) -> str:
        return f"gsm-{position + 1:04d}"

    def dataset_text(self) -> str:
        lines = [
            json.dumps(
                {"question": q, "answer": f"Working shown here.\n#### {g}"},
                ensure_ascii=False,
            )
            for q, g in zip(self.questions, self.golds)
        ]
        return "\n".join(lines) + "\n"

    def backend(self) -> ScriptedBackend:
        return ScriptedBackend([ScriptRule.from_dict(d) for d in self.rule_dicts])

    def rules_jsonl(self) -> str:
        return "\n".join(json.dumps(d, ensure_ascii=False) for d in self.rule_dicts) + "\n"


def build_math_world(seed: int = SEED, n: int = 5) -> MathWorld:
    questions = [
        "A baker sells 9 trays of 8 rolls each. How many rolls is that?",
        "Lena reads 14 pages a day for 6 days. How many pages does she read?",
        "A tank holds 120 liters and loses 15 per hour. How long until empty?",
    ]
    golds = ["72", "84", "8"]
    # Per question: the answer each of the n chain-of-thought samples lands on.
    # Majority is the gold; "72.0" checks numeric normalization in the vote.
    answer_sets = [
        ["72", "72.0", "68", "72", "8"],
        ["84", "80", "84", "84", "84"],
        ["8", "9", "8", "9", "8"],
    ]
    world = MathWorld(
        questions=questions, golds=golds, answer_sets=answer_sets, n=n, seed=seed
    )
    sc_rules = []
    raw_rules = []
    for position, (question, answers) in enumerate(zip(questions, answer_sets)):
        query_id = world.example_id(position)
        for i, answer in enumerate(answers[:n]):
            hint = derive_seed(seed, query_id, f"sample-{i}")
            reply = (
                f"First multiply the relevant numbers step by step.\n"
                f"That gives an intermediate value of {position + 2}.\n"
                f"Answer: {answer}"
            )
            # Chain-of-thought samples; these rules are more specific than
            # the raw ones below and must come first.
            sc_rules.append(
                {
                    "match": {
                        "prompt_contains": [f"seed_hint: {hint}", "step by step"]
                    },
                    "reply": reply,
                }
            )
            raw_rules.append(
                {
                    "match": {"prompt_contains": [f"seed_hint: {hint}", question]},
                    "reply": f"The total works out to {answer}.",
                }
            )
    world.rule_dicts = sc_rules + raw_rules
    return world


ENTITIES = ["Avery Quinn", "Rosalind Vega", "Tomas Okafor"]


@pytest.fixture(scope="session")
def bio_world() -> BioWorld:
    return build_bio_world(ENTITIES)


@pytest.fixture(scope="session")
def math_world() -> MathWorld:
    return build_math_world()


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@dataclass
class BioPaths:
    rules: str
    dataset: str
    judge_bank: str
    out: str


@pytest.fixture
def bio_paths(bio_world: BioWorld, tmp_path) -> BioPaths:
    rules = tmp_path / "rules.jsonl"
    rules.write_text(bio_world.rules_jsonl(), encoding="utf-8")
    dataset = tmp_path / "entities.txt"
    dataset.write_text(bio_world.dataset_text(), encoding="utf-8")
    bank = tmp_path / "judge_bank.json"
    bank.write_text(json.dumps(bio_world.judge_bank(), indent=2), encoding="utf-8")
    out = tmp_path / "out"
    return BioPaths(
        rules=str(rules), dataset=str(dataset), judge_bank=str(bank), out=str(out)
    )


@dataclass
class MathPaths:
    rules: str
    dataset: str
    out: str


@pytest.fixture
def math_paths(math_world: MathWorld, tmp_path) -> MathPaths:
    rules = tmp_path / "math_rules.jsonl"
    rules.write_text(math_world.rules_jsonl(), encoding="utf-8")
    dataset = tmp_path / "problems.jsonl"
    dataset.write_text(math_world.dataset_text(), encoding="utf-8")
    out = tmp_path / "out"
    return MathPaths(rules=str(rules), dataset=str(dataset), out=str(out))
