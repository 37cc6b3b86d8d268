"""End-to-end orchestration: one query in, one auditable RunRecord out.

Methods:
  endorse-select      sample, decompose, score, pick the best candidate
  endorse-regenerate  sample, decompose, score, filter, dedupe, regenerate
  base                single sampled response
  sc / usc / cove / refine   baselines

Whatever the method, the final response is decomposed one more time (the
same way candidates are) so downstream metrics can count and judge its
facts without re-running anything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Optional

from . import baselines, decompose, endorse, produce
from .core import (
    Candidate,
    DecompositionMode,
    PipelineConfig,
    ProductionMode,
    Query,
    RunRecord,
    TaskKind,
)
from .gateway import ChatRequest, Gateway, derive_seed
from .prompts import PromptCatalog

METHODS = (
    "endorse-select",
    "endorse-regenerate",
    "base",
    "sc",
    "usc",
    "cove",
    "refine",
)


@dataclass
class Runner:
    """Binds a gateway, prompt catalog, and config for repeated run_query calls."""

    gateway: Gateway
    catalog: PromptCatalog
    config: PipelineConfig
    run_id: str = "run"

    def run_query(self, query: Query, method: str, gold: Any = None) -> RunRecord:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
        started = time.monotonic()
        log: list = []
        flags: list = []
        candidates: list = []
        selected_facts: tuple = ()

        if method in ("endorse-select", "endorse-regenerate"):
            mode = (
                ProductionMode.SELECT
                if method == "endorse-select"
                else ProductionMode.REGENERATE
            )
            final, candidates, selected_facts, flags = self._run_endorse(
                query, mode, log
            )
        elif method == "base":
            final = self._run_base(query, log)
        elif method == "sc":
            final, candidates = baselines.self_consistency(
                query,
                self.config.n_candidates,
                self.config.temperature,
                self.gateway,
                self.catalog,
                seed=self.config.seed,
                log=log,
                max_tokens=self.config.max_tokens,
            )
        elif method == "usc":
            final, candidates, flags = baselines.universal_self_consistency(
                query,
                self.config.n_candidates,
                self.config.temperature,
                self.gateway,
                self.catalog,
                seed=self.config.seed,
                log=log,
                max_tokens=self.config.max_tokens,
            )
        elif method == "cove":
            final, flags = baselines.chain_of_verification(
                query,
                self.gateway,
                self.catalog,
                temperature=self.config.temperature,
                seed=self.config.seed,
                log=log,
                max_tokens=self.config.max_tokens,
            )
        else:
            final = baselines.refine(
                query,
                self.gateway,
                self.catalog,
                temperature=self.config.temperature,
                seed=self.config.seed,
                log=log,
                max_tokens=self.config.max_tokens,
            )

        final_facts, ff_flags = self._decompose_final(query, final, log)
        flags = list(flags) + ff_flags

        return RunRecord(
            run_id=self.run_id,
            method=method,
            query=query,
            config=self.config,
            candidates=tuple(candidates),
            selected_facts=selected_facts,
            final_response=final,
            final_facts=tuple(final_facts),
            gold=gold,
            flags=tuple(flags),
            calls=tuple(log),
            timings={"total_s": time.monotonic() - started},
        )

    def _run_base(self, query: Query, log: list) -> str:
        request = ChatRequest.user(
            query.text,
            temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
            seed_hint=derive_seed(self.config.seed, query.id, "sample-0"),
        )
        return self.gateway.complete(request, purpose="sample", log=log).text

    def _run_endorse(
        self, query: Query, mode: ProductionMode, log: list
    ) -> tuple:
        cfg = self.config
        candidates = self.gateway.sample_candidates(
            query,
            cfg.n_candidates,
            cfg.temperature,
            seed=cfg.seed,
            log=log,
            max_tokens=cfg.max_tokens,
        )
        candidates, d_flags = decompose.decompose_all(
            candidates,
            cfg.decomposition_mode,
            query.task_kind,
            self.gateway,
            self.catalog,
            log=log,
            max_tokens=cfg.max_tokens,
        )
        candidates, e_flags = endorse.endorse_all(
            candidates, cfg, self.gateway, self.catalog, log=log
        )
        flags = list(d_flags) + list(e_flags)

        if mode is ProductionMode.SELECT:
            chosen = produce.select_response(candidates)
            return chosen.text, candidates, (), flags

        all_facts = [f for c in candidates for f in c.facts]
        surviving = produce.filter_facts(all_facts, cfg.alpha, cfg.effective_m())
        if surviving:
            c = produce.cluster_count(
                candidates,
                cfg.cluster_policy,
                cfg.fixed_clusters,
                surviving=len(surviving),
            )
            fact_set = produce.cluster_and_pick(surviving, c, cfg.seed)
        else:
            fact_set = produce.FactSet.empty()
        final, r_flags = produce.regenerate(
            query,
            fact_set,
            candidates,
            self.gateway,
            self.catalog,
            log=log,
            max_tokens=cfg.max_tokens,
        )
        return final, candidates, fact_set.facts, flags + r_flags

    def _decompose_final(self, query: Query, final: str, log: list) -> tuple:
        """Decompose the final response for metrics, mirroring candidate mode."""
        if not final.strip():
            return [], ["empty_final_response"]
        use_sentences = (
            self.config.decomposition_mode is DecompositionMode.SENTENCE
            or query.task_kind is TaskKind.MATH
        )
        pseudo = Candidate(index=0, text=final)
        if use_sentences:
            facts = decompose.decompose_by_sentence(pseudo)
            return [f.text for f in facts], []
        request = decompose.build_decompose_request(
            final, self.catalog, self.config.max_tokens
        )
        response = self.gateway.complete(request, purpose="final_facts", log=log)
        try:
            facts = decompose.parse_decomposition(0, response.text)
        except decompose.EmptyDecomposition:
            facts = decompose.decompose_by_sentence(pseudo)
            return [f.text for f in facts], ["final_facts_fallback_sentence"]
        return [f.text for f in facts], []
