"""Cross-sample fact endorsement for more factual LLM responses.

Sample several candidate answers, split each into atomic facts, let every
other candidate vote on each fact, then either pick the best-endorsed
candidate or regenerate an answer grounded on the best-endorsed facts.
"""

from .core import (
    ALL,
    Candidate,
    ClusterPolicy,
    DecompositionMode,
    Fact,
    PipelineConfig,
    ProductionMode,
    Query,
    RunRecord,
    TaskKind,
    Verdict,
    VerdictLabel,
)
from .gateway import (
    BackendSpec,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    HttpBackend,
    ResponseCache,
    ScriptedBackend,
)
from .pipeline import METHODS, Runner
from .prompts import PromptCatalog, load_catalog

__version__ = "0.1.0"

__all__ = [
    "ALL",
    "BackendSpec",
    "Candidate",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "ClusterPolicy",
    "DecompositionMode",
    "Fact",
    "Gateway",
    "HttpBackend",
    "METHODS",
    "PipelineConfig",
    "ProductionMode",
    "PromptCatalog",
    "Query",
    "ResponseCache",
    "RunRecord",
    "Runner",
    "ScriptedBackend",
    "TaskKind",
    "Verdict",
    "VerdictLabel",
    "load_catalog",
    "__version__",
]
