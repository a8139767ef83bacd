"""Search-guided synthesis of TikZ graphics programs from images."""

from .embed import Embedding, HttpEmbedClient, MockEmbedder, PatchEmbeddings
from .errors import TikzsmithError
from .harness import CompileOutcome, CompileStatus, LatexHarness, StubHarness, classify_log
from .policy import (
    AdversarialPolicy,
    HttpPolicyClient,
    PolicyRequest,
    PolicyResponse,
    ScriptedPolicy,
    SeededStochasticPolicy,
    SequencedPolicy,
)
from .reward import (
    DiagnosticsReward,
    EmdReward,
    RewardValue,
    SelfSimReward,
    diagnostics_reward,
    emd_reward,
    rescale_values,
    selfsim,
)
from .search import (
    FaultMemo,
    SearchConfig,
    SearchMode,
    SearchResult,
    SearchTrace,
    TraceEvent,
    run_rollout,
    run_search,
    sample_baseline,
)
from .tree import ProgramState, Rollout, SearchNode, backpropagate, expand, select, uct_score

__version__ = "0.1.0"

__all__ = [
    "AdversarialPolicy",
    "CompileOutcome",
    "CompileStatus",
    "DiagnosticsReward",
    "Embedding",
    "EmdReward",
    "FaultMemo",
    "HttpEmbedClient",
    "HttpPolicyClient",
    "LatexHarness",
    "MockEmbedder",
    "PatchEmbeddings",
    "PolicyRequest",
    "PolicyResponse",
    "ProgramState",
    "RewardValue",
    "Rollout",
    "ScriptedPolicy",
    "SearchConfig",
    "SearchMode",
    "SearchNode",
    "SearchResult",
    "SearchTrace",
    "SeededStochasticPolicy",
    "SelfSimReward",
    "SequencedPolicy",
    "StubHarness",
    "TikzsmithError",
    "TraceEvent",
    "backpropagate",
    "classify_log",
    "diagnostics_reward",
    "emd_reward",
    "expand",
    "rescale_values",
    "run_rollout",
    "run_search",
    "sample_baseline",
    "select",
    "selfsim",
    "uct_score",
    "__version__",
]
