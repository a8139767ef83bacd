"""The simulation loop: select, roll out, compile, score, expand, backpropagate.

Output-driven (OI) searches stop at the first simulation that produces a
compile artifact; time-budgeted (TI) searches keep refining until the wall
clock budget runs out. Fatal rollouts register the prefix that introduced the
faulty line, and later rollouts that re-sample such a prefix abort early and
reuse the recorded result instead of calling the policy again.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol, runtime_checkable

from .errors import ContractViolationError, EmptySearchError, InvalidConfigError
from .harness import CompileOutcome, CompileStatus
from .policy import PolicyRequest, RolloutPolicy
from .tree import ProgramState, Rollout, SearchNode, backpropagate, expand, select


class SearchMode(str, Enum):
    OI = "oi"
    TI = "ti"


@dataclass
class SearchConfig:
    mode: SearchMode = SearchMode.TI
    exploration_c: float = 0.6
    temperature: float = 0.8
    budget_seconds: float = 600.0
    max_rollout_lines: int = 150
    compile_timeout_seconds: float = 60.0
    raster_dpi: int = 300
    rng_seed: int = 0
    # Plumbing knobs below: request batching and an optional simulation cap
    # for deterministic fixed-length runs.
    max_lines_per_request: int = 64
    max_simulations: Optional[int] = None

    def validate(self) -> None:
        if self.exploration_c <= 0:
            raise InvalidConfigError("exploration_c must be positive")
        if self.temperature <= 0:
            raise InvalidConfigError("temperature must be positive")
        if self.budget_seconds <= 0:
            raise InvalidConfigError("budget_seconds must be positive")
        if self.max_rollout_lines < 1:
            raise InvalidConfigError("max_rollout_lines must be positive")
        if self.compile_timeout_seconds <= 0:
            raise InvalidConfigError("compile_timeout_seconds must be positive")
        if self.raster_dpi < 1:
            raise InvalidConfigError("raster_dpi must be positive")
        if self.max_lines_per_request < 1:
            raise InvalidConfigError("max_lines_per_request must be positive")
        if self.max_simulations is not None and self.max_simulations < 1:
            raise InvalidConfigError("max_simulations must be positive when set")


class FaultMemo:
    """Maps faulty-prefix keys to the rollout that first exhibited the fault."""

    def __init__(self):
        self._rollouts: dict[str, Rollout] = {}

    def __len__(self) -> int:
        return len(self._rollouts)

    def lookup(self, state: ProgramState) -> Optional[Rollout]:
        return self._rollouts.get(state.key())

    def register(self, rollout: Rollout) -> None:
        outcome = rollout.outcome
        if outcome is None or outcome.status is not CompileStatus.FATAL_FAILURE:
            raise ContractViolationError("only fatal rollouts can be memoized")
        fatal_line = outcome.fatal_line or rollout.line_count
        fatal_line = min(max(fatal_line, 1), rollout.line_count)
        key = ProgramState(rollout.lines[:fatal_line]).key()
        self._rollouts.setdefault(key, rollout)


@dataclass(frozen=True)
class TraceEvent:
    sim: int
    t_offset_s: float
    reward: float
    status: str
    tokens: int
    unique: bool
    program_sha256: str


class SearchTrace:
    """Append-only record of one simulation per event; offsets never decrease."""

    FIELDS = ("sim", "t_offset_s", "reward", "status", "tokens", "unique", "program_sha256")

    def __init__(self, events: Optional[list[TraceEvent]] = None):
        self.events: list[TraceEvent] = []
        for ev in events or []:
            self.append(ev)

    def append(self, event: TraceEvent) -> None:
        if self.events and event.t_offset_s < self.events[-1].t_offset_s:
            raise ContractViolationError("trace offsets must be nondecreasing")
        self.events.append(event)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_jsonl(self) -> str:
        lines = []
        for ev in self.events:
            record = {name: getattr(ev, name) for name in self.FIELDS}
            lines.append(json.dumps(record, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "SearchTrace":
        trace = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            trace.append(
                TraceEvent(
                    sim=int(raw["sim"]),
                    t_offset_s=float(raw["t_offset_s"]),
                    reward=float(raw["reward"]),
                    status=str(raw["status"]),
                    tokens=int(raw["tokens"]),
                    unique=bool(raw["unique"]),
                    program_sha256=str(raw["program_sha256"]),
                )
            )
        return trace


@runtime_checkable
class RewardFunction(Protocol):
    kind: str
    rescale_for_uct: bool

    def prepare(self, input_image: bytes) -> None: ...

    def score(self, rollout: Rollout, outcome: CompileOutcome) -> float: ...


@runtime_checkable
class CompileHarness(Protocol):
    def compile_program(
        self, source: str, timeout_s: float | None = None, dpi: int | None = None
    ) -> CompileOutcome: ...


def run_rollout(
    policy: RolloutPolicy,
    state: ProgramState,
    cfg: SearchConfig,
    memo: FaultMemo,
    *,
    image_ref: str = "",
    rng: Optional[random.Random] = None,
    simulation_index: int = 0,
) -> Rollout:
    """Sample lines from the policy until EOS, the line cap, or a memo hit.

    After every appended line the resulting prefix is checked against the
    fault memo; on a hit the memoized rollout is returned (carrying its
    recorded outcome and reward) with the tokens actually spent this time.
    """
    lines = list(state.lines)
    tokens = 0
    truncated = False
    eos = False
    while not eos:
        remaining = cfg.max_rollout_lines - len(lines)
        if remaining <= 0:
            truncated = True
            break
        req = PolicyRequest(
            image_ref=image_ref,
            prefix_lines=tuple(lines),
            temperature=cfg.temperature,
            max_new_lines=min(remaining, cfg.max_lines_per_request),
            seed=rng.randrange(2**63) if rng is not None else None,
        )
        resp = policy.sample_continuation(req)
        tokens += resp.tokens_used
        eos = resp.eos
        for idx, line in enumerate(resp.new_lines):
            lines.append(line)
            hit = memo.lookup(ProgramState(tuple(lines)))
            if hit is not None:
                return Rollout(
                    origin_state=state,
                    lines=hit.lines,
                    outcome=hit.outcome,
                    raw_reward=hit.raw_reward,
                    tokens_generated=tokens,
                    simulation_index=simulation_index,
                    from_memo=True,
                )
            if len(lines) >= cfg.max_rollout_lines:
                if idx < len(resp.new_lines) - 1 or not eos:
                    truncated = True
                break
        if truncated:
            break
    return Rollout(
        origin_state=state,
        lines=tuple(lines),
        tokens_generated=tokens,
        simulation_index=simulation_index,
        truncated=truncated,
    )


@dataclass
class SearchResult:
    best: Rollout
    trace: SearchTrace
    exit_reason: str
    simulations: int
    root: Optional[SearchNode] = field(repr=False, default=None)


def run_search(
    input_image: bytes,
    cfg: SearchConfig,
    policy: RolloutPolicy,
    reward: RewardFunction,
    harness: CompileHarness,
    *,
    clock: Callable[[], float] = time.monotonic,
) -> SearchResult:
    """Run simulations until the exit condition fires; return the best rollout.

    Ranking uses raw rewards (rescaling only ever affects selection); ties go
    to the earliest simulation. ``clock`` is injectable so tests can run
    deterministic budgets.
    """
    cfg.validate()
    memo = FaultMemo()
    trace = SearchTrace()
    root = SearchNode(state=ProgramState(()))
    rng = random.Random(cfg.rng_seed)

    image_ref = policy.register_image(input_image)
    reward.prepare(input_image)

    started = clock()
    best: Optional[Rollout] = None
    seen_hashes: set[str] = set()
    simulations = 0
    exit_reason = "budget_exhausted"

    while True:
        if cfg.max_simulations is not None and simulations >= cfg.max_simulations:
            exit_reason = "simulation_cap"
            break
        if clock() - started >= cfg.budget_seconds:
            exit_reason = "budget_exhausted"
            break

        path = select(root, cfg.exploration_c, rescale=reward.rescale_for_uct)
        leaf = path[-1]
        rollout = run_rollout(
            policy,
            leaf.state,
            cfg,
            memo,
            image_ref=image_ref,
            rng=rng,
            simulation_index=simulations,
        )
        if rollout.from_memo:
            outcome = rollout.outcome
            value = rollout.raw_reward
        else:
            outcome = harness.compile_program(
                rollout.program_text, cfg.compile_timeout_seconds, cfg.raster_dpi
            )
            rollout.outcome = outcome
            value = reward.score(rollout, outcome)
            rollout.raw_reward = value
            if outcome.status is CompileStatus.FATAL_FAILURE:
                memo.register(rollout)

        chain = expand(leaf, rollout)
        backpropagate(path, chain, value)

        sha = rollout.sha256()
        unique = sha not in seen_hashes
        seen_hashes.add(sha)
        trace.append(
            TraceEvent(
                sim=simulations,
                t_offset_s=clock() - started,
                reward=value,
                status=outcome.status.value,
                tokens=rollout.tokens_generated,
                unique=unique,
                program_sha256=sha,
            )
        )
        if best is None or value > best.raw_reward:
            best = rollout
        simulations += 1

        if cfg.mode is SearchMode.OI and outcome.artifact_produced:
            exit_reason = "early_exit"
            break

    if simulations == 0 or best is None:
        raise EmptySearchError(trace)
    return SearchResult(
        best=best, trace=trace, exit_reason=exit_reason, simulations=simulations, root=root
    )


def sample_baseline(
    input_image: bytes,
    cfg: SearchConfig,
    policy: RolloutPolicy,
    reward: RewardFunction,
    harness: CompileHarness,
    n_samples: int,
) -> list[Rollout]:
    """Independent root rollouts with no tree, for search-vs-sampling studies."""
    cfg.validate()
    rng = random.Random(cfg.rng_seed)
    image_ref = policy.register_image(input_image)
    reward.prepare(input_image)
    memo = FaultMemo()  # stays empty: the baseline never memoizes
    rollouts = []
    for i in range(n_samples):
        rollout = run_rollout(
            policy,
            ProgramState(()),
            cfg,
            memo,
            image_ref=image_ref,
            rng=rng,
            simulation_index=i,
        )
        outcome = harness.compile_program(
            rollout.program_text, cfg.compile_timeout_seconds, cfg.raster_dpi
        )
        rollout.outcome = outcome
        rollout.raw_reward = reward.score(rollout, outcome)
        rollouts.append(rollout)
    return rollouts
