"""Search tree over program line prefixes.

A node's state is the ordered list of program lines generated so far; edges
are one-line continuations. Backtracking nodes mirror their parent's state and
stay leaves forever: expanding one attaches the new chain to the parent, which
lets any part of the tree keep branching while the fanout stays bounded.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

from .errors import ContractViolationError, InvalidConfigError
from .harness import CompileOutcome, CompileStatus
from .reward import rescale_values


@dataclass(frozen=True)
class ProgramState:
    """An ordered sequence of program lines; depth equals the line count."""

    lines: tuple[str, ...] = ()

    def __post_init__(self):
        for line in self.lines:
            if "\n" in line or "\r" in line:
                raise ValueError("program lines must not contain line separators")

    @property
    def depth(self) -> int:
        return len(self.lines)

    def extend(self, line: str) -> "ProgramState":
        return ProgramState(self.lines + (line,))

    def text(self) -> str:
        return "\n".join(self.lines)

    def key(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()


@dataclass(eq=False)
class SearchNode:
    state: ProgramState
    is_backtracking: bool = False
    parent: Optional["SearchNode"] = None
    children: list["SearchNode"] = field(default_factory=list)
    visits: int = 0
    values: list[float] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __repr__(self) -> str:
        kind = "backtrack" if self.is_backtracking else "node"
        return f"<{kind} depth={self.state.depth} visits={self.visits} children={len(self.children)}>"


@dataclass(eq=False)
class Rollout:
    """A completed program sampled from a node state, plus its evaluation."""

    origin_state: ProgramState
    lines: tuple[str, ...]
    outcome: Optional[CompileOutcome] = None
    raw_reward: Optional[float] = None
    tokens_generated: int = 0
    simulation_index: int = 0
    truncated: bool = False
    from_memo: bool = False

    def __post_init__(self):
        if self.lines[: self.origin_state.depth] != self.origin_state.lines:
            raise ContractViolationError("rollout lines must extend the origin state")

    @property
    def line_count(self) -> int:
        return len(self.lines)

    @property
    def program_text(self) -> str:
        return "\n".join(self.lines)

    def sha256(self) -> str:
        return hashlib.sha256(self.program_text.encode("utf-8")).hexdigest()


def uct_score(node: SearchNode, c: float, *, rescale: bool = False) -> float:
    """Upper-confidence score: mean value plus c*sqrt(ln(parent visits)/visits).

    Unvisited nodes score +inf so every expanded child is tried once. A
    backtracking node carries no values; its exploitation term is 0, keeping
    it reachable purely through the exploration bonus. With ``rescale`` the
    mean is taken over the min-max rescaled value list instead of the raw one.
    """
    if c <= 0:
        raise InvalidConfigError("exploration coefficient must be positive")
    if node.parent is None:
        raise ContractViolationError("uct_score needs a parented node")
    if node.parent.visits < 1:
        raise ContractViolationError("parent must have been visited")
    if node.visits == 0:
        return math.inf
    if node.values:
        values = rescale_values(node.values) if rescale else node.values
        exploitation = sum(values) / node.visits
    else:
        exploitation = 0.0
    return exploitation + c * math.sqrt(math.log(node.parent.visits) / node.visits)


def select(root: SearchNode, c: float, *, rescale: bool = False) -> list[SearchNode]:
    """Descend from the root by greedy UCT until a leaf; ties take the lowest index."""
    path = [root]
    node = root
    while node.children:
        best = node.children[0]
        best_score = uct_score(best, c, rescale=rescale)
        for child in node.children[1:]:
            score = uct_score(child, c, rescale=rescale)
            if score > best_score:
                best, best_score = child, score
        path.append(best)
        node = best
    return path


def _floor_sqrt(x: int) -> int:
    return math.isqrt(x)


def expand(leaf: SearchNode, rollout: Rollout) -> list[SearchNode]:
    """Attach up to max(1, floor(sqrt(|r| - d_l))) one-line extension nodes.

    Returns the chain of nodes on the path from the attachment point to the
    deepest node reached, in order; entries may be pre-existing nodes when a
    candidate state merged with an identical sibling. For a backtracking leaf
    the chain attaches under the leaf's parent so the leaf itself stays a
    leaf. Candidates whose state would include a line attributed as fatal are
    dropped, truncating the chain. Each genuinely new node gets a backtracking
    sibling mirroring its parent (at most one such sibling per parent).
    """
    if leaf.is_backtracking:
        if leaf.parent is None:
            raise ContractViolationError("backtracking node without a parent")
        attach = leaf.parent
    else:
        attach = leaf
    if rollout.origin_state != attach.state:
        raise ContractViolationError("rollout origin does not match the expansion state")

    depth = leaf.state.depth
    if rollout.line_count < depth:
        raise ContractViolationError("rollout shorter than leaf depth")
    available = rollout.line_count - depth
    if available == 0:
        return []
    count = max(1, _floor_sqrt(available))
    count = min(count, available)

    fatal_line = None
    if (
        rollout.outcome is not None
        and rollout.outcome.status is CompileStatus.FATAL_FAILURE
        and rollout.outcome.fatal_line is not None
    ):
        fatal_line = rollout.outcome.fatal_line

    chain: list[SearchNode] = []
    parent = attach
    for step in range(1, count + 1):
        end = depth + step
        if fatal_line is not None and end >= fatal_line:
            break
        candidate = ProgramState(rollout.lines[:end])
        existing = next(
            (
                child
                for child in parent.children
                if not child.is_backtracking and child.state == candidate
            ),
            None,
        )
        if existing is not None:
            node = existing
        else:
            node = SearchNode(state=candidate, parent=parent)
            parent.children.append(node)
            if not any(child.is_backtracking for child in parent.children):
                parent.children.append(
                    SearchNode(state=parent.state, is_backtracking=True, parent=parent)
                )
        chain.append(node)
        parent = node
    return chain


def backpropagate(path: list[SearchNode], chain: list[SearchNode], value: float) -> None:
    """Credit every node from the root through the deepest chain node.

    Visit counts increase everywhere; the value is appended only on
    non-backtracking nodes (a visited backtracking leaf counts the visit but
    never holds values).
    """
    if not math.isfinite(value) or not -1.0 <= value <= 1.0:
        raise ContractViolationError(f"value outside [-1, 1]: {value!r}")
    seen: set[int] = set()
    for node in list(path) + list(chain):
        if id(node) in seen:
            continue
        seen.add(id(node))
        node.visits += 1
        if not node.is_backtracking:
            node.values.append(value)
