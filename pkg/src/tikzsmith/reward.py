"""Simulation rewards: compiler diagnostics, perceptual self-similarity, and
the patch-level earth mover's distance variant.

All operations here are pure; the *Reward classes at the bottom adapt them to
the search loop's prepare/score calling convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .embed import Embedding, PatchEmbeddings
from .errors import DegenerateEmbeddingError
from .harness import CompileOutcome, CompileStatus
from .transport import TransportPlan, solve_transport

if TYPE_CHECKING:
    from .tree import Rollout

FAILURE_VALUE = -1.0


@dataclass(frozen=True)
class RewardValue:
    value: float
    kind: str

    def __post_init__(self):
        if not -1.0 <= self.value <= 1.0:
            raise ValueError(f"reward outside [-1, 1]: {self.value!r}")


def diagnostics_reward(outcome: CompileOutcome) -> RewardValue:
    """+1 for a clean compile, 0 with recoverable errors, -1 on fatal failure."""
    mapping = {
        CompileStatus.CLEAN_SUCCESS: 1.0,
        CompileStatus.RECOVERABLE_ERRORS: 0.0,
        CompileStatus.FATAL_FAILURE: -1.0,
    }
    return RewardValue(value=mapping[outcome.status], kind="diagnostics")


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of two vectors, clamped to [-1, 1] against float drift."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm vector")
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


def selfsim(input_emb: Embedding, output_emb: Optional[Embedding]) -> RewardValue:
    """Cosine similarity of pooled embeddings; -1 when there is no output."""
    if output_emb is None:
        return RewardValue(value=FAILURE_VALUE, kind="selfsim")
    return RewardValue(value=cosine_similarity(input_emb.values, output_emb.values), kind="selfsim")


def rescale_values(values: list[float]) -> list[float]:
    """Min-max rescale a node's value history, preserving the -1 failure code.

    Non-failure entries map onto [0, 1] relative to the list's own extremes
    (the minimum taken over non-failure entries); when all non-failure entries
    coincide they map to 0. Failure entries stay -1. Pure; applied on read
    inside the selection score, never stored back.
    """
    if not values:
        return []
    for v in values:
        if not -1.0 <= v <= 1.0:
            raise ValueError(f"value outside [-1, 1]: {v!r}")
    non_failure = [v for v in values if v != FAILURE_VALUE]
    if not non_failure:
        return [FAILURE_VALUE] * len(values)
    low = min(non_failure)
    high = max(values)
    out = []
    for v in values:
        if v == FAILURE_VALUE:
            out.append(FAILURE_VALUE)
        elif high == low:
            out.append(0.0)
        else:
            out.append((v - low) / (high - low))
    return out


@dataclass
class EmdProblem:
    """A solved uniform-marginal transport instance over patch distances.

    Rows of ``flow`` sum to 1/|x| and columns to 1/|y| within solver
    tolerance; ``distances`` holds pairwise cosine distances.
    """

    distances: np.ndarray
    flow: np.ndarray
    cost: float


def _pairwise_cosine_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xn = np.linalg.norm(x, axis=1)
    yn = np.linalg.norm(y, axis=1)
    if (xn == 0.0).any() or (yn == 0.0).any():
        raise DegenerateEmbeddingError("patch embedding with zero norm")
    sims = np.clip((x @ y.T) / np.outer(xn, yn), -1.0, 1.0)
    return 1.0 - sims


def emd_distance(x: PatchEmbeddings, y: PatchEmbeddings) -> EmdProblem:
    """Earth mover's distance between two patch sets under uniform marginals.

    The ground metric is cosine distance (1 - cosine similarity) between
    patch vectors; the flow is the exact optimal transportation plan.
    """
    xa = np.asarray(x.patches, dtype=float)
    ya = np.asarray(y.patches, dtype=float)
    if xa.ndim != 2 or ya.ndim != 2 or xa.shape[0] < 1 or ya.shape[0] < 1:
        raise ValueError("patch matrices must be 2-d with at least one patch")
    if not (np.isfinite(xa).all() and np.isfinite(ya).all()):
        raise ValueError("patch embeddings must be finite")
    distances = _pairwise_cosine_distance(xa, ya)
    plan: TransportPlan = solve_transport(distances)
    total = float(plan.flow.sum())
    cost = plan.cost / total if total > 0 else plan.cost
    return EmdProblem(distances=distances, flow=plan.flow, cost=cost)


def emd_reward(x: PatchEmbeddings, y: Optional[PatchEmbeddings]) -> RewardValue:
    """2*tanh(-EMD) + 1 over patch embeddings; -1 when there is no output."""
    if y is None:
        return RewardValue(value=FAILURE_VALUE, kind="emd")
    problem = emd_distance(x, y)
    return RewardValue(value=2.0 * math.tanh(-problem.cost) + 1.0, kind="emd")


class DiagnosticsReward:
    """Compiler-diagnostics reward for output-driven search."""

    kind = "diagnostics"
    rescale_for_uct = False

    def prepare(self, input_image: bytes) -> None:
        pass

    def score(self, rollout: "Rollout", outcome: CompileOutcome) -> float:
        return diagnostics_reward(outcome).value


class SelfSimReward:
    """Perceptual self-similarity against the input image's pooled embedding.

    A missing raster scores -1; so does a render whose mock embedding is
    degenerate (e.g. a blank page), since it cannot be compared.
    """

    kind = "selfsim"
    rescale_for_uct = True

    def __init__(self, embedder):
        self.embedder = embedder
        self._input_emb: Optional[Embedding] = None

    def prepare(self, input_image: bytes) -> None:
        self._input_emb = self.embedder.embed_image(input_image)
        if float(np.linalg.norm(self._input_emb.values)) == 0.0:
            raise DegenerateEmbeddingError("input image embedding has zero norm")

    def score(self, rollout: "Rollout", outcome: CompileOutcome) -> float:
        if self._input_emb is None:
            raise RuntimeError("prepare() must run before score()")
        if outcome.raster is None:
            return FAILURE_VALUE
        try:
            output_emb = self.embedder.embed_image(outcome.raster)
            return selfsim(self._input_emb, output_emb).value
        except DegenerateEmbeddingError:
            return FAILURE_VALUE


class EmdReward:
    """Patch-level EMD reward; shares the SelfSim failure conventions."""

    kind = "emd"
    rescale_for_uct = True

    def __init__(self, embedder, layer_index: Optional[int] = None):
        self.embedder = embedder
        self.layer_index = layer_index
        self._input_patches: Optional[PatchEmbeddings] = None

    def prepare(self, input_image: bytes) -> None:
        self._input_patches = self.embedder.embed_patches(input_image, self.layer_index)

    def score(self, rollout: "Rollout", outcome: CompileOutcome) -> float:
        if self._input_patches is None:
            raise RuntimeError("prepare() must run before score()")
        if outcome.raster is None:
            return FAILURE_VALUE
        try:
            output_patches = self.embedder.embed_patches(outcome.raster, self.layer_index)
            return emd_reward(self._input_patches, output_patches).value
        except DegenerateEmbeddingError:
            return FAILURE_VALUE
