"""Evaluation toolkit: efficiency metrics, best-worst-scaling scores,
reliability and correlation analyses, n-gram novelty, the congruence
coefficient, and a token-level program edit distance.

Everything here is a pure function over in-memory data; file ingestion
helpers sit at the bottom.
"""

from __future__ import annotations

import csv
import math
import random
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DegeneratePcaError, UndefinedCorrelationError
from .search import SearchTrace

FATAL_STATUS = "fatal_failure"
REFERENCE_BUDGET_S = 600.0


@dataclass(frozen=True)
class EfficiencySample:
    final_tokens: int
    total_tokens: int

    def __post_init__(self):
        if self.final_tokens < 1 or self.total_tokens < 1:
            raise ValueError("token counts must be positive")
        if self.final_tokens > self.total_tokens:
            raise ValueError("final_tokens cannot exceed total_tokens")

    @property
    def ratio(self) -> float:
        return self.final_tokens / self.total_tokens


def winsorize(values: Sequence[float], proportion: float = 0.1) -> list[float]:
    """Replace the lowest/highest floor(p*n) values with the nearest retained one."""
    n = len(values)
    k = math.floor(proportion * n)
    order = sorted(range(n), key=lambda i: values[i])
    out = list(values)
    if k > 0:
        low = values[order[k]]
        high = values[order[n - k - 1]]
        for i in order[:k]:
            out[i] = low
        for i in order[n - k:]:
            out[i] = high
    return out


def mte(samples: Sequence[EfficiencySample]) -> float:
    """10% winsorized mean of final-to-total token ratios."""
    if not samples:
        raise ValueError("mte needs at least one sample")
    ratios = [s.ratio for s in samples]
    return float(np.mean(winsorize(ratios, 0.1)))


def mst(trace: SearchTrace, budget_s: float) -> float:
    """Unique artifact-producing programs within the budget, per 600 s."""
    if budget_s <= 0:
        raise ValueError("budget must be positive")
    hashes = {
        ev.program_sha256
        for ev in trace
        if ev.t_offset_s <= budget_s and ev.status != FATAL_STATUS
    }
    return len(hashes) * (REFERENCE_BUDGET_S / budget_s)


@dataclass(frozen=True)
class BwsAnnotation:
    item_id: str
    times_shown: int
    times_best: int
    times_worst: int

    def __post_init__(self):
        if self.times_shown < 1:
            raise ValueError("times_shown must be positive")
        if self.times_best < 0 or self.times_worst < 0:
            raise ValueError("counts must be nonnegative")
        if self.times_best > self.times_shown or self.times_worst > self.times_shown:
            raise ValueError("counts cannot exceed times_shown")


def bws_scores(annotations: Sequence[BwsAnnotation]) -> dict[str, float]:
    """Best-minus-worst selection proportions, in [-1, 1] per item."""
    return {
        a.item_id: a.times_best / a.times_shown - a.times_worst / a.times_shown
        for a in annotations
    }


def _fractional_ranks(x: Sequence[float]) -> list[float]:
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation: Pearson over fractional ranks (ties averaged)."""
    if len(x) != len(y):
        raise ValueError("vectors must have equal length")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    rx = _fractional_ranks(x)
    ry = _fractional_ranks(y)
    mx = sum(rx) / len(rx)
    my = sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    dy = math.sqrt(sum((b - my) ** 2 for b in ry))
    if dx == 0.0 or dy == 0.0:
        raise UndefinedCorrelationError("constant vector has no rank correlation")
    return num / (dx * dy)


def average_correlation(rhos: Sequence[float]) -> float:
    """Fisher-z average: tanh of the mean of atanh-transformed correlations."""
    if not rhos:
        raise ValueError("need at least one correlation")
    for r in rhos:
        if not -1.0 < r < 1.0:
            raise ValueError(f"correlation outside (-1, 1): {r!r}")
    return math.tanh(sum(math.atanh(r) for r in rhos) / len(rhos))


@dataclass(frozen=True)
class AnnotationRecord:
    item_id: str
    annotator_id: str
    tuple_id: str
    choice: str  # best | worst | none

    def __post_init__(self):
        if self.choice not in ("best", "worst", "none"):
            raise ValueError(f"choice must be best/worst/none, got {self.choice!r}")


def aggregate_annotations(records: Iterable[AnnotationRecord]) -> list[BwsAnnotation]:
    shown: dict[str, int] = {}
    best: dict[str, int] = {}
    worst: dict[str, int] = {}
    order: list[str] = []
    for rec in records:
        if rec.item_id not in shown:
            order.append(rec.item_id)
        shown[rec.item_id] = shown.get(rec.item_id, 0) + 1
        if rec.choice == "best":
            best[rec.item_id] = best.get(rec.item_id, 0) + 1
        elif rec.choice == "worst":
            worst[rec.item_id] = worst.get(rec.item_id, 0) + 1
    return [
        BwsAnnotation(
            item_id=item,
            times_shown=shown[item],
            times_best=best.get(item, 0),
            times_worst=worst.get(item, 0),
        )
        for item in order
    ]


def group_by_item(records: Iterable[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    grouped: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.item_id, []).append(rec)
    return grouped


def shr(
    per_item_annotations: Mapping[str, Sequence[AnnotationRecord]],
    rng_seed: int = 0,
    n_splits: int = 100,
) -> float:
    """Split-half reliability of BWS scores, Fisher-averaged over random splits.

    Each item's annotations are shuffled and halved; BWS scores computed per
    half are rank-correlated, and the correlations are averaged over
    ``n_splits`` splits.
    """
    if n_splits < 1:
        raise ValueError("n_splits must be positive")
    too_few = sorted(k for k, v in per_item_annotations.items() if len(v) < 2)
    if too_few:
        raise ValueError(f"items with fewer than 2 annotations: {too_few}")
    items = sorted(per_item_annotations)
    rng = random.Random(rng_seed)
    rhos = []
    for _ in range(n_splits):
        first: list[AnnotationRecord] = []
        second: list[AnnotationRecord] = []
        for item in items:
            records = list(per_item_annotations[item])
            rng.shuffle(records)
            half = (len(records) + 1) // 2
            first.extend(records[:half])
            second.extend(records[half:])
        scores1 = bws_scores(aggregate_annotations(first))
        scores2 = bws_scores(aggregate_annotations(second))
        rhos.append(spearman([scores1[i] for i in items], [scores2[i] for i in items]))
    clipped = [min(max(r, -0.999999999), 0.999999999) for r in rhos]
    return average_correlation(clipped)


def build_ngram_index(
    corpus_token_lists: Iterable[Sequence[str]], ns: Iterable[int]
) -> dict[int, set[tuple[str, ...]]]:
    ns = sorted(set(ns))
    index: dict[int, set[tuple[str, ...]]] = {n: set() for n in ns}
    for tokens in corpus_token_lists:
        tokens = tuple(tokens)
        for n in ns:
            for i in range(len(tokens) - n + 1):
                index[n].add(tokens[i : i + n])
    return index


def ngram_novelty(
    generated: Sequence[str],
    corpus_index: Mapping[int, set[tuple[str, ...]]],
    ns: Iterable[int],
) -> dict[int, float]:
    """Per n: fraction of the generated text's n-grams absent from the corpus.

    Sizes for which the generated text is too short are omitted.
    """
    generated = tuple(generated)
    out: dict[int, float] = {}
    for n in sorted(set(ns)):
        if n < 1:
            raise ValueError("n must be positive")
        if n not in corpus_index:
            raise ValueError(f"corpus index missing n={n}")
        total = len(generated) - n + 1
        if total < 1:
            continue
        novel = sum(
            1 for i in range(total) if generated[i : i + n] not in corpus_index[n]
        )
        out[n] = novel / total
    return out


@dataclass
class PairedEmbeddingSet:
    """Paired pooled embeddings of figures and their sketches."""

    figure_embs: Sequence
    sketch_embs: Sequence

    def local_vectors(self) -> np.ndarray:
        figs = np.stack([np.asarray(getattr(e, "values", e), dtype=float) for e in self.figure_embs])
        sks = np.stack([np.asarray(getattr(e, "values", e), dtype=float) for e in self.sketch_embs])
        if figs.shape != sks.shape:
            raise ValueError("figure and sketch embeddings must pair up")
        if figs.shape[0] < 2:
            raise ValueError("need at least two pairs")
        return figs - sks


def _global_vector(locals_: np.ndarray) -> np.ndarray:
    mean = locals_.mean(axis=0)
    centered = locals_ - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, float(np.abs(locals_).max())):
        raise DegeneratePcaError("all local vectors coincide after centering")
    component = vt[0]
    if float(component @ mean) < 0.0:
        component = -component
    return component


def congruence(set1: PairedEmbeddingSet, set2: PairedEmbeddingSet) -> float:
    """Cosine of the two sets' principal figure-minus-sketch directions.

    Each set's local vectors (figure minus sketch) are centered and reduced to
    their first principal component; the component's sign is fixed to align
    with the mean local vector before the cosine is taken.
    """
    g1 = _global_vector(set1.local_vectors())
    g2 = _global_vector(set2.local_vectors())
    if g1.shape != g2.shape:
        raise ValueError("embedding dimensions differ between sets")
    denom = float(np.linalg.norm(g1) * np.linalg.norm(g2))
    return float(np.clip(float(g1 @ g2) / denom, -1.0, 1.0))


def reward_trend(trace: SearchTrace) -> tuple[float, float]:
    """OLS slope and intercept of best-so-far reward against ln(time offset)."""
    xs = []
    ys = []
    best = -math.inf
    for ev in trace:
        best = max(best, ev.reward)
        if ev.t_offset_s > 0:
            xs.append(math.log(ev.t_offset_s))
            ys.append(best)
    if len(xs) < 2:
        raise ValueError("need at least two trace points with positive offsets")
    n = len(xs)
    sx = sum(xs)
    sy = sum(ys)
    sxx = sum(x * x for x in xs)
    sxy = sum(x * y for x, y in zip(xs, ys))
    denom = n * sxx - sx * sx
    if denom == 0.0:
        raise ValueError("time offsets are all identical")
    slope = (n * sxy - sx * sy) / denom
    intercept = (sy - slope * sx) / n
    return slope, intercept


# TeX token shapes: control sequences, alphanumeric runs, any other glyph.
_TEX_TOKEN_RE = re.compile(r"\\[a-zA-Z@]+|\\.|[A-Za-z0-9.]+|[^\sA-Za-z0-9\\]")


def tokenize_tex(text: str) -> list[str]:
    """Split program text into TeX-ish tokens; whitespace collapses away."""
    return _TEX_TOKEN_RE.findall(text)


def token_edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Plain Levenshtein distance over token sequences."""
    m, n = len(a), len(b)
    if m == 0:
        return n
    if n == 0:
        return m
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1),
            )
        prev = cur
    return prev[n]


def tex_edit_distance(a: str, b: str) -> float:
    """Token-level Levenshtein distance normalized by the longer token count.

    An approximation of extended-edit-distance program comparison (no jump
    operations); 0 iff the token streams match, 1 for fully disjoint streams
    of equal length. Lower is better.
    """
    ta = tokenize_tex(a)
    tb = tokenize_tex(b)
    if not ta and not tb:
        return 0.0
    return token_edit_distance(ta, tb) / max(len(ta), len(tb))


def load_annotations(path: str, delimiter: Optional[str] = None) -> list[AnnotationRecord]:
    """Read annotation rows (item_id, annotator_id, tuple_id, choice) with header."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        if delimiter is None:
            delimiter = "\t" if "\t" in sample.splitlines()[0] else ","
        reader = csv.DictReader(fh, delimiter=delimiter)
        required = {"item_id", "annotator_id", "tuple_id", "choice"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise ValueError(f"annotation file needs header columns {sorted(required)}")
        return [
            AnnotationRecord(
                item_id=row["item_id"],
                annotator_id=row["annotator_id"],
                tuple_id=row["tuple_id"],
                choice=row["choice"].strip().lower(),
            )
            for row in reader
        ]


def trace_efficiency_sample(trace: SearchTrace) -> EfficiencySample:
    """One run's efficiency sample: best-simulation tokens over total tokens.

    The trace records tokens generated per simulation; the final program's
    cost is read off the simulation that achieved the best reward (earliest
    on ties).
    """
    events = list(trace)
    if not events:
        raise ValueError("empty trace")
    best = max(events, key=lambda ev: (ev.reward, -ev.sim))
    total = sum(ev.tokens for ev in events)
    return EfficiencySample(final_tokens=max(1, best.tokens), total_tokens=max(1, total))
