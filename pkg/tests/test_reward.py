import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tikzsmith.embed import Embedding, PatchEmbeddings
from tikzsmith.errors import DegenerateEmbeddingError
from tikzsmith.harness import CompileOutcome, CompileStatus
from tikzsmith.reward import (
    diagnostics_reward,
    emd_distance,
    emd_reward,
    rescale_values,
    selfsim,
)


def outcome_with(status):
    return CompileOutcome(
        status=status,
        artifact_produced=status is not CompileStatus.FATAL_FAILURE,
        raster=None,
        log_text="",
    )


class TestDiagnosticsReward:
    def test_exhaustive_mapping(self):
        expected = {
            CompileStatus.CLEAN_SUCCESS: 1.0,
            CompileStatus.RECOVERABLE_ERRORS: 0.0,
            CompileStatus.FATAL_FAILURE: -1.0,
        }
        assert set(expected) == set(CompileStatus)
        for status, value in expected.items():
            rv = diagnostics_reward(outcome_with(status))
            assert rv.value == value
            assert rv.kind == "diagnostics"


def emb(vec):
    arr = np.asarray(vec, dtype=float)
    return Embedding(values=arr, dim=arr.shape[0])


class TestSelfSim:
    def test_identical_embeddings(self):
        assert selfsim(emb([1.0, 2.0, 3.0]), emb([1.0, 2.0, 3.0])).value == pytest.approx(1.0)

    def test_orthogonal_embeddings(self):
        assert selfsim(emb([1.0, 0.0]), emb([0.0, 1.0])).value == pytest.approx(0.0)

    def test_missing_output_is_failure(self):
        assert selfsim(emb([1.0, 0.0]), None).value == -1.0

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateEmbeddingError):
            selfsim(emb([1.0, 0.0]), emb([0.0, 0.0]))

    @given(
        vec=st.lists(st.floats(-5, 5), min_size=2, max_size=6),
        other=st.lists(st.floats(-5, 5), min_size=2, max_size=6),
        scale=st.floats(0.01, 100.0),
    )
    @settings(max_examples=200)
    def test_symmetry_and_scale_invariance(self, vec, other, scale):
        n = min(len(vec), len(other))
        u, v = np.array(vec[:n]), np.array(other[:n])
        if np.linalg.norm(u) < 1e-9 or np.linalg.norm(v) < 1e-9:
            return
        ab = selfsim(emb(u), emb(v)).value
        ba = selfsim(emb(v), emb(u)).value
        scaled = selfsim(emb(u * scale), emb(v)).value
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab == pytest.approx(scaled, abs=1e-9)
        assert -1.0 <= ab <= 1.0


class TestRescaleValues:
    def test_mixed_example(self):
        assert rescale_values([0.2, 0.5, -1, 0.8]) == pytest.approx([0.0, 0.5, -1.0, 1.0])

    def test_all_equal_maps_to_zero(self):
        assert rescale_values([0.4, 0.4]) == [0.0, 0.0]

    def test_all_failures_stay(self):
        assert rescale_values([-1.0, -1.0]) == [-1.0, -1.0]

    def test_empty(self):
        assert rescale_values([]) == []

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=30))
    @settings(max_examples=500)
    def test_output_range(self, values):
        out = rescale_values(values)
        for v in out:
            assert v == -1.0 or 0.0 <= v <= 1.0

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=30))
    @settings(max_examples=500)
    def test_preserves_order_of_non_failures(self, values):
        out = rescale_values(values)
        pairs = [(v, o) for v, o in zip(values, out) if v != -1.0]
        for (v1, o1), (v2, o2) in itertools.combinations(pairs, 2):
            if v1 < v2:
                assert o1 <= o2
            if v1 == v2:
                assert o1 == o2

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=30))
    @settings(max_examples=500)
    def test_idempotent_on_own_output(self, values):
        non_failure = [v for v in values if v != -1.0]
        if len(set(non_failure)) < 2:
            return
        once = rescale_values(values)
        assert rescale_values(once) == pytest.approx(once, abs=1e-12)

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=30))
    @settings(max_examples=300)
    def test_max_is_one_with_two_distinct(self, values):
        non_failure = [v for v in values if v != -1.0]
        if len(set(non_failure)) < 2:
            return
        out = rescale_values(values)
        assert max(out) == pytest.approx(1.0)


def patches(matrix, layer=None):
    return PatchEmbeddings(patches=np.asarray(matrix, dtype=float), layer_index=layer)


class TestEmdReward:
    def test_identical_patches_score_one(self):
        x = patches([[1.0, 0.0, 2.0], [0.5, 1.5, -0.5]])
        assert emd_reward(x, x).value == pytest.approx(1.0, abs=1e-9)

    def test_missing_output_is_failure(self):
        x = patches([[1.0, 0.0]])
        assert emd_reward(x, None).value == -1.0

    def test_reward_decreases_with_distance(self):
        x = patches([[1.0, 0.0]])
        near = patches([[0.9, 0.1]])
        far = patches([[-1.0, 0.05]])
        r_near = emd_reward(x, near).value
        r_far = emd_reward(x, far).value
        assert r_near > r_far
        assert -1.0 < r_far < r_near <= 1.0

    def test_two_by_two_hand_instance(self):
        # Orthogonal unit patches make the cosine-distance matrix explicit:
        # D = [[0, 1], [1, 0]] between x and itself, so the optimal flow is
        # the diagonal with cost 0; against swapped y the optimal cost is 0
        # too (flow crosses). A quarter-rotated y forces cost 1 - cos(45deg).
        e1, e2 = [1.0, 0.0], [0.0, 1.0]
        x = patches([e1, e2])
        y_swapped = patches([e2, e1])
        assert emd_reward(x, y_swapped).value == pytest.approx(1.0, abs=1e-9)
        s = math.sqrt(0.5)
        y_rot = patches([[s, s], [-s, s]])
        problem = emd_distance(x, y_rot)
        # every pairing costs exactly 1 - s or 1 + s; optimum pairs the near ones
        assert problem.cost == pytest.approx(1 - s, abs=1e-9)
        expected = 2 * math.tanh(-(1 - s)) + 1
        assert emd_reward(x, y_rot).value == pytest.approx(expected, abs=1e-9)

    def test_flow_marginals(self):
        rng = np.random.default_rng(5)
        x = patches(rng.normal(size=(3, 4)))
        y = patches(rng.normal(size=(4, 4)))
        problem = emd_distance(x, y)
        assert np.allclose(problem.flow.sum(axis=1), 1 / 3, atol=1e-9)
        assert np.allclose(problem.flow.sum(axis=0), 1 / 4, atol=1e-9)
        assert (problem.flow >= 0).all()

    def test_zero_norm_patch_rejected(self):
        x = patches([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateEmbeddingError):
            emd_reward(x, x)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60)
    def test_reward_bounds_random(self, seed):
        rng = np.random.default_rng(seed)
        x = patches(rng.normal(size=(rng.integers(1, 5), 3)) + 0.01)
        y = patches(rng.normal(size=(rng.integers(1, 5), 3)) + 0.01)
        value = emd_reward(x, y).value
        assert -1.0 < value <= 1.0
