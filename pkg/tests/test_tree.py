import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tikzsmith.errors import ContractViolationError, InvalidConfigError
from tikzsmith.harness import CompileOutcome, CompileStatus
from tikzsmith.tree import (
    ProgramState,
    Rollout,
    SearchNode,
    backpropagate,
    expand,
    select,
    uct_score,
)


def make_node(values, visits, parent_visits, backtracking=False):
    parent = SearchNode(state=ProgramState(()))
    parent.visits = parent_visits
    node = SearchNode(
        state=ProgramState(()) if backtracking else ProgramState(("x",)),
        is_backtracking=backtracking,
        parent=parent,
    )
    node.visits = visits
    node.values = list(values)
    parent.children.append(node)
    return node


# Frozen oracle values: direct evaluation of mean(V) + c*sqrt(ln(n_p)/n_i).
UCT_CASES = [
    ([0.5], 1, 2, 0.6, 0.9995327666946185),
    ([], 3, 10, 0.6, 0.5256521769756932),  # backtracking: exploitation 0
    ([0.9, 0.1], 2, 5, 0.6, 1.0382367733982303),
    ([-1.0, 1.0, 0.0], 3, 7, 0.6, 0.4832279150531741),
    ([0.25], 1, 1, 0.6, 0.25),
    ([0.7, 0.7, 0.7, 0.7], 4, 20, 1.414, 1.9236885964998156),
    ([-0.5], 1, 3, 0.1, -0.39518529260317947),
    ([1.0] * 10, 10, 100, 0.6, 1.4071684254649068),
    ([0.0], 1, 2, 2.0, 1.6651092223153954),
    ([0.3, -1.0], 2, 4, 0.6, 0.14953276669461862),
]


class TestUctScore:
    @pytest.mark.parametrize("values,visits,parent_visits,c,expected", UCT_CASES)
    def test_frozen_cases(self, values, visits, parent_visits, c, expected):
        node = make_node(values, visits, parent_visits, backtracking=not values)
        assert uct_score(node, c) == pytest.approx(expected, abs=1e-12)

    def test_unvisited_is_infinite(self):
        node = make_node([], 0, 5)
        assert uct_score(node, 0.6) == math.inf

    def test_invalid_c(self):
        node = make_node([0.5], 1, 2)
        with pytest.raises(InvalidConfigError):
            uct_score(node, 0.0)
        with pytest.raises(InvalidConfigError):
            uct_score(node, -1.0)

    def test_requires_parent(self):
        orphan = SearchNode(state=ProgramState(()))
        with pytest.raises(ContractViolationError):
            uct_score(orphan, 0.6)

    def test_requires_visited_parent(self):
        node = make_node([0.5], 1, 0)
        with pytest.raises(ContractViolationError):
            uct_score(node, 0.6)

    @given(
        mean_low=st.floats(-1, 1),
        delta=st.floats(0.001, 0.5),
        visits=st.integers(1, 50),
        parent_extra=st.integers(0, 100),
        c=st.floats(0.01, 3.0),
    )
    @settings(max_examples=300)
    def test_equal_visits_higher_mean_wins(self, mean_low, delta, visits, parent_extra, c):
        high = min(1.0, mean_low + delta)
        if high - mean_low < 1e-9:  # sub-ulp gaps drown in the shared bonus term
            return
        parent_visits = 2 * visits + parent_extra
        a = make_node([mean_low] * visits, visits, parent_visits)
        b = make_node([high] * visits, visits, parent_visits)
        assert uct_score(b, c) > uct_score(a, c)

    @given(
        value=st.floats(-1, 1),
        visits=st.integers(1, 50),
        extra=st.integers(1, 50),
        c=st.floats(0.01, 3.0),
    )
    @settings(max_examples=300)
    def test_equal_values_fewer_visits_wins(self, value, visits, extra, c):
        parent_visits = 2 * (visits + extra) + 1
        few = make_node([value] * visits, visits, parent_visits)
        many = make_node([value] * (visits + extra), visits + extra, parent_visits)
        assert uct_score(few, c) > uct_score(many, c)


def leafless(node):
    return not node.children


class TestSelect:
    def test_root_only(self):
        root = SearchNode(state=ProgramState(()))
        assert select(root, 0.6) == [root]

    def test_tie_breaks_to_lowest_index(self):
        root = SearchNode(state=ProgramState(()))
        root.visits = 9
        scores = [0.4, 0.9, 0.9]
        for i, mean in enumerate(scores):
            child = SearchNode(state=ProgramState((f"l{i}",)), parent=root)
            child.visits = 3
            child.values = [mean] * 3
            root.children.append(child)
        path = select(root, 0.6)
        assert path == [root, root.children[1]]

    def test_hand_built_two_level_tree(self):
        # Greedy UCT path computed by hand: child B wins level 1
        # (0.8 + 0.6*sqrt(ln 10 / 4) vs 0.5 + 0.6*sqrt(ln 10 / 5)), then its
        # second grandchild wins level 2 (0.9+e vs 0.2+e, equal visits).
        root = SearchNode(state=ProgramState(()))
        root.visits = 10
        a = SearchNode(state=ProgramState(("a",)), parent=root)
        a.visits, a.values = 5, [0.5] * 5
        b = SearchNode(state=ProgramState(("b",)), parent=root)
        b.visits, b.values = 4, [0.8] * 4
        root.children.extend([a, b])
        b1 = SearchNode(state=ProgramState(("b", "x")), parent=b)
        b1.visits, b1.values = 2, [0.2, 0.2]
        b2 = SearchNode(state=ProgramState(("b", "y")), parent=b)
        b2.visits, b2.values = 2, [0.9, 0.9]
        b.children.extend([b1, b2])
        assert select(root, 0.6) == [root, b, b2]

    def test_unvisited_child_selected_first(self):
        root = SearchNode(state=ProgramState(()))
        root.visits = 3
        seen = SearchNode(state=ProgramState(("a",)), parent=root)
        seen.visits, seen.values = 3, [1.0, 1.0, 1.0]
        fresh = SearchNode(state=ProgramState(("b",)), parent=root)
        root.children.extend([seen, fresh])
        assert select(root, 0.6)[-1] is fresh

    def test_argmax_invariant_under_affine_map_with_rescaling(self):
        def build(transform):
            root = SearchNode(state=ProgramState(()))
            root.visits = 12
            specs = [([0.1, 0.3, 0.2], 3), ([0.25, 0.28], 2), ([0.05, 0.4, 0.35, 0.1], 4)]
            for i, (vals, visits) in enumerate(specs):
                child = SearchNode(state=ProgramState((f"l{i}",)), parent=root)
                child.visits = visits
                child.values = [transform(v) for v in vals]
                root.children.append(child)
            return root

        plain = build(lambda v: v)
        mapped = build(lambda v: 0.5 * v + 0.2)  # strictly increasing affine
        pick_plain = select(plain, 0.6, rescale=True)[-1]
        pick_mapped = select(mapped, 0.6, rescale=True)[-1]
        assert plain.children.index(pick_plain) == mapped.children.index(pick_mapped)


def fatal_outcome(fatal_line):
    return CompileOutcome(
        status=CompileStatus.FATAL_FAILURE,
        artifact_produced=False,
        raster=None,
        log_text="! boom",
        fatal_line=fatal_line,
    )


def clean_outcome():
    return CompileOutcome(
        status=CompileStatus.CLEAN_SUCCESS,
        artifact_produced=True,
        raster=None,
        log_text="",
    )


def rollout_of(origin, total_lines, outcome=None):
    lines = origin.lines + tuple(f"line{i}" for i in range(origin.depth, total_lines))
    return Rollout(origin_state=origin, lines=lines, outcome=outcome)


class TestExpand:
    def test_sqrt_count_nine_available(self):
        leaf = SearchNode(state=ProgramState(("l0",)))
        chain = expand(leaf, rollout_of(leaf.state, 10, clean_outcome()))
        assert len(chain) == 3  # floor(sqrt(10 - 1))
        assert chain[0].parent is leaf
        assert chain[1].parent is chain[0]
        assert chain[2].parent is chain[1]
        for i, node in enumerate(chain, start=2):
            assert node.state.depth == i

    def test_single_node_when_one_available(self):
        leaf = SearchNode(state=ProgramState(tuple(f"line{i}" for i in range(4))))
        chain = expand(leaf, rollout_of(leaf.state, 5, clean_outcome()))
        assert len(chain) == 1

    def test_no_lines_available_adds_nothing(self):
        leaf = SearchNode(state=ProgramState(("a",)))
        rollout = Rollout(origin_state=leaf.state, lines=leaf.state.lines, outcome=clean_outcome())
        assert expand(leaf, rollout) == []
        assert leaf.children == []

    def test_rollout_shorter_than_leaf_is_error(self):
        leaf = SearchNode(state=ProgramState(("a", "b")))
        rollout = Rollout(origin_state=ProgramState(("a",)), lines=("a",))
        with pytest.raises(ContractViolationError):
            expand(leaf, rollout)

    def test_backtracking_siblings_added(self):
        leaf = SearchNode(state=ProgramState(()))
        chain = expand(leaf, rollout_of(leaf.state, 9, clean_outcome()))
        assert len(chain) == 3
        assert any(c.is_backtracking for c in leaf.children)
        for node in chain[:-1]:
            assert any(c.is_backtracking for c in node.children)
        for node in chain:
            assert not node.is_backtracking
        # the backtracking sibling mirrors its parent
        bt = next(c for c in leaf.children if c.is_backtracking)
        assert bt.state == leaf.state
        assert bt.children == []

    def test_merges_into_existing_sibling(self):
        root = SearchNode(state=ProgramState(()))
        first = expand(root, Rollout(origin_state=root.state, lines=("a",), outcome=clean_outcome()))
        assert len(first) == 1
        bt = next(c for c in root.children if c.is_backtracking)
        # expanding the backtracking leaf with a rollout repeating "a" merges
        again = expand(bt, Rollout(origin_state=root.state, lines=("a", "b"), outcome=clean_outcome()))
        non_bt = [c for c in root.children if not c.is_backtracking]
        assert len(non_bt) == 1
        assert again[0] is first[0]
        assert bt.children == []  # backtracking node remains a leaf
        # at most one backtracking child per parent
        assert sum(1 for c in root.children if c.is_backtracking) == 1

    def test_backtracking_expansion_attaches_to_parent(self):
        root = SearchNode(state=ProgramState(()))
        expand(root, Rollout(origin_state=root.state, lines=("a",), outcome=clean_outcome()))
        bt = next(c for c in root.children if c.is_backtracking)
        chain = expand(bt, Rollout(origin_state=root.state, lines=("z", "w"), outcome=clean_outcome()))
        assert chain[0].parent is root
        assert chain[0].state.lines == ("z",)
        assert bt.children == []

    def test_fatal_line_truncates_chain(self):
        leaf = SearchNode(state=ProgramState(()))
        rollout = Rollout(
            origin_state=leaf.state,
            lines=tuple(f"line{i}" for i in range(16)),
            outcome=fatal_outcome(fatal_line=3),
        )
        chain = expand(leaf, rollout)  # sqrt(16)=4 candidates, fatal at line 3
        assert len(chain) == 2
        assert all(node.state.depth < 3 for node in chain)

    def test_fatal_at_first_new_line_adds_nothing(self):
        leaf = SearchNode(state=ProgramState(("keep",)))
        rollout = Rollout(
            origin_state=leaf.state,
            lines=("keep", "bad", "more", "more2"),
            outcome=fatal_outcome(fatal_line=2),
        )
        assert expand(leaf, rollout) == []


class TestBackpropagate:
    def test_path_of_normal_nodes(self):
        a = SearchNode(state=ProgramState(()))
        b = SearchNode(state=ProgramState(("x",)), parent=a)
        c = SearchNode(state=ProgramState(("x", "y")), parent=b)
        backpropagate([a, b, c], [], 0.7)
        for node in (a, b, c):
            assert node.visits == 1
            assert node.values == [0.7]

    def test_backtracking_node_gets_visit_only(self):
        a = SearchNode(state=ProgramState(()))
        bt = SearchNode(state=ProgramState(()), is_backtracking=True, parent=a)
        backpropagate([a, bt], [], 0.5)
        assert bt.visits == 1
        assert bt.values == []
        assert a.values == [0.5]

    def test_successive_values_append(self):
        root = SearchNode(state=ProgramState(()))
        backpropagate([root], [], 0.2)
        backpropagate([root], [], 0.8)
        assert root.values == [0.2, 0.8]
        assert root.visits == 2

    def test_chain_nodes_included(self):
        root = SearchNode(state=ProgramState(()))
        chain = expand(root, rollout_of(root.state, 4, clean_outcome()))
        backpropagate([root], chain, 0.3)
        assert root.values == [0.3]
        for node in chain:
            assert node.values == [0.3]
            assert node.visits == 1
        bt = next(c for c in root.children if c.is_backtracking)
        assert bt.visits == 0  # fresh sibling not on the credited path

    def test_value_out_of_range_rejected(self):
        root = SearchNode(state=ProgramState(()))
        with pytest.raises(ContractViolationError):
            backpropagate([root], [], 1.5)
        with pytest.raises(ContractViolationError):
            backpropagate([root], [], float("nan"))


def walk(node):
    yield node
    for child in node.children:
        yield from walk(child)


def assert_tree_invariants(root):
    for node in walk(root):
        if node.is_backtracking:
            assert node.children == [], "backtracking node must stay a leaf"
            assert node.values == [], "backtracking node never holds values"
            assert node.parent is not None and node.state == node.parent.state
        elif node.parent is not None:
            assert node.state.depth == node.parent.state.depth + 1
            assert node.state.lines[: node.parent.state.depth] == node.parent.state.lines
        if not node.is_backtracking:
            assert len(node.values) <= node.visits
        seen = set()
        for child in node.children:
            key = (child.state.lines, child.is_backtracking)
            assert key not in seen, "duplicate (state, flag) sibling"
            seen.add(key)
