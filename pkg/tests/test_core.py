"""Domain-type contracts: confusion counting, pool partition, label trees."""

import numpy as np
import pytest

from activepool.core import (
    NA,
    NEG,
    POS,
    Dataset,
    LabelTree,
    Pool,
    build_confusion_matrix,
    derive_hier_label,
    hier_state_matrix,
)


def make_dataset(n=10, d=3, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        name="toy",
        features=rng.random((n, d)),
        labels=rng.integers(0, classes, size=n),
        class_count=classes,
    )


class TestConfusionMatrix:
    def test_perfect_predictions_are_diagonal(self):
        counts = build_confusion_matrix([(0, 0), (1, 1)], class_count=2)
        np.testing.assert_array_equal(counts, np.eye(2, dtype=np.int64))

    def test_empty_input_is_a_zero_matrix(self):
        counts = build_confusion_matrix([], class_count=3)
        np.testing.assert_array_equal(counts, np.zeros((3, 3), dtype=np.int64))

    def test_counts_match_a_brute_force_tally(self):
        pairs = [(0, 1), (0, 1), (1, 0)]
        counts = build_confusion_matrix(pairs, class_count=2)
        np.testing.assert_array_equal(counts, [[0, 2], [1, 0]])
        # Independent tally, pair by pair.
        tally = np.zeros((2, 2), dtype=int)
        for t, p in pairs:
            tally[t][p] += 1
        np.testing.assert_array_equal(counts, tally)

    def test_random_pairs_total_and_row_sums(self):
        rng = np.random.default_rng(7)
        true = rng.integers(0, 4, size=500)
        pred = rng.integers(0, 4, size=500)
        counts = build_confusion_matrix(np.column_stack([true, pred]), 4)
        assert counts.sum() == 500
        np.testing.assert_array_equal(counts.sum(axis=1), np.bincount(true, minlength=4))

    def test_out_of_range_class_raises(self):
        with pytest.raises(ValueError):
            build_confusion_matrix([(0, 2)], class_count=2)


class TestPool:
    def test_partition_holds_through_mutation(self):
        pool = Pool(make_dataset(n=20), labelled=[0, 1, 2])
        rng = np.random.default_rng(3)
        for _ in range(5):
            batch = rng.choice(pool.unlabelled_array(), size=2, replace=False)
            pool.acquire(batch)
            assert pool.labelled.isdisjoint(pool.unlabelled)
            assert len(pool.labelled) + len(pool.unlabelled) == 20
        assert len(pool.labelled) == 13

    def test_acquiring_a_labelled_id_raises(self):
        pool = Pool(make_dataset(), labelled=[0])
        with pytest.raises(ValueError):
            pool.acquire([0])

    def test_ids_outside_dataset_rejected(self):
        with pytest.raises(ValueError):
            Pool(make_dataset(n=5), labelled=[99])

    def test_sorted_array_views(self):
        pool = Pool(make_dataset(n=6), labelled=[4, 1])
        np.testing.assert_array_equal(pool.labelled_array(), [1, 4])
        np.testing.assert_array_equal(pool.unlabelled_array(), [0, 2, 3, 5])


def hand_tree():
    """Three levels of hand poses: the gesture-style hierarchy."""
    return LabelTree(
        level_names=[
            ["Hand", "NoHand"],
            ["FistThumb", "FlatHand", "None"],
            ["FistThumbLeft", "FistThumbRight", "FlatSpread", "NoSub"],
        ],
        parents=[
            [],
            [0, 0, 1],      # FistThumb, FlatHand under Hand; None under NoHand
            [0, 0, 1, 2],   # subclasses under FistThumb, FlatHand, None
        ],
    )


class TestLabelTree:
    def test_flat_one_level_tree_reduces_to_pos_vs_neg(self):
        tree = LabelTree(level_names=[["A", "B"]])
        np.testing.assert_array_equal(derive_hier_label(tree, [0]), [POS, NEG])

    def test_three_level_path_states(self):
        tree = hand_tree()
        states = derive_hier_label(tree, [0, 0, 0])  # Hand -> FistThumb -> Left
        # Path nodes POS; their siblings NEG; subtrees of other branches NA.
        expected = {
            "Hand": POS, "NoHand": NEG,
            "FistThumb": POS, "FlatHand": NEG, "None": NA,
            "FistThumbLeft": POS, "FistThumbRight": NEG,
            "FlatSpread": NA, "NoSub": NA,
        }
        for lvl, names in enumerate(tree.level_names):
            for j, name in enumerate(names):
                assert states[tree.flat_index(lvl, j)] == expected[name], name

    def test_node_under_negative_parent_is_na(self):
        tree = LabelTree(
            level_names=[["A", "B"], ["A1", "A2", "B1"]],
            parents=[[], [0, 0, 1]],
        )
        states = derive_hier_label(tree, [0, 1])  # A -> A2
        # Hand-applied rule: B1 descends from the NEG node B, hence NA.
        np.testing.assert_array_equal(states, [POS, NEG, NEG, POS, NA])

    def test_broken_parent_chain_raises(self):
        tree = hand_tree()
        with pytest.raises(ValueError):
            derive_hier_label(tree, [1, 0, 0])  # FistThumb is not under NoHand

    def test_random_trees_pos_and_na_rules(self):
        # Rule, restated independently: a node is POS iff it lies on the
        # path, NEG iff its parent does (top level counts as having a POS
        # parent), NA otherwise.
        rng = np.random.default_rng(11)
        for _ in range(25):
            widths = [int(rng.integers(1, 4))]
            parents = [[]]
            for _ in range(int(rng.integers(1, 3))):
                width = int(rng.integers(1, 5))
                parents.append(list(rng.integers(0, widths[-1], size=width)))
                widths.append(width)
            tree = LabelTree(
                level_names=[[f"n{l}_{j}" for j in range(w)] for l, w in enumerate(widths)],
                parents=parents,
            )
            path = [int(rng.integers(0, widths[0]))]
            ok = True
            for lvl in range(1, tree.num_levels):
                kids = tree.children(lvl - 1, path[-1])
                if not kids:
                    ok = False
                    break
                path.append(int(rng.choice(kids)))
            if not ok:
                continue
            states = derive_hier_label(tree, path)
            for lvl in range(tree.num_levels):
                on_path = np.zeros(tree.level_width(lvl), dtype=bool)
                on_path[path[lvl]] = True
                for j in range(tree.level_width(lvl)):
                    parent_pos = lvl == 0 or tree.parents[lvl][j] == path[lvl - 1]
                    want = POS if on_path[j] else (NEG if parent_pos else NA)
                    assert states[tree.flat_index(lvl, j)] == want
                assert (states[tree.level_slice(lvl)] == POS).sum() == 1

    def test_state_matrix_stacks_rows(self):
        tree = hand_tree()
        paths = np.array([[0, 0, 0], [1, 2, 3]])
        mat = hier_state_matrix(tree, paths)
        assert mat.shape == (2, tree.total_nodes)
        np.testing.assert_array_equal(mat[0], derive_hier_label(tree, [0, 0, 0]))
        np.testing.assert_array_equal(mat[1], derive_hier_label(tree, [1, 2, 3]))


class TestDataset:
    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            Dataset("bad", np.zeros((2, 2)), np.array([0, 5]), class_count=2)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Dataset("bad", np.zeros((3, 2)), np.array([0, 1]), class_count=2)

    def test_hier_labels_validated_against_tree(self):
        tree = hand_tree()
        good = Dataset("h", np.zeros((1, 2)), np.array([[0, 0, 1]]), 4, label_tree=tree)
        assert good.flat_labels()[0] == 1
        with pytest.raises(ValueError):
            Dataset("h", np.zeros((1, 2)), np.array([[1, 0, 0]]), 4, label_tree=tree)
