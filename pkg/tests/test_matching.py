import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from budgetseg.matching import (
    Assignment,
    InfeasibleMatchingError,
    brute_force_assignment,
    hungarian,
    masked_hungarian,
    siou,
    siou_cost_matrix,
)


class TestSiou:
    def test_identical_binary_masks(self):
        y = np.zeros((6, 6))
        y[2:4, 2:5] = 1.0
        assert siou(y, y) == 1.0

    def test_disjoint_supports(self):
        p = np.array([1.0, 1.0, 0.0, 0.0])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        assert siou(p, y) == 0.0

    def test_soft_example(self):
        # I = 1, U = 2 + 2 - 1 = 3
        p = np.full(4, 0.5)
        y = np.array([1.0, 1.0, 0.0, 0.0])
        assert siou(p, y) == pytest.approx(1.0 / 3.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            siou(np.zeros(3), np.zeros(4))

    def test_both_empty(self):
        with pytest.raises(ValueError):
            siou(np.zeros(4), np.zeros(4))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            siou(np.array([1.5]), np.array([1.0]))
        with pytest.raises(ValueError):
            siou(np.array([0.5]), np.array([0.3]))

    @given(st.integers(0, 2**32 - 1))
    def test_binary_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.random(16) < 0.5).astype(float)
        b = (rng.random(16) < 0.5).astype(float)
        if a.sum() + b.sum() == 0:
            return
        assert siou(a, b) == pytest.approx(siou(b, a))
        assert 0.0 <= siou(a, b) <= 1.0

    def test_soft_strictly_below_one(self):
        rng = np.random.default_rng(0)
        y = (rng.random(20) < 0.5).astype(float)
        y[0] = 1.0
        p = np.clip(rng.random(20), 0.01, 0.99)
        assert siou(p, y) < 1.0

    def test_cost_matrix_matches_pairwise(self):
        rng = np.random.default_rng(1)
        preds = rng.random((3, 5, 5))
        gts = (rng.random((2, 5, 5)) < 0.5).astype(float)
        gts[:, 0, 0] = 1.0
        costs = siou_cost_matrix(preds, gts)
        for i in range(3):
            for j in range(2):
                assert costs[i, j] == pytest.approx(1.0 - siou(preds[i], gts[j]))


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian(np.array([[1.0, 2.0], [3.0, 1.0]]))
        assert a.pairs == ((0, 0), (1, 1))
        assert a.total_cost == 2.0

    def test_identity_costs(self):
        c = 1.0 - np.eye(4)
        a = hungarian(c)
        assert a.pairs == tuple((i, i) for i in range(4))
        assert a.total_cost == 0.0

    def test_single_entry(self):
        a = hungarian(np.array([[5.0]]))
        assert a.pairs == ((0, 0),)
        assert a.total_cost == 5.0

    def test_empty_matrix(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((0, 3)))

    def test_rectangular_rows_exceed_cols(self):
        c = np.array([[10.0, 1.0], [1.0, 10.0], [5.0, 5.0]])
        a = hungarian(c)
        assert len(a.pairs) == 2
        assert a.total_cost == 2.0
        assert a.unmatched_rows == (2,)

    def test_rectangular_cols_exceed_rows(self):
        c = np.array([[10.0, 1.0, 3.0]])
        a = hungarian(c)
        assert a.pairs == ((0, 1),)
        assert a.unmatched_cols == (0, 2)

    def test_matches_brute_force_on_random(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(1, 7))
            m = int(rng.integers(1, 7))
            c = rng.random((n, m))
            assert hungarian(c).total_cost == pytest.approx(
                brute_force_assignment(c).total_cost, abs=1e-12
            )

    @given(st.integers(0, 2**32 - 1), st.floats(-5.0, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_row_constant_shift(self, seed, shift):
        rng = np.random.default_rng(seed)
        c = rng.random((4, 4))
        base = hungarian(c)
        shifted = c.copy()
        shifted[2] += shift
        moved = hungarian(shifted)
        assert moved.total_cost == pytest.approx(base.total_cost + shift)
        assert moved.pairs == base.pairs  # random entries are tie-free

    def test_optimal_below_every_permutation(self):
        import itertools

        rng = np.random.default_rng(7)
        c = rng.random((5, 5))
        best = hungarian(c).total_cost
        for perm in itertools.permutations(range(5)):
            assert best <= sum(c[i, perm[i]] for i in range(5)) + 1e-12


class TestMaskedHungarian:
    def test_forced_cross_pairing(self):
        c = np.array([[0.1, 0.9], [0.2, 0.8]])
        a = masked_hungarian(c, row_classes=[1, 2], col_classes=[2, 1])
        assert a.pairs == ((0, 1), (1, 0))

    def test_single_class_equals_plain(self):
        rng = np.random.default_rng(3)
        c = rng.random((5, 5))
        masked = masked_hungarian(c, [1] * 5, [1] * 5)
        plain = hungarian(c)
        assert masked.total_cost == pytest.approx(plain.total_cost)

    def test_matches_constrained_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            classes = rng.integers(1, 4, size=6)
            cols = rng.permutation(classes)
            c = rng.random((6, 6))
            got = masked_hungarian(c, classes.tolist(), cols.tolist())
            ref = brute_force_assignment(c, classes.tolist(), cols.tolist())
            assert got.total_cost == pytest.approx(ref.total_cost, abs=1e-12)

    def test_unbalanced_counts_match_partially(self):
        c = np.array([[0.5, 0.2], [0.1, 0.9]])
        a = masked_hungarian(c, [1, 1], [1, 2])
        assert len(a.pairs) == 1
        assert a.pairs[0][1] == 0
        assert a.unmatched_cols == (1,)

    def test_infeasible_class_raises(self):
        c = np.ones((2, 2))
        with pytest.raises(InfeasibleMatchingError):
            masked_hungarian(c, [1, 2], [1, 1])

    def test_decomposition_agrees_with_per_class_solutions(self):
        rng = np.random.default_rng(5)
        rows = [1, 1, 2, 2, 3]
        cols = [3, 2, 1, 2, 1]
        c = rng.random((5, 5))
        combined = masked_hungarian(c, rows, cols)
        total = 0.0
        for cls in {1, 2, 3}:
            ri = [i for i, x in enumerate(rows) if x == cls]
            ci = [j for j, x in enumerate(cols) if x == cls]
            total += hungarian(c[np.ix_(ri, ci)]).total_cost
        assert combined.total_cost == pytest.approx(total)


class TestBruteForce:
    def test_single_entry(self):
        assert brute_force_assignment(np.array([[5.0]])).total_cost == 5.0

    def test_tie_breaks_lexicographically(self):
        c = np.ones((2, 2))
        assert brute_force_assignment(c).pairs == ((0, 0), (1, 1))

    def test_size_guard(self):
        with pytest.raises(ValueError):
            brute_force_assignment(np.ones((9, 9)))

    def test_infeasible_classes(self):
        with pytest.raises(InfeasibleMatchingError):
            brute_force_assignment(np.ones((1, 1)), [1], [2])

    def test_rows_exceed_cols(self):
        c = np.array([[3.0], [1.0]])
        a = brute_force_assignment(c)
        assert a.pairs == ((1, 0),)
        assert a.unmatched_rows == (0,)
