import math

import numpy as np
import pytest

from permrank import (
    coverage_matrix,
    cyclic_design,
    pruned_cyclic_design,
    random_design,
    variable_pruned_design,
)
from permrank.permute import DesignStrategy, PermutationDesign
from permrank.core import Permutation

from conftest import make_pair


def closed_form_prefix(n, length, k):
    """Independent oracle: the non-wrapped/wrapped prefix formulas."""
    if k <= n - length:
        return tuple(range(k, k + length))
    return tuple(range(k, n + 1)) + tuple(range(1, k + length - n))


class TestRandomDesign:
    def test_default_size_is_3n(self):
        d = random_design(4, seed=7)
        assert len(d) == 12
        assert all(len(p.indices) == 4 for p in d)
        assert len({p.indices for p in d}) == 12

    def test_cap_at_factorial(self):
        d = random_design(3, seed=0)
        assert len(d) == 6  # min(9, 3!) covers the whole universe
        assert {p.indices for p in d} == {
            (1, 2, 3), (1, 3, 2), (2, 1, 3), (2, 3, 1), (3, 1, 2), (3, 2, 1)
        }

    def test_n_equals_one(self):
        d = random_design(1, seed=0)
        assert [p.indices for p in d] == [(1,)]

    def test_explicit_m(self):
        d = random_design(5, m=4, seed=1)
        assert len(d) == 4

    def test_determinism(self):
        d1 = random_design(6, seed=99)
        d2 = random_design(6, seed=99)
        assert [p.indices for p in d1] == [p.indices for p in d2]

    def test_distinct_seeds_give_distinct_designs(self):
        # 100 seed pairs on n=4, m=3n; zero collisions allowed
        collisions = 0
        for s in range(100):
            a = tuple(p.indices for p in random_design(4, seed=2 * s))
            b = tuple(p.indices for p in random_design(4, seed=2 * s + 1))
            collisions += int(a == b)
        assert collisions == 0

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            random_design(0)
        with pytest.raises(ValueError):
            random_design(3, m=0)


class TestCyclicDesign:
    def test_rotation_formula_n5(self):
        d = cyclic_design(5)
        assert d.permutations[2].indices == (3, 4, 5, 1, 2)

    def test_n1(self):
        assert [p.indices for p in cyclic_design(1)] == [(1,)]

    def test_n3_full_set(self):
        assert [p.indices for p in cyclic_design(3)] == [(1, 2, 3), (2, 3, 1), (3, 1, 2)]

    def test_coverage_all_ones_for_all_n(self):
        for n in range(1, 11):
            assert (coverage_matrix(cyclic_design(n)) == 1).all()


class TestPrunedCyclicDesign:
    def test_wrapped_example(self):
        d = pruned_cyclic_design(5, 3)
        assert d.permutations[3].indices == (4, 5, 1)

    def test_nonwrapped_example(self):
        d = pruned_cyclic_design(5, 3)
        assert d.permutations[0].indices == (1, 2, 3)

    def test_length_n_equals_cyclic(self):
        for n in (1, 3, 6):
            assert [p.indices for p in pruned_cyclic_design(n, n)] == [
                p.indices for p in cyclic_design(n)
            ]

    def test_length_out_of_range(self):
        with pytest.raises(ValueError, match="L out of range"):
            pruned_cyclic_design(4, 5)
        with pytest.raises(ValueError, match="L out of range"):
            pruned_cyclic_design(4, 0)

    def test_matches_closed_form_for_all_small_cases(self):
        for n in range(1, 9):
            for length in range(1, n + 1):
                d = pruned_cyclic_design(n, length)
                for k in range(1, n + 1):
                    assert d.permutations[k - 1].indices == closed_form_prefix(n, length, k)

    def test_prefix_of_cyclic(self):
        for n in range(1, 9):
            full = cyclic_design(n)
            for length in range(1, n + 1):
                pruned = pruned_cyclic_design(n, length)
                for fp, pp in zip(full, pruned):
                    assert pp.indices == fp.indices[:length]

    def test_position_one_column_all_ones(self):
        for n in (2, 4, 7):
            for length in range(1, n + 1):
                cov = coverage_matrix(pruned_cyclic_design(n, length))
                assert (cov[:, 0] == 1).all()
                assert all(len(p.indices) == length for p in pruned_cyclic_design(n, length))


class TestVariablePrunedDesign:
    def test_tau_one_gives_full_cyclic(self):
        _, rl = make_pair(5, with_scores=True)
        d = variable_pruned_design(rl, 1.0)
        assert [p.indices for p in d] == [p.indices for p in cyclic_design(5)]

    def test_uniform_scores(self):
        _, rl = make_pair(5, scores=[1.0] * 5)
        d = variable_pruned_design(rl, 0.6)
        assert all(len(p.indices) == 3 for p in d)  # ceil(0.6 * 5) equal shares

    def test_skewed_scores_hand_computed(self):
        # scores (10,1,1,1,1), tau=0.7, total=14, threshold 9.8:
        # k=1 reaches it immediately (clamped up to 2); others need the big
        # score back, lengths derived by cumulative-mass hand arithmetic.
        _, rl = make_pair(5, scores=[10.0, 1.0, 1.0, 1.0, 1.0])
        d = variable_pruned_design(rl, 0.7)
        assert [len(p.indices) for p in d] == [2, 5, 4, 3, 2]

    def test_clamp_lower_bound_two(self):
        _, rl = make_pair(3, scores=[100.0, 1.0, 1.0])
        d = variable_pruned_design(rl, 0.5)
        assert all(len(p.indices) >= 2 for p in d)

    def test_single_passage_clamps_to_one(self):
        _, rl = make_pair(1, with_scores=True)
        d = variable_pruned_design(rl, 0.5)
        assert [p.indices for p in d] == [(1,)]

    def test_missing_scores(self):
        _, rl = make_pair(3)
        with pytest.raises(ValueError, match="missing a retriever score"):
            variable_pruned_design(rl, 0.5)

    def test_tau_range(self):
        _, rl = make_pair(3, with_scores=True)
        for tau in (0.0, 1.5, -0.1):
            with pytest.raises(ValueError):
                variable_pruned_design(rl, tau)


class TestCoverageMatrix:
    def test_cyclic_four_all_ones(self):
        assert (coverage_matrix(cyclic_design(4)) == np.ones((4, 4), dtype=int)).all()

    def test_single_identity_permutation(self):
        d = PermutationDesign(
            (Permutation((1, 2, 3)),), DesignStrategy.RANDOM, 3, seed=0
        )
        assert (coverage_matrix(d) == np.eye(3, dtype=int)).all()

    def test_pruned_rows_sum_to_length(self):
        # enumerating the three length-2 prefixes of n=3 by hand:
        # (1,2), (2,3), (3,1) -> every passage appears exactly twice
        cov = coverage_matrix(pruned_cyclic_design(3, 2))
        assert cov.sum(axis=1).tolist() == [2, 2, 2]


class TestDesignValidation:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            PermutationDesign(
                (Permutation((1, 2)), Permutation((1, 2))), DesignStrategy.RANDOM, 2
            )

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="exceeds"):
            PermutationDesign((Permutation((1, 3)),), DesignStrategy.RANDOM, 2)

    def test_cap_cardinality_never_exceeds_factorial(self):
        for n in (1, 2, 3, 4):
            assert len(random_design(n, m=1000, seed=0)) == math.factorial(n)
