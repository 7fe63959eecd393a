import pytest
from hypothesis import given
from hypothesis import strategies as st

from permrank import (
    Passage,
    Permutation,
    Query,
    Ranking,
    RetrievalList,
    apply_permutation,
    validate_retrieval_list,
)
from permrank.core import require_valid, stable_seed

from conftest import make_pair


class TestApplyPermutation:
    def test_identity_returns_input_order(self):
        for n in range(1, 7):
            _, rl = make_pair(n)
            out = apply_permutation(rl, Permutation(tuple(range(1, n + 1))))
            assert out == rl.passages

    def test_cyclic_rotation_example(self):
        _, rl = make_pair(5)
        out = apply_permutation(rl, Permutation((3, 4, 5, 1, 2)))
        assert [p.retriever_rank for p in out] == [3, 4, 5, 1, 2]

    def test_pruned_example(self):
        _, rl = make_pair(5)
        out = apply_permutation(rl, Permutation((4, 5, 1)))
        assert [p.retriever_rank for p in out] == [4, 5, 1]

    def test_out_of_range_index(self):
        _, rl = make_pair(3)
        with pytest.raises(ValueError, match="out of range"):
            apply_permutation(rl, Permutation((1, 4)))

    def test_duplicate_index_rejected_at_construction(self):
        with pytest.raises(ValueError, match="duplicate"):
            Permutation((1, 1, 2))

    @given(st.integers(min_value=1, max_value=8), st.data())
    def test_output_rank_matches_index(self, n, data):
        perm = tuple(data.draw(st.permutations(list(range(1, n + 1)))))
        _, rl = make_pair(n)
        out = apply_permutation(rl, Permutation(perm))
        for j, p in enumerate(out):
            assert p.retriever_rank == perm[j]

    @given(st.integers(min_value=1, max_value=8), st.data())
    def test_inverse_restores_retriever_order(self, n, data):
        perm = Permutation(tuple(data.draw(st.permutations(list(range(1, n + 1))))))
        _, rl = make_pair(n)
        shuffled = apply_permutation(rl, perm)
        inv = perm.inverse()
        restored = tuple(shuffled[i - 1] for i in inv.indices)
        assert restored == rl.passages

    def test_inverse_requires_full_length(self):
        with pytest.raises(ValueError):
            Permutation((2, 3)).inverse()


class TestValidateRetrievalList:
    def test_valid(self):
        _, rl = make_pair(3)
        assert validate_retrieval_list(rl) == []

    def test_duplicate_rank(self):
        q = Query(id="q", text="t")
        ps = (
            Passage(id="a", text="x", retriever_rank=1),
            Passage(id="b", text="x", retriever_rank=2),
            Passage(id="c", text="x", retriever_rank=2),
        )
        problems = validate_retrieval_list(RetrievalList(query=q, passages=ps))
        assert any("duplicate retriever_rank 2" in p for p in problems)

    def test_rank_gap(self):
        q = Query(id="q", text="t")
        ps = (
            Passage(id="a", text="x", retriever_rank=1),
            Passage(id="b", text="x", retriever_rank=3),
        )
        problems = validate_retrieval_list(RetrievalList(query=q, passages=ps))
        assert any("missing retriever_rank 2" in p for p in problems)

    def test_duplicate_id(self):
        q = Query(id="q", text="t")
        ps = (
            Passage(id="a", text="x", retriever_rank=1),
            Passage(id="a", text="x", retriever_rank=2),
        )
        problems = validate_retrieval_list(RetrievalList(query=q, passages=ps))
        assert any("duplicate passage id" in p for p in problems)

    def test_order_mismatch(self):
        q = Query(id="q", text="t")
        ps = (
            Passage(id="a", text="x", retriever_rank=2),
            Passage(id="b", text="x", retriever_rank=1),
        )
        problems = validate_retrieval_list(RetrievalList(query=q, passages=ps))
        assert any("not ordered" in p for p in problems)

    def test_empty_list(self):
        q = Query(id="q", text="t")
        problems = validate_retrieval_list(RetrievalList(query=q, passages=()))
        assert problems

    def test_require_valid_raises(self):
        q = Query(id="q", text="t")
        ps = (Passage(id="a", text="x", retriever_rank=2),)
        with pytest.raises(ValueError, match="invalid retrieval list"):
            require_valid(RetrievalList(query=q, passages=ps))


class TestTypes:
    def test_query_requires_id_and_text(self):
        with pytest.raises(ValueError):
            Query(id="", text="t")
        with pytest.raises(ValueError):
            Query(id="q", text="")

    def test_passage_rank_positive(self):
        with pytest.raises(ValueError):
            Passage(id="p", text="x", retriever_rank=0)

    def test_permutation_nonempty_and_one_based(self):
        with pytest.raises(ValueError):
            Permutation(())
        with pytest.raises(ValueError):
            Permutation((0, 1))

    def test_ranking_rejects_duplicates_and_bad_utilities(self):
        with pytest.raises(ValueError):
            Ranking(("a", "a"))
        with pytest.raises(ValueError):
            Ranking(("a", "b"), utilities=(1.0,))

    def test_stable_seed_is_deterministic_and_sensitive(self):
        assert stable_seed(1, "q1") == stable_seed(1, "q1")
        assert stable_seed(1, "q1") != stable_seed(2, "q1")
        assert stable_seed(1, "q1") != stable_seed(1, "q2")
