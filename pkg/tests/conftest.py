import pytest

from permrank import Passage, Query, RetrievalList


def make_pair(n, qid="q1", with_scores=False, scores=None):
    """A valid (Query, RetrievalList) fixture with n passages."""
    query = Query(id=qid, text="which city hosts the tallest tower")
    passages = []
    for r in range(1, n + 1):
        if scores is not None:
            score = scores[r - 1]
        elif with_scores:
            score = 1.0 / r
        else:
            score = None
        passages.append(
            Passage(id=f"{qid}-p{r}", text=f"passage {r} text", retriever_rank=r, retriever_score=score)
        )
    return query, RetrievalList(query=query, passages=tuple(passages))


@pytest.fixture
def pair3():
    return make_pair(3)


@pytest.fixture
def pair5():
    return make_pair(5)
