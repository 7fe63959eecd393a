"""Pointwise and listwise reranking baselines scored by the generator.

Each baseline produces a :class:`~permrank.core.Ranking` comparable to
the permutation-intervention reranker's output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .backend import Backend, BackendOptions
from .core import Passage, Permutation, Query, Ranking, RetrievalList


class ScoreMethod(str, Enum):
    BAYES_SALIENCY = "bayes_saliency"
    QG = "qg"
    LINGUA = "lingua"


@dataclass(frozen=True)
class PointwiseScore:
    passage_id: str
    score: float
    method: ScoreMethod

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("pointwise score must be finite")


def bayes_saliency(
    query: Query,
    passage: Passage,
    backend: Backend,
    include_prior: bool = True,
) -> PointwiseScore:
    """Saliency of a lone passage: log P(query | passage) [+ log P(passage)].

    With ``include_prior=False`` this is numerically identical to
    :func:`qg_score`.
    """
    opts = BackendOptions(include_prior=include_prior)
    scored = backend.score_passage(query, passage, opts)
    return PointwiseScore(passage.id, scored.effective_score, ScoreMethod.BAYES_SALIENCY)


def qg_score(query: Query, passage: Passage, backend: Backend) -> PointwiseScore:
    """Question-generation score: log P(query | passage), prior-free."""
    opts = BackendOptions(include_prior=False)
    scored = backend.score_passage(query, passage, opts)
    return PointwiseScore(passage.id, scored.effective_score, ScoreMethod.QG)


def lingua_score(query: Query, passage: Passage, backend: Backend) -> PointwiseScore:
    """Token-level importance: sum of p * log(p) over query tokens.

    Always <= 0; zero exactly when every query token has probability 1.
    A probability of 0 contributes 0 (the x*log(x) limit).
    """
    probs = backend.query_token_probabilities(query, passage)
    total = 0.0
    for p in probs:
        if not 0.0 <= p <= 1.0 + 1e-12:
            raise ValueError(f"token probability outside [0, 1]: {p}")
        if p > 0.0:
            total += min(p, 1.0) * math.log(min(p, 1.0))
    return PointwiseScore(passage.id, total, ScoreMethod.LINGUA)


def bayes_saliency_listwise(
    query: Query,
    retrieval: RetrievalList,
    backend: Backend,
    include_prior: bool = True,
) -> Ranking:
    """Greedy sequential selection by listwise saliency.

    At step k+1 the unselected passage maximizing the listwise score
    conditioned on the k already-selected passages is appended; ties go
    to the lower retriever rank. Costs exactly N(N+1)/2 scoring calls, so
    latency grows linearly with N even under full parallelism.
    """
    opts = BackendOptions(include_prior=include_prior)
    remaining = list(retrieval.passages)
    selected_ranks: list[int] = []
    order: list[Passage] = []
    while remaining:
        best: Passage | None = None
        best_key: tuple[float, int] | None = None
        for cand in remaining:
            perm = Permutation(tuple(selected_ranks) + (cand.retriever_rank,))
            scored = backend.score_permutation(query, retrieval, perm, opts)
            key = (scored.effective_score, -cand.retriever_rank)
            if best_key is None or key > best_key:
                best, best_key = cand, key
        assert best is not None
        order.append(best)
        remaining.remove(best)
        selected_ranks.append(best.retriever_rank)
    provenance = "bayes_listwise" + ("+prior" if include_prior else "")
    return Ranking(tuple(p.id for p in order), utilities=None, provenance=provenance)


def rank_by_pointwise(
    scores: Sequence[PointwiseScore], retrieval: RetrievalList, provenance: str = ""
) -> Ranking:
    """Order passages by score descending, ties by retriever rank."""
    by_id: dict[str, PointwiseScore] = {}
    for sc in scores:
        if sc.passage_id in by_id:
            raise ValueError(f"duplicate score for passage {sc.passage_id!r}")
        by_id[sc.passage_id] = sc
    missing = [p.id for p in retrieval.passages if p.id not in by_id]
    if missing:
        raise ValueError(f"missing scores for passages: {missing}")
    extra = set(by_id) - {p.id for p in retrieval.passages}
    if extra:
        raise ValueError(f"scores for unknown passages: {sorted(extra)}")

    ordered = sorted(
        retrieval.passages, key=lambda p: (-by_id[p.id].score, p.retriever_rank)
    )
    if not provenance:
        provenance = scores[0].method.value if scores else "pointwise"
    return Ranking(
        tuple(p.id for p in ordered),
        utilities=tuple(by_id[p.id].score for p in ordered),
        provenance=provenance,
    )
