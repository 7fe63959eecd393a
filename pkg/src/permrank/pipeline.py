"""End-to-end orchestration: design, score, fit, rank.

Also hosts the self-consistency baseline pipeline and the order-reversal
probe. Scoring may use pruned permutations, but the returned ranking
always covers all N passages; pruning cuts scoring cost only.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .backend import Backend, BackendOptions
from .core import (
    Permutation,
    Query,
    Ranking,
    RetrievalList,
    apply_permutation,
    require_valid,
)
from .metrics import normalize_answer
from .permute import (
    PermutationDesign,
    cyclic_design,
    pruned_cyclic_design,
    random_design,
    variable_pruned_design,
)
from .solver import DisentangledModel, SolverConfig, fit


class DesignKind(str, Enum):
    RANDOM = "random"
    CYCLIC = "cyclic"
    PRUNED_CYCLIC = "pruned"
    VARIABLE_PRUNED = "variable"


@dataclass(frozen=True)
class RerankStrategy:
    """Which permutations to score and how to fit them."""

    design: DesignKind = DesignKind.RANDOM
    m: Optional[int] = None  # random-design size; None means 3N
    length: Optional[int] = None  # pruned prefix length L
    tau: Optional[float] = None  # variable-pruning mass threshold
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    backend_opts: BackendOptions = field(default_factory=BackendOptions)

    def __post_init__(self):
        if self.design is DesignKind.PRUNED_CYCLIC and self.length is None:
            raise ValueError("pruned design needs a prefix length L")
        if self.design is DesignKind.VARIABLE_PRUNED:
            if self.tau is None or not 0.0 < self.tau <= 1.0:
                raise ValueError("variable pruning needs tau in (0, 1]")

    def label(self) -> str:
        if self.design is DesignKind.PRUNED_CYCLIC:
            return f"pruned(L={self.length})"
        if self.design is DesignKind.VARIABLE_PRUNED:
            return f"variable(tau={self.tau})"
        return self.design.value


def build_design(strategy: RerankStrategy, retrieval: RetrievalList) -> PermutationDesign:
    n = len(retrieval)
    if strategy.design is DesignKind.RANDOM:
        return random_design(n, m=strategy.m, seed=strategy.seed)
    if strategy.design is DesignKind.CYCLIC:
        return cyclic_design(n)
    if strategy.design is DesignKind.PRUNED_CYCLIC:
        return pruned_cyclic_design(n, strategy.length)
    return variable_pruned_design(retrieval, strategy.tau)


def ranking_from_model(
    retrieval: RetrievalList, model: DisentangledModel, provenance: str
) -> Ranking:
    """Order all N passages by fitted utility descending, ties by rank.

    Degenerate fits fall back to retriever order.
    """
    passages = retrieval.passages
    utils = model.utility.u
    if model.degenerate:
        ordered = list(passages)
    else:
        ordered = sorted(
            passages, key=lambda p: (-utils[p.retriever_rank - 1], p.retriever_rank)
        )
    return Ranking(
        tuple(p.id for p in ordered),
        utilities=tuple(utils[p.retriever_rank - 1] for p in ordered),
        provenance=provenance,
        degenerate=model.degenerate,
    )


def pid_rerank_with_model(
    query: Query,
    retrieval: RetrievalList,
    backend: Backend,
    strategy: RerankStrategy = RerankStrategy(),
    trace=None,
) -> tuple[Ranking, DisentangledModel]:
    """Permutation-intervention debiased rerank, returning the fit too."""
    require_valid(retrieval)
    design = build_design(strategy, retrieval)
    scored = backend.score_batch(query, retrieval, design, strategy.backend_opts)
    scores = [sp.effective_score for sp in scored]
    model = fit(design, scores, strategy.solver, trace=trace)
    ranking = ranking_from_model(
        retrieval, model, provenance=f"pid_rerank:{strategy.label()}"
    )
    return ranking, model


def pid_rerank(
    query: Query,
    retrieval: RetrievalList,
    backend: Backend,
    strategy: RerankStrategy = RerankStrategy(),
) -> Ranking:
    """Score a permutation design, disentangle bias from utility, rerank."""
    return pid_rerank_with_model(query, retrieval, backend, strategy)[0]


def self_consistency(
    query: Query,
    retrieval: RetrievalList,
    backend: Backend,
    k: int = 30,
    seed: int = 0,
) -> str:
    """Majority-vote answer over k random full orderings (capped at N!).

    Answers are normalized (lowercase, punctuation and articles stripped)
    before voting; ties break to the lexicographically smallest
    normalized answer, which is also what gets returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    require_valid(retrieval)
    design = random_design(len(retrieval), m=k, seed=seed)
    votes = Counter(
        normalize_answer(backend.generate(query, apply_permutation(retrieval, perm)))
        for perm in design.permutations
    )
    return min(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def reverse_ranking(ranking: Ranking) -> Ranking:
    """Reverse the order, retaining per-passage utilities (adversarial probe)."""
    utils = None if ranking.utilities is None else tuple(reversed(ranking.utilities))
    return Ranking(
        tuple(reversed(ranking.passage_ids)),
        utilities=utils,
        provenance=f"reversed:{ranking.provenance}",
        degenerate=ranking.degenerate,
    )


def ranking_record(
    query_id: str,
    ranking: Ranking,
    model: Optional[DisentangledModel] = None,
    sample: Optional[int] = None,
) -> dict:
    """One JSONL record of the shared ranking format."""
    record = {
        "query_id": query_id,
        "strategy": ranking.provenance,
        "passage_ids": list(ranking.passage_ids),
        "utilities": None if ranking.utilities is None else list(ranking.utilities),
        "bias": None if model is None else list(model.bias.a),
        "residual": None if model is None else model.residual_sse,
        "degenerate": ranking.degenerate,
    }
    if sample is not None:
        record["sample"] = sample
    return record


def write_rankings_jsonl(path, records) -> int:
    """Write ranking records one JSON object per line; returns the count."""
    count = 0
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
            count += 1
    return count
