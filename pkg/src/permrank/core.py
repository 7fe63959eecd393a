"""Shared domain types for permutation-based passage reranking.

All types are immutable and safe to share across threads. Permutation
indices are 1-based and refer to retriever ranks, so the permutation
``[3, 1, 2]`` places the retriever's third passage first.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence


def stable_seed(*parts) -> int:
    """Derive a reproducible 63-bit integer seed from arbitrary parts.

    Hash-based so the result is stable across processes and platforms
    (unlike built-in ``hash``). Used everywhere a sub-seed is expanded
    from a top-level seed, e.g. per-query seeds in corpus runs.
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class Query:
    """A question with optional gold annotations for evaluation."""

    id: str
    text: str
    gold_answer: Optional[str] = None
    gold_passage_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.id:
            raise ValueError("query id must be non-empty")
        if not self.text:
            raise ValueError("query text must be non-empty")
        object.__setattr__(self, "gold_passage_ids", frozenset(self.gold_passage_ids or ()))


@dataclass(frozen=True)
class Passage:
    """One retrieved passage; ``retriever_rank`` is 1-based."""

    id: str
    text: str
    retriever_rank: int
    retriever_score: Optional[float] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("passage id must be non-empty")
        if self.retriever_rank < 1:
            raise ValueError(f"retriever_rank must be >= 1, got {self.retriever_rank}")


@dataclass(frozen=True)
class RetrievalList:
    """A query plus its retriever-ordered passages.

    Construction is permissive; use :func:`validate_retrieval_list` to
    check the invariants (distinct ids, ranks exactly 1..N in order).
    """

    query: Query
    passages: tuple[Passage, ...]

    def __post_init__(self):
        object.__setattr__(self, "passages", tuple(self.passages))

    def __len__(self) -> int:
        return len(self.passages)

    @property
    def n(self) -> int:
        return len(self.passages)

    def passage_by_rank(self, rank: int) -> Passage:
        """Passage at the given retriever rank; assumes a valid list."""
        if not 1 <= rank <= len(self.passages):
            raise IndexError(f"rank {rank} out of range for {len(self.passages)} passages")
        return self.passages[rank - 1]


@dataclass(frozen=True)
class Permutation:
    """An ordered, duplicate-free selection of 1-based retriever positions.

    May be shorter than the retrieval list (a pruned permutation); the
    upper bound on indices is checked against a concrete list in
    :func:`apply_permutation` and in design construction.
    """

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise ValueError("permutation must be non-empty")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate indices in permutation {idx}")
        if min(idx) < 1:
            raise ValueError(f"permutation indices are 1-based, got {idx}")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    @property
    def length(self) -> int:
        return len(self.indices)

    def is_full(self, n: int) -> bool:
        return len(self.indices) == n and set(self.indices) == set(range(1, n + 1))

    def inverse(self) -> "Permutation":
        """Inverse of a full-length permutation over its own span."""
        n = len(self.indices)
        if set(self.indices) != set(range(1, n + 1)):
            raise ValueError("only full-length permutations are invertible")
        inv = [0] * n
        for pos, idx in enumerate(self.indices, start=1):
            inv[idx - 1] = pos
        return Permutation(tuple(inv))


@dataclass(frozen=True)
class Ranking:
    """A full ordering of passage ids with optional per-passage utilities.

    ``degenerate`` marks rankings where the producing strategy found no
    ordering signal and fell back to retriever order. Utilities are kept
    in ranking order; strategies emit them non-increasing, but reversal
    (an adversarial probe) intentionally retains utilities out of order,
    so monotonicity is not enforced at construction.
    """

    passage_ids: tuple[str, ...]
    utilities: Optional[tuple[float, ...]] = None
    provenance: str = ""
    degenerate: bool = False

    def __post_init__(self):
        ids = tuple(self.passage_ids)
        object.__setattr__(self, "passage_ids", ids)
        if not ids:
            raise ValueError("ranking must contain at least one passage id")
        if len(set(ids)) != len(ids):
            raise ValueError("ranking contains duplicate passage ids")
        if self.utilities is not None:
            utils = tuple(float(u) for u in self.utilities)
            object.__setattr__(self, "utilities", utils)
            if len(utils) != len(ids):
                raise ValueError("utilities length must match passage ids")

    def __len__(self) -> int:
        return len(self.passage_ids)


def apply_permutation(retrieval: RetrievalList, perm: Permutation) -> tuple[Passage, ...]:
    """Reorder (and possibly prune) the list's passages per ``perm``.

    ``output[j]`` is the passage at retriever position ``perm.indices[j]``.
    Raises ``ValueError`` for indices outside ``[1, N]``; duplicates are
    rejected by the ``Permutation`` constructor.
    """
    n = len(retrieval.passages)
    for idx in perm.indices:
        if idx > n:
            raise ValueError(f"permutation index {idx} out of range for {n} passages")
    return tuple(retrieval.passages[i - 1] for i in perm.indices)


def validate_retrieval_list(retrieval: RetrievalList) -> list[str]:
    """Check RetrievalList invariants; returns one message per violation.

    An empty return value means the list is valid.
    """
    problems: list[str] = []
    passages = retrieval.passages
    if not passages:
        problems.append("retrieval list has no passages")
        return problems

    seen_ids: set[str] = set()
    for p in passages:
        if p.id in seen_ids:
            problems.append(f"duplicate passage id {p.id!r}")
        seen_ids.add(p.id)

    n = len(passages)
    ranks = [p.retriever_rank for p in passages]
    seen_ranks: set[int] = set()
    for r in ranks:
        if r in seen_ranks:
            problems.append(f"duplicate retriever_rank {r}")
        seen_ranks.add(r)
    for missing in sorted(set(range(1, n + 1)) - seen_ranks):
        problems.append(f"missing retriever_rank {missing}")
    for r in sorted(r for r in seen_ranks if r > n):
        problems.append(f"retriever_rank {r} exceeds passage count {n}")

    if ranks != sorted(ranks):
        problems.append("passages are not ordered by retriever_rank ascending")
    return problems


def require_valid(retrieval: RetrievalList) -> None:
    """Raise ``ValueError`` listing every invariant violation, if any."""
    problems = validate_retrieval_list(retrieval)
    if problems:
        raise ValueError("invalid retrieval list: " + "; ".join(problems))
