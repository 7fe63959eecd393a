"""Permutation designs: which orderings get scored before the fit.

Four strategies: uniform random subsets (default size 3N), the N cyclic
rotations of retriever order, fixed-length prefixes of those rotations,
and retriever-score-driven variable-length prefixes.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .core import Permutation, RetrievalList


class DesignStrategy(str, Enum):
    RANDOM = "random"
    CYCLIC = "cyclic"
    PRUNED_CYCLIC = "pruned_cyclic"
    VARIABLE_PRUNED = "variable_pruned"


@dataclass(frozen=True)
class PermutationDesign:
    """An ordered set of distinct permutations over ``n_passages`` items."""

    permutations: tuple[Permutation, ...]
    strategy: DesignStrategy
    n_passages: int
    seed: Optional[int] = None

    def __post_init__(self):
        perms = tuple(self.permutations)
        object.__setattr__(self, "permutations", perms)
        if self.n_passages < 1:
            raise ValueError("design needs n_passages >= 1")
        seen: set[tuple[int, ...]] = set()
        for perm in perms:
            if max(perm.indices) > self.n_passages:
                raise ValueError(
                    f"permutation {perm.indices} exceeds n_passages={self.n_passages}"
                )
            if perm.indices in seen:
                raise ValueError(f"duplicate permutation {perm.indices} in design")
            seen.add(perm.indices)

    def __len__(self) -> int:
        return len(self.permutations)

    def __iter__(self):
        return iter(self.permutations)


def _rotation(n: int, k: int) -> tuple[int, ...]:
    """Retriever order rotated left so position ``k`` comes first."""
    return tuple(range(k, n + 1)) + tuple(range(1, k))


def random_design(n: int, m: Optional[int] = None, seed: int = 0) -> PermutationDesign:
    """``m`` distinct uniformly sampled full-length permutations.

    ``m`` defaults to 3n and is silently capped at n! (small n routinely
    hit the cap). Sampling is shuffle-and-dedup with a 100*m attempt
    bound, deterministic given ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    target = 3 * n if m is None else m
    if target < 1:
        raise ValueError("m must be >= 1")
    universe = math.factorial(n)
    target = min(target, universe)

    rng = random.Random(seed)
    base = list(range(1, n + 1))
    seen: set[tuple[int, ...]] = set()
    out: list[Permutation] = []
    attempts = 0
    while len(out) < target:
        attempts += 1
        if attempts > 100 * target:
            raise RuntimeError(
                f"could not sample {target} distinct permutations of {n} items"
            )
        candidate = tuple(rng.sample(base, n))
        if candidate in seen:
            continue
        seen.add(candidate)
        out.append(Permutation(candidate))
    return PermutationDesign(tuple(out), DesignStrategy.RANDOM, n, seed)


def cyclic_design(n: int) -> PermutationDesign:
    """The n rotations of retriever order, k = 1..n; rotation k starts at k."""
    if n < 1:
        raise ValueError("n must be >= 1")
    perms = tuple(Permutation(_rotation(n, k)) for k in range(1, n + 1))
    return PermutationDesign(perms, DesignStrategy.CYCLIC, n)


def pruned_cyclic_design(n: int, length: int) -> PermutationDesign:
    """The first ``length`` entries of each cyclic rotation.

    For k <= n - length the prefix is [k, ..., k+length-1]; otherwise it
    wraps: [k, ..., n, 1, ..., k+length-n-1].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= length <= n:
        raise ValueError(f"L out of range: need 1 <= L <= {n}, got {length}")
    perms = tuple(
        Permutation(_rotation(n, k)[:length]) for k in range(1, n + 1)
    )
    return PermutationDesign(perms, DesignStrategy.PRUNED_CYCLIC, n)


def variable_pruned_design(retrieval: RetrievalList, tau: float) -> PermutationDesign:
    """Cyclic prefixes sized by retriever-score mass.

    For each rotation start k, the prefix length is the smallest L whose
    passages carry at least ``tau`` of the total retriever-score mass,
    clamped to [2, N] (lower bound 1 when N = 1). A length-1 context
    would reduce to a pointwise score the listwise model cannot use,
    hence the clamp.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    n = len(retrieval.passages)
    if n < 1:
        raise ValueError("retrieval list is empty")
    scores = []
    for p in retrieval.passages:
        if p.retriever_score is None:
            raise ValueError(f"passage {p.id!r} is missing a retriever score")
        if p.retriever_score < 0:
            raise ValueError(f"retriever scores must be nonnegative, got {p.retriever_score}")
        scores.append(float(p.retriever_score))

    total = math.fsum(scores)
    tol = 1e-9 * max(1.0, abs(total))
    low = 1 if n == 1 else 2
    perms = []
    for k in range(1, n + 1):
        rot = _rotation(n, k)
        cum = 0.0
        length = n
        for j, idx in enumerate(rot, start=1):
            cum += scores[idx - 1]
            if cum + tol >= tau * total:
                length = j
                break
        length = min(max(length, low), n)
        perms.append(Permutation(rot[:length]))
    return PermutationDesign(tuple(perms), DesignStrategy.VARIABLE_PRUNED, n)


def coverage_matrix(design: PermutationDesign) -> np.ndarray:
    """N x N counts of how often passage p sits at position j.

    Rows index passages (by retriever rank), columns index prompt
    positions; pruned permutations contribute only to occupied positions.
    """
    n = design.n_passages
    cov = np.zeros((n, n), dtype=int)
    for perm in design.permutations:
        for pos, idx in enumerate(perm.indices):
            cov[idx - 1, pos] += 1
    return cov
