"""Teacher-score dataset construction and the preference-distillation loss.

Builds the offline dataset of permutation scores from a teacher backend
and computes the KL loss between softmax-normalized teacher and student
score vectors. Model training itself is out of scope; only data and loss
live here.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .backend import Backend, BackendError, BackendOptions
from .core import Permutation, Query, RetrievalList, stable_seed
from .permute import random_design

log = logging.getLogger(__name__)

DEFAULT_K = 30
DEFAULT_SUBSET = 8


@dataclass(frozen=True)
class DistillRecord:
    """Teacher scores for K random permutations of one query's passages."""

    query_id: str
    permutations: tuple[Permutation, ...]
    teacher_scores: tuple[float, ...]
    model_tag: str

    def __post_init__(self):
        perms = tuple(self.permutations)
        scores = tuple(float(s) for s in self.teacher_scores)
        object.__setattr__(self, "permutations", perms)
        object.__setattr__(self, "teacher_scores", scores)
        if len(perms) != len(scores):
            raise ValueError("permutations and scores must have equal length")
        if len(perms) < 2:
            raise ValueError("a distillation record needs at least 2 permutations")

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "model_tag": self.model_tag,
            "perms": [list(p.indices) for p in self.permutations],
            "scores": list(self.teacher_scores),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DistillRecord":
        return cls(
            query_id=obj["query_id"],
            permutations=tuple(Permutation(tuple(p)) for p in obj["perms"]),
            teacher_scores=tuple(obj["scores"]),
            model_tag=obj["model_tag"],
        )


def _existing_query_ids(sink: Path) -> set[str]:
    ids: set[str] = set()
    if sink.exists():
        with sink.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    ids.add(json.loads(line)["query_id"])
    return ids


def build_distill_dataset(
    queries: Iterable[tuple[Query, RetrievalList]],
    backend: Backend,
    k: int = DEFAULT_K,
    seed: int = 0,
    sink=None,
    opts: BackendOptions = BackendOptions(),
) -> int:
    """Score k random permutations per query and append records as JSONL.

    Resumable: query ids already present in the sink are skipped. Queries
    that fail at the backend are logged and excluded from the count, as
    are single-passage queries (one permutation carries no preference
    signal). Returns the number of records written.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if sink is None:
        raise ValueError("sink path is required")
    sink = Path(sink)
    done = _existing_query_ids(sink)

    written = 0
    sink.parent.mkdir(parents=True, exist_ok=True)
    with sink.open("a") as fh:
        for query, retrieval in queries:
            if query.id in done:
                continue
            n = len(retrieval)
            if n < 2:
                log.warning("skipping %s: single-passage query", query.id)
                continue
            design = random_design(n, m=k, seed=stable_seed("distill", seed, query.id))
            try:
                scored = backend.score_batch(query, retrieval, design, opts)
            except BackendError as exc:
                log.warning("skipping %s: %s", query.id, exc)
                continue
            record = DistillRecord(
                query_id=query.id,
                permutations=design.permutations,
                teacher_scores=tuple(sp.effective_score for sp in scored),
                model_tag=backend.model_tag,
            )
            fh.write(json.dumps(record.to_json()) + "\n")
            done.add(query.id)
            written += 1
    return written


def load_distill_dataset(path) -> list[DistillRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DistillRecord.from_json(json.loads(line)))
    return records


def softmax(scores: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax; invariant to additive score shifts."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    arr = np.asarray(list(scores), dtype=float)
    if arr.size == 0:
        raise ValueError("softmax needs at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    z = arr / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def kl_distill_loss(
    teacher_scores: Sequence[float],
    student_scores: Sequence[float],
    subset_size: Optional[int] = None,
    seed: int = 0,
    temperature: float = 1.0,
    direction: str = "teacher_to_student",
) -> float:
    """KL divergence between softmaxed teacher and student score subsets.

    A random subset of ``subset_size`` indices (deterministic from
    ``seed``) is drawn, both score vectors are restricted to it and
    softmax-normalized, and KL(teacher || student) is returned (the
    student sits in the denominator; flip with
    ``direction="student_to_teacher"``). Nonnegative; zero when the two
    restricted distributions coincide.
    """
    t = list(teacher_scores)
    s = list(student_scores)
    if len(t) != len(s):
        raise ValueError(f"score length mismatch: {len(t)} vs {len(s)}")
    if len(t) < 2:
        raise ValueError("need at least 2 scores")
    size = min(DEFAULT_SUBSET, len(t)) if subset_size is None else subset_size
    if not 2 <= size <= len(t):
        raise ValueError(f"subset_size must be in [2, {len(t)}], got {size}")

    idx = sorted(random.Random(seed).sample(range(len(t)), size))
    p = softmax([t[i] for i in idx], temperature)
    q = softmax([s[i] for i in idx], temperature)
    if direction == "student_to_teacher":
        p, q = q, p
    elif direction != "teacher_to_student":
        raise ValueError(f"unknown direction {direction!r}")
    kl = float(np.sum(np.where(p > 0, p * np.log(p / np.maximum(q, 1e-300)), 0.0)))
    return max(kl, 0.0)
