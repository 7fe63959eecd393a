"""Dataset loading, validation and synthetic-corpus generation.

One JSONL schema serves every benchmark shape: records carry
``query_id``, ``query``, ``answer``, ``passages`` (each ``{id, text,
rank, score}``) and ``gold_ids``. Converters from native benchmark
formats are documentation-level examples, not supported API.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .backend import SimOracleConfig, derive_oracle_config
from .core import Passage, Query, RetrievalList, validate_retrieval_list

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """A dataset file violated the schema or the list invariants."""


@dataclass(frozen=True)
class DatasetRecord:
    """One dataset line; maps bijectively to (Query, RetrievalList)."""

    query: Query
    retrieval: RetrievalList

    @classmethod
    def from_pair(cls, query: Query, retrieval: RetrievalList) -> "DatasetRecord":
        return cls(query=query, retrieval=retrieval)

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        query = Query(
            id=str(obj["query_id"]),
            text=str(obj["query"]),
            gold_answer=obj.get("answer"),
            gold_passage_ids=frozenset(obj.get("gold_ids") or ()),
        )
        passages = tuple(
            Passage(
                id=str(p["id"]),
                text=str(p["text"]),
                retriever_rank=int(p["rank"]),
                retriever_score=None if p.get("score") is None else float(p["score"]),
            )
            for p in obj["passages"]
        )
        return cls(query=query, retrieval=RetrievalList(query=query, passages=passages))

    def to_json(self) -> dict:
        return {
            "query_id": self.query.id,
            "query": self.query.text,
            "answer": self.query.gold_answer,
            "passages": [
                {
                    "id": p.id,
                    "text": p.text,
                    "rank": p.retriever_rank,
                    "score": p.retriever_score,
                }
                for p in self.retrieval.passages
            ],
            "gold_ids": sorted(self.query.gold_passage_ids),
        }

    def pair(self) -> tuple[Query, RetrievalList]:
        return self.query, self.retrieval


def load_dataset(
    path,
    strict: bool = False,
    errors: Optional[list[str]] = None,
) -> list[tuple[Query, RetrievalList]]:
    """Parse and validate a dataset JSONL file.

    Invalid records are reported with their line numbers (collected into
    ``errors`` when given, and logged) and skipped; with ``strict`` the
    first violation raises :class:`DatasetError`. Valid records come back
    in file order.
    """
    path = Path(path)
    collected: list[str] = [] if errors is None else errors
    pairs: list[tuple[Query, RetrievalList]] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                _report(collected, f"line {lineno}: invalid JSON: {exc}", strict)
                continue
            try:
                record = DatasetRecord.from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                _report(collected, f"line {lineno}: malformed record: {exc}", strict)
                continue
            problems = validate_retrieval_list(record.retrieval)
            if problems:
                for problem in problems:
                    _report(collected, f"line {lineno}: {problem}", strict)
                continue
            pairs.append(record.pair())
    return pairs


def _report(collected: list[str], message: str, strict: bool) -> None:
    if strict:
        raise DatasetError(message)
    collected.append(message)
    log.warning("%s", message)


def write_dataset(pairs: Iterable[tuple[Query, RetrievalList]], path) -> int:
    count = 0
    with open(path, "w") as fh:
        for query, retrieval in pairs:
            fh.write(json.dumps(DatasetRecord.from_pair(query, retrieval).to_json()) + "\n")
            count += 1
    return count


def synth_corpus(
    n_queries: int,
    n_passages: int,
    seed: int = 0,
    out_path=None,
    sidecar_path=None,
    template: Optional[SimOracleConfig] = None,
    noise_sigma: float = 0.0,
) -> int:
    """Generate a synthetic corpus plus a ground-truth sidecar.

    Per-query bias/utility truth comes from
    :func:`permrank.backend.derive_oracle_config`, so a
    ``SimulatedBackend(seed=seed, template=template)`` reproduces it
    exactly. The sidecar holds one line per query: ``{query_id, a_star,
    u_star, argsort}`` with ``argsort`` the retriever positions in
    descending-utility order. Gold is the highest-utility passage and the
    gold answer is that passage's simulated answer token. Byte-identical
    outputs for identical arguments.
    """
    if n_queries < 1 or n_passages < 1:
        raise ValueError("n_queries and n_passages must be >= 1")
    if out_path is None or sidecar_path is None:
        raise ValueError("out_path and sidecar_path are required")

    pairs = []
    sidecars = []
    for q in range(1, n_queries + 1):
        qid = f"q{q:04d}"
        cfg = derive_oracle_config(seed, qid, n_passages, template, noise_sigma)
        order = sorted(range(n_passages), key=lambda i: (-cfg.u_star[i], i))
        gold_rank = order[0] + 1
        gold_pid = f"{qid}-p{gold_rank}"
        query = Query(
            id=qid,
            text=f"synthetic question {qid}",
            gold_answer=f"answer-{gold_pid}",
            gold_passage_ids=frozenset({gold_pid}),
        )
        passages = tuple(
            Passage(
                id=f"{qid}-p{r}",
                text=f"Synthetic passage {r} for {qid}.",
                retriever_rank=r,
                retriever_score=round(1.0 / r, 6),
            )
            for r in range(1, n_passages + 1)
        )
        pairs.append((query, RetrievalList(query=query, passages=passages)))
        sidecars.append(
            {
                "query_id": qid,
                "a_star": list(cfg.a_star),
                "u_star": list(cfg.u_star),
                "argsort": [i + 1 for i in order],
            }
        )

    count = write_dataset(pairs, out_path)
    with open(sidecar_path, "w") as fh:
        for entry in sidecars:
            fh.write(json.dumps(entry) + "\n")
    return count


def load_sidecar(path) -> dict[str, dict]:
    """Sidecar lines keyed by query id."""
    out: dict[str, dict] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                out[obj["query_id"]] = obj
    return out
