"""Answer metrics (EM, ROUGE-L), ranking metrics (MRR, Kendall tau) and
the aggregated position-bias report.

EM and ROUGE-L share one normalization (lowercase, punctuation and
English articles stripped, whitespace collapsed) and ROUGE-L tokenizes
the normalized text on whitespace. Reports store EM scaled to [0, 100]
like ROUGE; MRR stays in [0, 1].
"""
from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Ranking
from .solver import DisentangledModel

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, gold: str) -> int:
    """1 iff the normalized strings are equal, else 0."""
    return int(normalize_answer(pred) == normalize_answer(gold))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, gold: str) -> float:
    """LCS-based F-measure (beta = 1) over whitespace tokens, times 100."""
    toks_p = normalize_answer(pred).split()
    toks_g = normalize_answer(gold).split()
    if not toks_p and not toks_g:
        # Normalization ate everything (e.g. pure punctuation/articles):
        # fall back to raw comparison so identical non-empty inputs score 100.
        return 100.0 if pred == gold and pred.strip() else 0.0
    lcs = _lcs_length(toks_p, toks_g)
    if lcs == 0:
        return 0.0
    precision = lcs / len(toks_p)
    recall = lcs / len(toks_g)
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def reciprocal_rank(ranking: Ranking, gold_ids: set[str]) -> float:
    """1 / (rank of the first gold passage); 0 when none is present."""
    for pos, pid in enumerate(ranking.passage_ids, start=1):
        if pid in gold_ids:
            return 1.0 / pos
    return 0.0


def mrr(rankings: Sequence[Ranking], gold_ids: Sequence[set[str]]) -> float:
    """Mean reciprocal rank over queries."""
    if len(rankings) != len(gold_ids):
        raise ValueError("rankings and gold id sets must align")
    if not rankings:
        raise ValueError("mrr needs at least one query")
    return sum(reciprocal_rank(r, g) for r, g in zip(rankings, gold_ids)) / len(rankings)


def kendall_tau(r1: Ranking, r2: Ranking) -> float:
    """Tau-a rank correlation between two orderings of the same ids."""
    ids1, ids2 = set(r1.passage_ids), set(r2.passage_ids)
    if ids1 != ids2:
        raise ValueError("rankings cover different passage id sets")
    n = len(r1.passage_ids)
    if n < 2:
        raise ValueError("kendall tau needs at least 2 items")
    pos2 = {pid: i for i, pid in enumerate(r2.passage_ids)}
    order = [pos2[pid] for pid in r1.passage_ids]
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            if order[i] < order[j]:
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


@dataclass(frozen=True)
class BiasReport:
    """Fitted position-bias profiles averaged across queries."""

    mean_a: tuple[float, ...]
    std_a: tuple[float, ...]
    count: int

    def __post_init__(self):
        mean = tuple(float(x) for x in self.mean_a)
        std = tuple(float(x) for x in self.std_a)
        object.__setattr__(self, "mean_a", mean)
        object.__setattr__(self, "std_a", std)
        if len(mean) != len(std):
            raise ValueError("mean and std lengths differ")
        if any(not 0.0 - 1e-9 <= v <= 1.0 + 1e-9 for v in mean):
            raise ValueError("mean bias entries must lie in [0, 1]")
        if abs(sum(mean) - 1.0) > 1e-9:
            raise ValueError("mean bias must sum to 1")

    def to_json(self) -> dict:
        return {
            "mean_a": list(self.mean_a),
            "std_a": list(self.std_a),
            "count": self.count,
        }


def bias_report(models: Sequence[DisentangledModel]) -> BiasReport:
    """Per-position mean and std of fitted bias across non-degenerate fits."""
    usable = [m for m in models if not m.degenerate]
    if not usable:
        raise ValueError("no non-degenerate models to aggregate")
    sizes = {len(m.bias) for m in usable}
    if len(sizes) != 1:
        raise ValueError(f"models disagree on N: {sorted(sizes)}")
    mat = np.array([m.bias.a for m in usable])
    return BiasReport(
        mean_a=tuple(mat.mean(axis=0)),
        std_a=tuple(mat.std(axis=0)),
        count=len(usable),
    )


def write_bias_csv(report: BiasReport, path) -> None:
    """Delimited form of the bias report: position, mean, std."""
    with open(path, "w") as fh:
        fh.write("position,mean,std\n")
        for j, (m, s) in enumerate(zip(report.mean_a, report.std_a), start=1):
            fh.write(f"{j},{m!r},{s!r}\n")


@dataclass(frozen=True)
class EvalReport:
    """Per-query metric values with their means."""

    per_query: Mapping[str, Mapping[str, float]]
    aggregates: Mapping[str, float]
    count: int

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "aggregates": dict(sorted(self.aggregates.items())),
            "per_query": {
                qid: dict(sorted(vals.items()))
                for qid, vals in sorted(self.per_query.items())
            },
        }


def build_eval_report(per_query: Mapping[str, Mapping[str, float]]) -> EvalReport:
    """Aggregate per-query metric values into means."""
    metrics: dict[str, list[float]] = {}
    for vals in per_query.values():
        for name, v in vals.items():
            metrics.setdefault(name, []).append(v)
    aggregates = {name: sum(vs) / len(vs) for name, vs in metrics.items() if vs}
    return EvalReport(per_query=dict(per_query), aggregates=aggregates, count=len(per_query))


def write_eval_report(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
