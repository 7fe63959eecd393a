"""Generator scoring backends: a simulated oracle and a remote HTTP client.

Scores live in log space. The effective score of a permutation is the
(by default length-normalized) log-likelihood of the query given the
permuted passage context, plus the context's own log-prior when
``include_prior`` is set. The simulated oracle realizes the linear
bias-utility model exactly, which makes solver recovery testable without
any model inference; the remote client speaks a completions-style JSON
endpoint that can echo prompt tokens with their log-probabilities.
"""
from __future__ import annotations

import json
import math
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import requests

from .core import (
    Passage,
    Permutation,
    Query,
    RetrievalList,
    apply_permutation,
    stable_seed,
)
from .permute import PermutationDesign


class BackendError(RuntimeError):
    """Raised when a backend cannot produce a score or generation."""


class ScoreBatchError(BackendError):
    """Partial batch failure; carries what completed and what did not."""

    def __init__(self, failures, completed):
        self.failures = failures  # list of (design index, Permutation, exception)
        self.completed = completed  # dict: design index -> ScoredPermutation
        detail = "; ".join(f"#{i} {p.indices}: {e}" for i, p, e in failures[:5])
        super().__init__(f"{len(failures)} permutation(s) failed to score: {detail}")


@dataclass(frozen=True)
class BackendOptions:
    include_prior: bool = False
    length_normalize: bool = True
    max_concurrency: int = 4
    timeout: float = 30.0
    retry_budget: int = 2

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")


@dataclass(frozen=True)
class ScoredPermutation:
    permutation: Permutation
    log_likelihood: float
    log_prior: Optional[float] = None
    model_tag: str = ""
    from_cache: bool = False

    def __post_init__(self):
        if not math.isfinite(self.log_likelihood):
            raise ValueError("log_likelihood must be finite")
        if self.log_prior is not None and not math.isfinite(self.log_prior):
            raise ValueError("log_prior must be finite when present")

    @property
    def effective_score(self) -> float:
        """The score fed to the solver: likelihood plus prior when present."""
        return self.log_likelihood + (self.log_prior or 0.0)


@dataclass(frozen=True)
class TokenDistribution:
    """A normalized probability distribution over first response tokens."""

    probabilities: Mapping[str, float]

    def __post_init__(self):
        probs = dict(self.probabilities)
        object.__setattr__(self, "probabilities", probs)
        if not probs:
            raise ValueError("distribution must have support")
        for tok, p in probs.items():
            if not -1e-9 <= p <= 1 + 1e-9:
                raise ValueError(f"probability of {tok!r} outside [0, 1]: {p}")
        total = math.fsum(probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {total!r}")


def perm_distance(d1: TokenDistribution, d2: TokenDistribution) -> float:
    """L1 distance between two first-token distributions; lies in [0, 2]."""
    support = set(d1.probabilities) | set(d2.probabilities)
    return math.fsum(
        abs(d1.probabilities.get(t, 0.0) - d2.probabilities.get(t, 0.0)) for t in support
    )


@dataclass(frozen=True)
class SimOracleConfig:
    """Ground truth for the simulated generator: bias, utilities, noise."""

    a_star: tuple[float, ...]
    u_star: tuple[float, ...]
    noise_sigma: float = 0.0
    seed: int = 0
    answer_vocab: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        a = tuple(float(x) for x in self.a_star)
        u = tuple(float(x) for x in self.u_star)
        object.__setattr__(self, "a_star", a)
        object.__setattr__(self, "u_star", u)
        object.__setattr__(self, "answer_vocab", dict(self.answer_vocab))
        if len(a) != len(u):
            raise ValueError("a_star and u_star must have equal length")
        if any(x < -1e-9 for x in a) or abs(sum(a) - 1.0) > 1e-9:
            raise ValueError("a_star must lie on the probability simplex")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.a_star)


def _unit_draw(*parts) -> float:
    return float(np.random.default_rng(stable_seed(*parts)).random())


def derive_utility(
    seed: int,
    query_id: str,
    rank: int,
    template: Optional[SimOracleConfig] = None,
    u_range: tuple[float, float] = (1.0, 6.0),
) -> float:
    """Deterministic per-passage utility, independent of list length."""
    if template is not None:
        jitter = float(
            np.random.default_rng(stable_seed("u", seed, query_id, rank)).normal(0.0, 0.5)
        )
        return template.u_star[rank - 1] + jitter
    lo, hi = u_range
    return lo + (hi - lo) * _unit_draw("u", seed, query_id, rank)


def derive_bias_profile(
    seed: int,
    query_id: str,
    n: int,
    template: Optional[SimOracleConfig] = None,
) -> tuple[float, ...]:
    """Deterministic per-query position-bias profile, sorted descending.

    Jitters a linear-decay base (or the template's profile) per position,
    renormalizes, then sorts so the primacy-shaped profile stays strictly
    decreasing with probability one.
    """
    base = (
        np.asarray(template.a_star, dtype=float)
        if template is not None
        else np.arange(n, 0, -1, dtype=float)
    )
    if len(base) != n:
        raise BackendError(f"template bias length {len(base)} != n {n}")
    jitter = np.array(
        [
            np.random.default_rng(stable_seed("a", seed, query_id, j)).normal(0.0, 0.15)
            for j in range(1, n + 1)
        ]
    )
    raw = base * np.exp(jitter)
    raw = raw / raw.sum()
    return tuple(float(x) for x in np.sort(raw)[::-1])


def derive_oracle_config(
    seed: int,
    query_id: str,
    n: int,
    template: Optional[SimOracleConfig] = None,
    noise_sigma: float = 0.0,
) -> SimOracleConfig:
    """Assemble the per-query ground truth used by derived-mode oracles.

    The same function backs :func:`permrank.ingest.synth_corpus`, so a
    simulated backend constructed with the corpus seed reproduces the
    sidecar truth exactly.
    """
    a = derive_bias_profile(seed, query_id, n, template)
    u = tuple(derive_utility(seed, query_id, r, template) for r in range(1, n + 1))
    vocab = dict(template.answer_vocab) if template is not None else {}
    return SimOracleConfig(a, u, noise_sigma=noise_sigma, seed=seed, answer_vocab=vocab)


_DEFAULT_OPTS = BackendOptions()


class Backend(ABC):
    """Scoring and generation interface shared by all backends."""

    model_tag: str = "backend"

    @abstractmethod
    def score_permutation(
        self,
        query: Query,
        retrieval: RetrievalList,
        perm: Permutation,
        opts: BackendOptions = _DEFAULT_OPTS,
    ) -> ScoredPermutation:
        """Score one permuted context; see module docstring for the score."""

    @abstractmethod
    def score_passage(
        self, query: Query, passage: Passage, opts: BackendOptions = _DEFAULT_OPTS
    ) -> ScoredPermutation:
        """Score a single passage alone (a length-1 permutation)."""

    @abstractmethod
    def generate(self, query: Query, ordered_passages: Sequence[Passage]) -> str:
        """Greedy answer text given the ordered context."""

    @abstractmethod
    def first_token_distribution(
        self, query: Query, retrieval: RetrievalList, perm: Permutation
    ) -> TokenDistribution:
        """Distribution over the first response token for this ordering."""

    @abstractmethod
    def query_token_probabilities(self, query: Query, passage: Passage) -> list[float]:
        """Per-token probabilities of the query conditioned on the passage."""

    def score_batch(
        self,
        query: Query,
        retrieval: RetrievalList,
        design: PermutationDesign,
        opts: BackendOptions = _DEFAULT_OPTS,
    ) -> list[ScoredPermutation]:
        """Score every design entry, fanning out up to ``max_concurrency``.

        Output order matches design order regardless of completion order.
        Each permutation is retried up to ``opts.retry_budget`` times; any
        remaining failure raises :class:`ScoreBatchError` carrying both the
        failures and the completed scores.
        """
        perms = design.permutations
        if not perms:
            return []

        def one(index_perm):
            i, perm = index_perm
            last: Exception | None = None
            for _ in range(opts.retry_budget + 1):
                try:
                    return i, self.score_permutation(query, retrieval, perm, opts), None
                except ValueError:
                    raise  # malformed permutation: retrying cannot help
                except Exception as exc:  # noqa: BLE001 - surfaced to caller
                    last = exc
            return i, None, last

        workers = min(opts.max_concurrency, len(perms))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, enumerate(perms)))

        completed: dict[int, ScoredPermutation] = {}
        failures = []
        for i, scored, exc in outcomes:
            if exc is None:
                completed[i] = scored
            else:
                failures.append((i, perms[i], exc))
        if failures:
            raise ScoreBatchError(failures, completed)
        return [completed[i] for i in range(len(perms))]


class SimulatedBackend(Backend):
    """Oracle backend realizing the linear bias-utility model.

    Two modes: a fixed :class:`SimOracleConfig` (explicit ``a*``/``u*``
    for one list length), or derived mode where per-query ground truth is
    a deterministic function of ``(seed, query_id)``. Pruned contexts
    renormalize the position weights over the visible prefix, matching
    the solver's treatment.
    """

    def __init__(
        self,
        config: Optional[SimOracleConfig] = None,
        *,
        seed: int = 0,
        noise_sigma: float = 0.0,
        template: Optional[SimOracleConfig] = None,
    ):
        self.config = config
        self.seed = config.seed if config is not None else seed
        self.noise_sigma = config.noise_sigma if config is not None else noise_sigma
        self.template = template
        self.model_tag = f"sim:{self.seed}"
        self._lock = threading.Lock()
        self.score_calls = 0
        self.generate_calls = 0

    def _count_score(self):
        with self._lock:
            self.score_calls += 1

    def _bias(self, query_id: str, n: int) -> tuple[float, ...]:
        if self.config is not None:
            if len(self.config.a_star) != n:
                raise BackendError(
                    f"fixed oracle has {len(self.config.a_star)} positions, list has {n}"
                )
            return self.config.a_star
        return derive_bias_profile(self.seed, query_id, n, self.template)

    def _utility(self, query_id: str, rank: int) -> float:
        if self.config is not None:
            if rank > len(self.config.u_star):
                raise BackendError(f"rank {rank} exceeds fixed oracle size")
            return self.config.u_star[rank - 1]
        return derive_utility(self.seed, query_id, rank, self.template)

    def _noise(self, query_id: str, indices: tuple[int, ...]) -> float:
        if self.noise_sigma == 0.0:
            return 0.0
        rng = np.random.default_rng(stable_seed("noise", self.seed, query_id, *indices))
        return float(rng.normal(0.0, self.noise_sigma))

    def _answer_token(self, passage: Passage) -> str:
        vocab = self.config.answer_vocab if self.config is not None else (
            self.template.answer_vocab if self.template is not None else {}
        )
        return vocab.get(passage.id, f"answer-{passage.id}")

    def _score_indices(
        self, query: Query, n: int, indices: tuple[int, ...], opts: BackendOptions
    ) -> ScoredPermutation:
        a = np.asarray(self._bias(query.id, n))
        prefix = a[: len(indices)] if len(indices) <= n else None
        if prefix is None:
            raise BackendError("more indices than positions")
        weights = prefix / max(prefix.sum(), 1e-12)
        u = np.array([self._utility(query.id, r) for r in indices])
        ll = float(weights @ u) + self._noise(query.id, indices)
        prior = 0.0 if opts.include_prior else None
        return ScoredPermutation(
            permutation=Permutation(indices),
            log_likelihood=ll,
            log_prior=prior,
            model_tag=self.model_tag,
        )

    def score_permutation(self, query, retrieval, perm, opts=_DEFAULT_OPTS):
        apply_permutation(retrieval, perm)  # validates indices against N
        self._count_score()
        return self._score_indices(query, len(retrieval), perm.indices, opts)

    def score_passage(self, query, passage, opts=_DEFAULT_OPTS):
        self._count_score()
        rank = passage.retriever_rank
        n = rank if self.config is None else len(self.config.u_star)
        return self._score_indices(query, max(n, rank), (rank,), opts)

    def generate(self, query, ordered_passages):
        if not ordered_passages:
            raise BackendError("cannot generate from an empty context")
        with self._lock:
            self.generate_calls += 1
        k = len(ordered_passages)
        if self.config is not None:
            a = np.asarray(self.config.a_star[:k])
        else:
            a = np.asarray(self._bias(query.id, k))
        contrib = [
            a[j] * self._utility(query.id, p.retriever_rank)
            for j, p in enumerate(ordered_passages)
        ]
        best = int(np.argmax(contrib))  # ties resolve to the earliest position
        return self._answer_token(ordered_passages[best])

    def first_token_distribution(self, query, retrieval, perm):
        ordered = apply_permutation(retrieval, perm)
        return TokenDistribution({self.generate(query, ordered): 1.0})

    def query_token_probabilities(self, query, passage):
        u = self._utility(query.id, passage.retriever_rank)
        p = 1.0 / (1.0 + math.exp(-u))
        count = max(1, len(query.text.split()))
        return [p] * count


CONTEXT_TEMPLATE = "Passage {index}: {text}"
PROMPT_TEMPLATE = "{context}\n\nQuestion: {query}"
ANSWER_SUFFIX = "\nAnswer:"


def render_context(passages: Sequence[Passage]) -> str:
    return "\n\n".join(
        CONTEXT_TEMPLATE.format(index=i, text=p.text) for i, p in enumerate(passages, start=1)
    )


class RemoteBackend(Backend):
    """Client for a completions-style JSON endpoint with token logprobs.

    The endpoint must accept ``{model, prompt, max_tokens, temperature,
    echo, logprobs}`` and return ``choices[0].text`` plus, when logprobs
    are requested, ``choices[0].logprobs`` with ``tokens``,
    ``token_logprobs`` and ``text_offset`` (top_logprobs for sampling the
    first-token distribution). Endpoint URL, model name and API key come
    from configuration; retries and timeouts from :class:`BackendOptions`.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        *,
        max_answer_tokens: int = 64,
        top_logprobs: int = 20,
        retry_backoff: float = 0.1,
        default_opts: BackendOptions = _DEFAULT_OPTS,
    ):
        base = endpoint.rstrip("/")
        self.url = base if "/completions" in base else base + "/v1/completions"
        self.model_tag = model
        self.api_key = api_key
        self.max_answer_tokens = max_answer_tokens
        self.top_logprobs = top_logprobs
        self.retry_backoff = retry_backoff
        self.default_opts = default_opts
        self._lock = threading.Lock()
        self.http_calls = 0

    def _post(self, payload: dict, opts: BackendOptions) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model_tag, "temperature": 0, **payload}
        last: Exception | None = None
        for attempt in range(opts.retry_budget + 1):
            if attempt:
                time.sleep(self.retry_backoff * (2 ** (attempt - 1)))
            with self._lock:
                self.http_calls += 1
            try:
                resp = requests.post(
                    self.url, json=body, headers=headers, timeout=opts.timeout
                )
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code >= 500:
                last = BackendError(f"server error {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"backend rejected request: {resp.status_code} {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError(f"malformed backend response: {exc}") from exc
        raise BackendError(f"backend unreachable after {opts.retry_budget + 1} attempts: {last}")

    @staticmethod
    def _logprobs(payload: dict) -> dict:
        try:
            lp = payload["choices"][0]["logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("backend response missing choices/logprobs") from exc
        if not lp or "token_logprobs" not in lp:
            raise BackendError("endpoint did not return token log-probabilities")
        return lp

    def _echo_suffix_logprobs(
        self, prompt: str, suffix_start: int, opts: BackendOptions
    ) -> list[float]:
        payload = {"prompt": prompt, "max_tokens": 0, "echo": True, "logprobs": 0}
        lp = self._logprobs(self._post(payload, opts))
        offsets = lp.get("text_offset") or []
        values = lp.get("token_logprobs") or []
        picked = [
            v
            for v, off in zip(values, offsets)
            if off >= suffix_start and v is not None
        ]
        if not picked:
            raise BackendError("no scored tokens in the requested span")
        return [float(v) for v in picked]

    def _reduce(self, logprobs: list[float], opts: BackendOptions) -> float:
        total = math.fsum(logprobs)
        return total / len(logprobs) if opts.length_normalize else total

    def _score_context(
        self, query: Query, passages: Sequence[Passage], opts: BackendOptions
    ) -> tuple[float, Optional[float]]:
        context = render_context(passages)
        prompt = PROMPT_TEMPLATE.format(context=context, query=query.text)
        suffix_start = len(prompt) - len(query.text)
        ll = self._reduce(self._echo_suffix_logprobs(prompt, suffix_start, opts), opts)
        prior = None
        if opts.include_prior:
            # Skip the first context token: endpoints report None for it.
            prior = self._reduce(self._echo_suffix_logprobs(context, 0, opts), opts)
        return ll, prior

    def score_permutation(self, query, retrieval, perm, opts=_DEFAULT_OPTS):
        ordered = apply_permutation(retrieval, perm)
        ll, prior = self._score_context(query, ordered, opts)
        return ScoredPermutation(
            permutation=perm, log_likelihood=ll, log_prior=prior, model_tag=self.model_tag
        )

    def score_passage(self, query, passage, opts=_DEFAULT_OPTS):
        ll, prior = self._score_context(query, [passage], opts)
        return ScoredPermutation(
            permutation=Permutation((passage.retriever_rank,)),
            log_likelihood=ll,
            log_prior=prior,
            model_tag=self.model_tag,
        )

    def generate(self, query, ordered_passages):
        if not ordered_passages:
            raise BackendError("cannot generate from an empty context")
        context = render_context(ordered_passages)
        prompt = PROMPT_TEMPLATE.format(context=context, query=query.text) + ANSWER_SUFFIX
        payload = {"prompt": prompt, "max_tokens": self.max_answer_tokens}
        data = self._post(payload, self.default_opts)
        try:
            text = data["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("backend response missing generated text") from exc
        text = (text or "").strip()
        if not text:
            raise BackendError("empty generation")
        return text

    def first_token_distribution(self, query, retrieval, perm):
        ordered = apply_permutation(retrieval, perm)
        context = render_context(ordered)
        prompt = PROMPT_TEMPLATE.format(context=context, query=query.text) + ANSWER_SUFFIX
        payload = {"prompt": prompt, "max_tokens": 1, "logprobs": self.top_logprobs}
        lp = self._logprobs(self._post(payload, self.default_opts))
        tops = lp.get("top_logprobs") or []
        if not tops or not tops[0]:
            raise BackendError("endpoint did not return top_logprobs for the first token")
        probs = {tok: math.exp(v) for tok, v in tops[0].items()}
        total = math.fsum(probs.values())
        return TokenDistribution({tok: p / total for tok, p in probs.items()})

    def query_token_probabilities(self, query, passage):
        context = render_context([passage])
        prompt = PROMPT_TEMPLATE.format(context=context, query=query.text)
        suffix_start = len(prompt) - len(query.text)
        lps = self._echo_suffix_logprobs(prompt, suffix_start, self.default_opts)
        return [math.exp(v) for v in lps]


class ScoreCache:
    """Append-only JSONL store of permutation scores.

    Keyed by (model_tag, query id, passage-id sequence, include_prior,
    length_normalize): everything the score depends on under greedy
    decoding. Safe for concurrent use.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple, tuple[float, Optional[float]]] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    obj = json.loads(line)
                    self._entries[self._key_of(obj)] = (
                        obj["log_likelihood"],
                        obj.get("log_prior"),
                    )

    @staticmethod
    def _key_of(obj: dict) -> tuple:
        return (
            obj["model_tag"],
            obj["query_id"],
            tuple(obj["passage_ids"]),
            bool(obj["include_prior"]),
            bool(obj["length_normalize"]),
        )

    @staticmethod
    def key(
        model_tag: str,
        query_id: str,
        passage_ids: Sequence[str],
        opts: BackendOptions,
    ) -> tuple:
        return (model_tag, query_id, tuple(passage_ids), opts.include_prior, opts.length_normalize)

    def get(self, key: tuple) -> Optional[tuple[float, Optional[float]]]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: tuple, log_likelihood: float, log_prior: Optional[float]) -> None:
        model_tag, query_id, passage_ids, include_prior, length_normalize = key
        line = json.dumps(
            {
                "model_tag": model_tag,
                "query_id": query_id,
                "passage_ids": list(passage_ids),
                "include_prior": include_prior,
                "length_normalize": length_normalize,
                "log_likelihood": log_likelihood,
                "log_prior": log_prior,
            }
        )
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = (log_likelihood, log_prior)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(line + "\n")

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def stats(self) -> dict:
        with self._lock:
            tags = sorted({k[0] for k in self._entries})
            return {"path": str(self.path), "entries": len(self._entries), "model_tags": tags}

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            if self.path.exists():
                self.path.unlink()


class CachingBackend(Backend):
    """Wraps a backend with a :class:`ScoreCache` for the scoring calls.

    Generation and token-level calls pass through uncached.
    """

    def __init__(self, inner: Backend, cache: ScoreCache):
        self.inner = inner
        self.cache = cache
        self.model_tag = inner.model_tag
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _lookup(self, query, passage_ids, perm, opts):
        key = ScoreCache.key(self.model_tag, query.id, passage_ids, opts)
        found = self.cache.get(key)
        if found is not None:
            with self._lock:
                self.hits += 1
            ll, prior = found
            return key, ScoredPermutation(
                permutation=perm,
                log_likelihood=ll,
                log_prior=prior,
                model_tag=self.model_tag,
                from_cache=True,
            )
        with self._lock:
            self.misses += 1
        return key, None

    def score_permutation(self, query, retrieval, perm, opts=_DEFAULT_OPTS):
        pids = [retrieval.passages[i - 1].id for i in perm.indices]
        key, cached = self._lookup(query, pids, perm, opts)
        if cached is not None:
            return cached
        scored = self.inner.score_permutation(query, retrieval, perm, opts)
        self.cache.put(key, scored.log_likelihood, scored.log_prior)
        return scored

    def score_passage(self, query, passage, opts=_DEFAULT_OPTS):
        perm = Permutation((passage.retriever_rank,))
        key, cached = self._lookup(query, [passage.id], perm, opts)
        if cached is not None:
            return cached
        scored = self.inner.score_passage(query, passage, opts)
        self.cache.put(key, scored.log_likelihood, scored.log_prior)
        return scored

    def generate(self, query, ordered_passages):
        return self.inner.generate(query, ordered_passages)

    def first_token_distribution(self, query, retrieval, perm):
        return self.inner.first_token_distribution(query, retrieval, perm)

    def query_token_probabilities(self, query, passage):
        return self.inner.query_token_probabilities(query, passage)
