"""Command-line interface.

Subcommands: synth, rerank, baseline, eval, bias-report, distill-build,
cache. Option precedence is flags > config file > environment >
defaults; the environment supplies the remote endpoint, model tag and
API key (PERMRANK_ENDPOINT, PERMRANK_MODEL, PERMRANK_API_KEY).

All randomness flows from one top-level ``--seed``, expanded into
per-query sub-seeds as ``stable_seed(seed, query_id)``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import baselines as bl
from .backend import (
    Backend,
    BackendOptions,
    CachingBackend,
    RemoteBackend,
    ScoreCache,
    SimulatedBackend,
)
from .core import Query, Ranking, RetrievalList, stable_seed
from .distill import build_distill_dataset
from .ingest import load_dataset, synth_corpus
from .metrics import (
    bias_report,
    build_eval_report,
    exact_match,
    reciprocal_rank,
    rouge_l,
    write_bias_csv,
    write_eval_report,
)
from .pipeline import (
    DesignKind,
    RerankStrategy,
    pid_rerank_with_model,
    ranking_record,
    self_consistency,
    write_rankings_jsonl,
)
from .report import render_bias_figure
from .solver import BiasProfile, DisentangledModel, SolverConfig, UtilityVector

log = logging.getLogger("permrank")

USAGE_ERROR = 2
RUNTIME_ERROR = 1

BASELINE_METHODS = (
    "bayes",
    "bayes_plus",
    "qg",
    "lingua",
    "listwise",
    "self_consistency",
    "retriever",
    "random",
)


class _Resolver:
    """flags > config file > environment > defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: dict = {}
        path = getattr(args, "config", None)
        if path:
            with open(path) as fh:
                self.config = json.load(fh)

    def get(self, name: str, default=None, env: str | None = None, cast=None):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.config.get(name)
        if value is None and env is not None:
            value = os.environ.get(env)
        if value is None:
            value = default
        if value is not None and cast is not None:
            value = cast(value)
        return value


def _backend_options(res: _Resolver) -> BackendOptions:
    return BackendOptions(
        include_prior=bool(res.get("include_prior", False)),
        length_normalize=not bool(res.get("no_length_normalize", False)),
        max_concurrency=res.get("concurrency", 4, cast=int),
        timeout=res.get("timeout", 30.0, cast=float),
        retry_budget=res.get("retries", 2, cast=int),
    )


def _build_backend(res: _Resolver, seed: int) -> tuple[Backend, Backend]:
    """Returns (backend for use, inner backend carrying call counters)."""
    kind = res.get("backend", "sim")
    if kind == "sim":
        inner: Backend = SimulatedBackend(
            seed=seed, noise_sigma=res.get("sim_noise", 0.0, cast=float)
        )
    elif kind == "remote":
        endpoint = res.get("endpoint", env="PERMRANK_ENDPOINT")
        model = res.get("model", env="PERMRANK_MODEL")
        if not endpoint or not model:
            raise ConfigError("remote backend needs --endpoint and --model (or env)")
        inner = RemoteBackend(
            endpoint,
            model,
            api_key=res.get("api_key", env="PERMRANK_API_KEY"),
            default_opts=_backend_options(res),
        )
    else:
        raise ConfigError(f"unknown backend {kind!r}")

    cache_path = res.get("cache")
    if cache_path:
        return CachingBackend(inner, ScoreCache(cache_path)), inner
    return inner, inner


def _backend_calls(inner: Backend) -> int:
    return getattr(inner, "score_calls", None) or getattr(inner, "http_calls", 0) or 0


class ConfigError(ValueError):
    pass


def _load_pairs(res: _Resolver) -> list[tuple[Query, RetrievalList]]:
    path = res.get("dataset")
    if not path or not Path(path).exists():
        raise ConfigError(f"dataset path missing or not found: {path!r}")
    errors: list[str] = []
    pairs = load_dataset(path, errors=errors)
    for message in errors:
        log.warning("dataset: %s", message)
    if not pairs:
        raise ConfigError(f"no valid records in {path}")
    return pairs


def _strategy_for(res: _Resolver, seed: int, query_id: str) -> RerankStrategy:
    sub = stable_seed(seed, query_id)
    return RerankStrategy(
        design=DesignKind(res.get("design", "random")),
        m=res.get("m", cast=int),
        length=res.get("length", cast=int),
        tau=res.get("tau", cast=float),
        seed=sub,
        solver=SolverConfig(
            restarts=res.get("restarts", 8, cast=int),
            seed=sub,
        ),
        backend_opts=_backend_options(res),
    )


def _run_per_query(pairs, jobs, worker):
    """Run ``worker`` per query, preserving a deterministic output order."""
    results: dict[str, list[dict]] = {}
    failures: dict[str, str] = {}

    def run(pair):
        query, retrieval = pair
        try:
            return query.id, worker(query, retrieval), None
        except Exception as exc:  # noqa: BLE001 - reported per query
            return query.id, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, pairs))
    else:
        outcomes = [run(p) for p in pairs]

    for qid, records, error in outcomes:
        if error is None:
            results[qid] = records
        else:
            failures[qid] = error
            log.error("query %s failed: %s", qid, error)
    return results, failures


def _emit(results: dict[str, list[dict]], out_path) -> int:
    records = [rec for qid in sorted(results) for rec in results[qid]]
    return write_rankings_jsonl(out_path, records)


def cmd_rerank(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    seed = res.get("seed", 0, cast=int)
    backend, inner = _build_backend(res, seed)
    pairs = _load_pairs(res)
    jobs = res.get("jobs", 1, cast=int)
    trace_path = res.get("fit_trace")
    trace = open(trace_path, "w") if trace_path else None

    def worker(query: Query, retrieval: RetrievalList) -> list[dict]:
        strategy = _strategy_for(res, seed, query.id)
        ranking, model = pid_rerank_with_model(query, retrieval, backend, strategy, trace=trace)
        return [ranking_record(query.id, ranking, model)]

    try:
        results, failures = _run_per_query(pairs, jobs, worker)
    finally:
        if trace is not None:
            trace.close()

    count = _emit(results, res.get("output", "rankings.jsonl"))
    residuals = [
        rec["residual"] for recs in results.values() for rec in recs if rec["residual"] is not None
    ]
    mean_residual = sum(residuals) / len(residuals) if residuals else float("nan")
    hits = getattr(backend, "hits", 0)
    misses = getattr(backend, "misses", 0)
    rate = hits / (hits + misses) if (hits + misses) else 0.0
    print(
        f"rerank: queries={count} failed={len(failures)} "
        f"backend_calls={_backend_calls(inner)} cache_hits={hits} "
        f"cache_hit_rate={rate:.2f} mean_residual={mean_residual:.3e}"
    )
    if failures and not res.get("keep_going", False):
        return RUNTIME_ERROR
    return 0


def _baseline_worker(method: str, backend: Backend, res: _Resolver, seed: int):
    samples = res.get("samples", 1, cast=int)
    votes = res.get("k", 30, cast=int)

    def worker(query: Query, retrieval: RetrievalList) -> list[dict]:
        if method == "retriever":
            ranking = Ranking(
                tuple(p.id for p in retrieval.passages), provenance="retriever"
            )
            return [ranking_record(query.id, ranking)]
        if method == "random":
            records = []
            for s in range(samples):
                rng = random.Random(stable_seed(seed, query.id, s))
                ids = [p.id for p in retrieval.passages]
                rng.shuffle(ids)
                ranking = Ranking(tuple(ids), provenance="random")
                records.append(
                    ranking_record(query.id, ranking, sample=s if samples > 1 else None)
                )
            return records
        if method == "self_consistency":
            answer = self_consistency(
                query, retrieval, backend, k=votes, seed=stable_seed(seed, query.id)
            )
            return [{"query_id": query.id, "method": method, "answer": answer}]
        if method in ("bayes", "qg", "lingua"):
            scores = []
            for passage in retrieval.passages:
                if method == "bayes":
                    scores.append(bl.bayes_saliency(query, passage, backend, include_prior=True))
                elif method == "qg":
                    scores.append(bl.qg_score(query, passage, backend))
                else:
                    scores.append(bl.lingua_score(query, passage, backend))
            ranking = bl.rank_by_pointwise(scores, retrieval, provenance=method)
            return [ranking_record(query.id, ranking)]
        if method in ("bayes_plus", "listwise"):
            ranking = bl.bayes_saliency_listwise(
                query, retrieval, backend, include_prior=(method == "bayes_plus")
            )
            return [ranking_record(query.id, ranking)]
        raise ConfigError(f"unknown baseline method {method!r}")

    return worker


def cmd_baseline(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    seed = res.get("seed", 0, cast=int)
    backend, inner = _build_backend(res, seed)
    pairs = _load_pairs(res)
    method = args.method
    worker = _baseline_worker(method, backend, res, seed)
    results, failures = _run_per_query(pairs, res.get("jobs", 1, cast=int), worker)
    count = _emit(results, res.get("output", "baseline.jsonl"))
    print(
        f"baseline[{method}]: queries={count} failed={len(failures)} "
        f"backend_calls={_backend_calls(inner)}"
    )
    if failures and not res.get("keep_going", False):
        return RUNTIME_ERROR
    return 0


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    predictions = _read_jsonl(args.pred)
    if not predictions:
        raise ConfigError(f"no predictions in {args.pred}")
    pairs = _load_pairs(res)
    gold = {q.id: (q, rl) for q, rl in pairs}

    wanted = [m.strip() for m in (args.metrics or "").split(",") if m.strip()]
    is_ranking = "passage_ids" in predictions[0]
    if not wanted:
        wanted = ["mrr"] if is_ranking else ["em", "rouge_l"]
    allowed = {"mrr"} if is_ranking else {"em", "rouge_l"}
    bad = [m for m in wanted if m not in allowed]
    if bad:
        kind = "ranking" if is_ranking else "answer"
        raise ConfigError(f"metrics {bad} unavailable for {kind} predictions")

    grouped: dict[str, list[dict]] = {}
    unknown = []
    for rec in predictions:
        qid = rec.get("query_id")
        if qid in gold:
            grouped.setdefault(qid, []).append(rec)
        else:
            unknown.append(qid)
    if unknown:
        log.warning("ignoring %d predictions with unknown query ids", len(unknown))
    if not grouped:
        raise ConfigError("no prediction query ids match the dataset")

    per_query: dict[str, dict[str, float]] = {}
    for qid, recs in sorted(grouped.items()):
        query, _ = gold[qid]
        vals: dict[str, float] = {}
        if is_ranking:
            rrs = [
                reciprocal_rank(Ranking(tuple(r["passage_ids"])), set(query.gold_passage_ids))
                for r in recs
            ]
            vals["mrr"] = sum(rrs) / len(rrs)
        else:
            if query.gold_answer is None:
                log.warning("query %s has no gold answer; skipped", qid)
                continue
            answers = [r["answer"] for r in recs]
            if "em" in wanted:
                ems = [100.0 * exact_match(a, query.gold_answer) for a in answers]
                vals["em"] = sum(ems) / len(ems)
            if "rouge_l" in wanted:
                rls = [rouge_l(a, query.gold_answer) for a in answers]
                vals["rouge_l"] = sum(rls) / len(rls)
        per_query[qid] = vals

    if not per_query:
        raise ConfigError("no evaluable queries")
    report = build_eval_report(per_query)
    out = res.get("output", "eval_report.json")
    write_eval_report(report, out)
    summary = " ".join(f"{k}={v:.3f}" for k, v in sorted(report.aggregates.items()))
    print(f"eval: queries={report.count} {summary} -> {out}")
    return 0


def cmd_bias_report(args: argparse.Namespace) -> int:
    records = _read_jsonl(args.input)
    models = []
    for rec in records:
        if rec.get("bias") is None or rec.get("degenerate"):
            continue
        models.append(
            DisentangledModel(
                bias=BiasProfile(tuple(rec["bias"])),
                utility=UtilityVector(tuple(rec["utilities"] or [0.0] * len(rec["bias"]))),
                residual_sse=rec.get("residual") or 0.0,
                iterations=0,
                restarts_used=0,
                converged=True,
                underdetermined=False,
                degenerate=False,
            )
        )
    if not models:
        raise ConfigError("no non-degenerate fitted models in input")
    report = bias_report(models)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "bias_report.json"
    with json_path.open("w") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
    write_bias_csv(report, out_dir / "bias_report.csv")
    render_bias_figure(report, out_dir / "bias_report.png")
    mean = ", ".join(f"{v:.3f}" for v in report.mean_a)
    print(f"bias-report: models={report.count} mean_a=[{mean}] -> {out_dir}")
    return 0


def cmd_distill_build(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    seed = res.get("seed", 0, cast=int)
    backend, inner = _build_backend(res, seed)
    pairs = _load_pairs(res)
    out = res.get("output", "distill.jsonl")
    written = build_distill_dataset(
        pairs,
        backend,
        k=res.get("k", 30, cast=int),
        seed=seed,
        sink=out,
        opts=_backend_options(res),
    )
    print(
        f"distill-build: records_written={written} "
        f"skipped={len(pairs) - written} backend_calls={_backend_calls(inner)}"
    )
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    count = synth_corpus(
        n_queries=args.queries,
        n_passages=args.passages,
        seed=args.seed or 0,
        out_path=args.output,
        sidecar_path=args.sidecar,
        noise_sigma=args.sim_noise or 0.0,
    )
    print(f"synth: queries={count} -> {args.output} (+ {args.sidecar})")
    return 0


def cmd_cache(args: argparse.Namespace) -> int:
    cache = ScoreCache(args.cache)
    if args.action == "stats":
        print(json.dumps(cache.stats()))
    else:
        n = len(cache)
        cache.clear()
        print(f"cache: cleared {n} entries from {args.cache}")
    return 0


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["sim", "remote"], default=None)
    p.add_argument("--sim-noise", dest="sim_noise", type=float, default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--api-key", dest="api_key", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--include-prior", dest="include_prior", action="store_true", default=None)
    p.add_argument(
        "--no-length-normalize", dest="no_length_normalize", action="store_true", default=None
    )
    p.add_argument("--concurrency", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--retries", type=int, default=None)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--in", dest="dataset", required=True, help="dataset JSONL path")
    p.add_argument("--out", dest="output", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--keep-going", dest="keep_going", action="store_true", default=None)
    p.add_argument("--config", default=None, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="permrank",
        description="Debiased passage reranking via scored permutation interventions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rerank", help="fit bias/utility per query and emit rankings")
    _add_run_flags(p)
    _add_backend_flags(p)
    p.add_argument("--design", choices=[d.value for d in DesignKind], default=None)
    p.add_argument("--m", type=int, default=None, help="random-design size (default 3N)")
    p.add_argument("--L", dest="length", type=int, default=None, help="pruned prefix length")
    p.add_argument("--tau", type=float, default=None, help="variable-pruning mass threshold")
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--fit-trace", dest="fit_trace", default=None)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("baseline", help="run a baseline reranker or answerer")
    p.add_argument("--method", choices=BASELINE_METHODS, required=True)
    _add_run_flags(p)
    _add_backend_flags(p)
    p.add_argument("--samples", type=int, default=None, help="random orders per query")
    p.add_argument("--k", type=int, default=None, help="self-consistency vote count")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score predictions against the dataset")
    p.add_argument("--pred", required=True, help="predictions JSONL (rankings or answers)")
    p.add_argument("--in", dest="dataset", required=True)
    p.add_argument("--metrics", default=None, help="comma list: em,rouge_l,mrr")
    p.add_argument("--out", dest="output", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bias-report", help="aggregate fitted bias profiles")
    p.add_argument("--in", dest="input", required=True, help="rerank output JSONL")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    p.set_defaults(func=cmd_bias_report)

    p = sub.add_parser("distill-build", help="build the teacher-score dataset")
    _add_run_flags(p)
    _add_backend_flags(p)
    p.add_argument("--k", type=int, default=None, help="permutations per query (default 30)")
    p.set_defaults(func=cmd_distill_build)

    p = sub.add_parser("synth", help="generate a synthetic corpus + truth sidecar")
    p.add_argument("--queries", type=int, required=True)
    p.add_argument("--passages", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--sim-noise", dest="sim_noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cache", help="score-cache lifecycle")
    p.add_argument("action", choices=["stats", "clear"])
    p.add_argument("--cache", required=True)
    p.set_defaults(func=cmd_cache)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - top-level fatal handler
        log.error("fatal: %s", exc)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
