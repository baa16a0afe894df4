"""Alternating bootstrapping between the dense retriever and the reranker.

Warm-up trains retriever D0 to imitate BM25 rankings. Each refinement
iteration t then (a) trains a freshly initialized reranker to imitate the
current retriever's soft labels, (b) reranks the retriever's candidate
lists, (c) extracts new positives/negatives from the reranked order, and
(d) retrains the retriever from D0 on those labels. Re-initialization is
the default discipline: the retriever always restarts from D0 and the
reranker from a fresh seeded init; `warm_start` flips both to continue from
the previous iteration's weights.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Sequence

from . import bm25, dense, reranker
from .corpus import Corpus, Qrels, QuerySet
from .dense import DenseModel, TrainConfig, TrainingExample
from .errors import BootstrapError, ConfigError, DataError
from .metrics import ndcg_at_k
from .parallel import parallel_map
from .ranking import RankedList
from .reranker import RerankModel, RerankTrainConfig
from .textproc import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractionRule:
    """Window over a ranked list: top `k_pos` become positives, the bottom
    `k_neg` of the first `k` entries become negatives."""

    k: int = 50
    k_pos: int = 10
    k_neg: int = 5

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 1 <= self.k_pos < self.k:
            raise ConfigError(f"k_pos must be in [1, k), got {self.k_pos}")
        if not 1 <= self.k_neg <= self.k - self.k_pos:
            raise ConfigError(
                f"k_neg must be in [1, k - k_pos], got {self.k_neg}")


def extract_labels(ranked: RankedList, rule: ExtractionRule) -> TrainingExample:
    """Positives are ranks 1..k_pos; negatives are the last k_neg ranks of the
    k-window (ranks k-k_neg+1..k), or the list tail when it is shorter than k.

    Lists of at most k_pos entries yield no negatives; training skips such
    examples.
    """
    ids = ranked.passage_ids[:rule.k]
    positives = ids[:rule.k_pos]
    if len(ids) >= rule.k:
        negatives = ids[rule.k - rule.k_neg:rule.k]
    else:
        n_free = len(ids) - len(positives)
        take = min(rule.k_neg, n_free)
        negatives = ids[len(ids) - take:] if take > 0 else ()
    return TrainingExample(query_id=ranked.query_id, positives=positives,
                           negatives=negatives)


@dataclass
class EvalContext:
    """Held-out (or synthetic-oracle) queries and judgments scored each iteration."""

    queries: QuerySet
    qrels: Qrels
    k: int = 10


@dataclass
class IterationRecord:
    t: int
    retriever_ndcg: float | None
    reranker_ndcg: float | None
    examples_used: int
    examples_skipped: int
    retriever_init_checksum: str
    retriever_checksum: str
    reranker_init_checksum: str | None = None
    reranker_checksum: str | None = None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "retriever_ndcg": self.retriever_ndcg,
            "reranker_ndcg": self.reranker_ndcg,
            "examples_used": self.examples_used,
            "examples_skipped": self.examples_skipped,
            "retriever_init_checksum": self.retriever_init_checksum,
            "retriever_checksum": self.retriever_checksum,
            "reranker_init_checksum": self.reranker_init_checksum,
            "reranker_checksum": self.reranker_checksum,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "IterationRecord":
        return cls(**{k: obj[k] for k in (
            "t", "retriever_ndcg", "reranker_ndcg", "examples_used",
            "examples_skipped", "retriever_init_checksum", "retriever_checksum",
            "reranker_init_checksum", "reranker_checksum")})


@dataclass
class BootstrapState:
    """Everything the loop owns: data, current models, per-iteration history."""

    corpus: Corpus
    queries: QuerySet
    rule: ExtractionRule
    seed: int
    include_titles: bool
    t: int
    warmup_model: DenseModel
    retriever: DenseModel
    reranker: RerankModel | None
    trace: list[IterationRecord]
    retrievers: dict[int, DenseModel]
    rerankers: dict[int, RerankModel]


def write_labels(examples: Sequence[TrainingExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "query_id": ex.query_id,
                "positives": list(ex.positives),
                "negatives": list(ex.negatives),
            }) + "\n")


def load_labels(path: str) -> list[TrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
            out.append(TrainingExample(query_id=str(obj["query_id"]),
                                       positives=tuple(obj["positives"]),
                                       negatives=tuple(obj["negatives"])))
    return out


def write_trace(state: BootstrapState, path: str) -> None:
    payload = {"seed": state.seed,
               "iterations": [rec.to_dict() for rec in state.trace]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trace(path: str) -> tuple[int, list[IterationRecord]]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return int(payload["seed"]), [IterationRecord.from_dict(obj)
                                  for obj in payload["iterations"]]


def _eval_retriever(model: DenseModel, corpus: Corpus, eval_ctx: EvalContext,
                    include_titles: bool, threads: int) -> float:
    matrix = dense.encode_corpus(model, corpus, include_titles, threads)
    pairs = [(q.id, q.text) for q in eval_ctx.queries]
    run = dense.search_many(model, matrix, corpus.ids, pairs, eval_ctx.k, threads)
    return ndcg_at_k(run, eval_ctx.qrels, eval_ctx.k).mean


def _write_iteration(workdir: str, state: BootstrapState, t: int,
                     examples: Sequence[TrainingExample]) -> None:
    dense.save(state.retrievers[t], os.path.join(workdir, f"iter{t}.retriever.ckpt"))
    if t in state.rerankers:
        reranker.save(state.rerankers[t], os.path.join(workdir, f"iter{t}.reranker.ckpt"))
    write_labels(examples, os.path.join(workdir, f"iter{t}.labels.jsonl"))
    write_trace(state, os.path.join(workdir, "trace.json"))


def _usable(examples: Sequence[TrainingExample]) -> list[TrainingExample]:
    return [ex for ex in examples if ex.positives and ex.negatives]


def warmup(corpus: Corpus, queries: QuerySet, rule: ExtractionRule,
           retriever_cfg: TrainConfig, seed: int, dim: int = 64,
           buckets: int = 65536, bm25_index: "bm25.Bm25Index | None" = None,
           bm25_params: "bm25.Bm25Params | None" = None,
           eval_ctx: EvalContext | None = None, include_titles: bool = True,
           threads: int = 1, workdir: str | None = None) -> BootstrapState:
    """Mine BM25 labels for every query and train retriever D0 to imitate them."""
    if len(queries) == 0:
        raise DataError("no training queries")
    index = bm25_index or bm25.build(corpus, bm25_params, include_titles)
    lists = parallel_map(lambda q: bm25.search(index, q.text, rule.k, query_id=q.id),
                         queries, threads)
    examples = [extract_labels(ranked, rule) for ranked in lists]
    if not _usable(examples):
        raise BootstrapError(
            f"warm-up produced no usable examples from {len(examples)} queries")
    init_model = DenseModel.init(dim, buckets, seed=derive_seed(seed, "retriever-init"))
    cfg = replace(retriever_cfg, seed=derive_seed(seed, "retriever-train", 0))
    model, stats = dense.train(init_model, examples, queries, corpus, cfg,
                               include_titles)
    ndcg = None
    if eval_ctx is not None:
        ndcg = _eval_retriever(model, corpus, eval_ctx, include_titles, threads)
    record = IterationRecord(
        t=0, retriever_ndcg=ndcg, reranker_ndcg=None,
        examples_used=stats.examples_used, examples_skipped=stats.examples_skipped,
        retriever_init_checksum=init_model.checksum(),
        retriever_checksum=model.checksum())
    state = BootstrapState(
        corpus=corpus, queries=queries, rule=rule, seed=seed,
        include_titles=include_titles, t=0, warmup_model=model, retriever=model,
        reranker=None, trace=[record], retrievers={0: model}, rerankers={})
    if workdir:
        os.makedirs(workdir, exist_ok=True)
        _write_iteration(workdir, state, 0, examples)
    return state


def iterate(state: BootstrapState, iterations: int, retriever_cfg: TrainConfig,
            reranker_cfg: RerankTrainConfig, retrieve_k: int = 100,
            rerank_depth: int = 100, self_supervision: bool = False,
            warm_start: bool = False, eval_ctx: EvalContext | None = None,
            threads: int = 1, workdir: str | None = None) -> BootstrapState:
    """Run `iterations` refinement rounds, extending the state in place.

    With `self_supervision` the reranker step is skipped and labels are
    extracted from the retriever's own ranking. With `warm_start` the
    retriever continues from the previous iteration's weights (instead of
    D0) and the reranker from the previous reranker (instead of fresh init).
    Results are invariant to how rounds are grouped across iterate() calls.
    """
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    if retrieve_k < rerank_depth:
        logger.info("retrieve_k %d < rerank_depth %d; depth is capped per list",
                    retrieve_k, rerank_depth)
    corpus, queries = state.corpus, state.queries
    if workdir:
        os.makedirs(workdir, exist_ok=True)
    template = None
    for t in range(state.t + 1, state.t + 1 + iterations):
        prev = state.retriever
        matrix_prev = dense.encode_corpus(prev, corpus, state.include_titles, threads)
        pairs = [(q.id, q.text) for q in queries]
        train_lists = dense.search_many(prev, matrix_prev, corpus.ids, pairs,
                                        min(retrieve_k, len(corpus)), threads)
        new_reranker = None
        rr_stats = None
        if self_supervision:
            label_lists = train_lists
        else:
            if template is None:
                template = RerankModel.init(prev.dim, prev.buckets,
                                            reranker_cfg.hidden, seed=0)
            use_warm = (reranker_cfg.warm_start or warm_start) and state.reranker is not None
            cfg = replace(reranker_cfg,
                          seed=derive_seed(state.seed, "reranker-train", t),
                          warm_start=use_warm)
            new_reranker, rr_stats = reranker.train(
                template, queries, corpus, train_lists, cfg,
                init_seed=derive_seed(state.seed, "reranker-init", t),
                previous=state.reranker if use_warm else None,
                include_titles=state.include_titles)
            label_lists = {
                q.id: ranked for q, ranked in zip(queries, parallel_map(
                    lambda q: reranker.rerank(new_reranker, q.text, train_lists[q.id],
                                              corpus, rerank_depth,
                                              state.include_titles),
                    queries, threads))
            }
        examples = [extract_labels(label_lists[q.id], rule=state.rule)
                    for q in queries]
        if not _usable(examples):
            raise BootstrapError(
                f"iteration {t}: no usable training examples from "
                f"{len(examples)} queries")
        start_model = state.retriever if warm_start else state.warmup_model
        cfg = replace(retriever_cfg, seed=derive_seed(state.seed, "retriever-train", t))
        new_retriever, stats = dense.train(start_model, examples, queries, corpus,
                                           cfg, state.include_titles)
        retr_ndcg = None
        rr_ndcg = None
        if eval_ctx is not None:
            retr_ndcg = _eval_retriever(new_retriever, corpus, eval_ctx,
                                        state.include_titles, threads)
            if new_reranker is not None:
                val_pairs = [(q.id, q.text) for q in eval_ctx.queries]
                val_lists = dense.search_many(prev, matrix_prev, corpus.ids,
                                              val_pairs,
                                              min(retrieve_k, len(corpus)), threads)
                rr_run = {
                    q.id: ranked for q, ranked in zip(eval_ctx.queries, parallel_map(
                        lambda q: reranker.rerank(new_reranker, q.text,
                                                  val_lists[q.id], corpus,
                                                  rerank_depth,
                                                  state.include_titles),
                        eval_ctx.queries, threads))
                }
                rr_ndcg = ndcg_at_k(rr_run, eval_ctx.qrels, eval_ctx.k).mean
        record = IterationRecord(
            t=t, retriever_ndcg=retr_ndcg, reranker_ndcg=rr_ndcg,
            examples_used=stats.examples_used,
            examples_skipped=stats.examples_skipped,
            retriever_init_checksum=start_model.checksum(),
            retriever_checksum=new_retriever.checksum(),
            reranker_init_checksum=rr_stats.init_checksum if rr_stats else None,
            reranker_checksum=new_reranker.checksum() if new_reranker else None)
        state.t = t
        state.retriever = new_retriever
        state.retrievers[t] = new_retriever
        if new_reranker is not None:
            state.reranker = new_reranker
            state.rerankers[t] = new_reranker
        state.trace.append(record)
        if workdir:
            _write_iteration(workdir, state, t, examples)
    return state


@dataclass
class SelectedModels:
    retriever: DenseModel
    retriever_iteration: int
    reranker: RerankModel | None
    reranker_iteration: int | None


def select_final(state: BootstrapState) -> SelectedModels:
    """Pick the best refinement iteration (t >= 1) per component by recorded
    nDCG, earliest iteration on ties."""
    candidates = [rec for rec in state.trace if rec.t >= 1]
    if not candidates:
        raise BootstrapError("select_final requires at least one refinement iteration")
    scored = [rec for rec in candidates if rec.retriever_ndcg is not None]
    if not scored:
        raise BootstrapError("no metrics recorded; run with an EvalContext")
    best = max(scored, key=lambda rec: (rec.retriever_ndcg, -rec.t))
    rr_scored = [rec for rec in candidates if rec.reranker_ndcg is not None]
    rr_best = max(rr_scored, key=lambda rec: (rec.reranker_ndcg, -rec.t)) if rr_scored else None
    return SelectedModels(
        retriever=state.retrievers[best.t],
        retriever_iteration=best.t,
        reranker=state.rerankers[rr_best.t] if rr_best else None,
        reranker_iteration=rr_best.t if rr_best else None)
