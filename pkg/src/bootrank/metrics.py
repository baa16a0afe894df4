"""Ranking metrics, TREC run file I/O, and embedding-space ensembling.

nDCG uses the exponential gain form (2^grade - 1) / log2(rank + 1) with the
ideal ranking computed from the qrels grades truncated at k. Queries absent
from the qrels are excluded from averages (their count is reported);
queries judged but with no positive grade contribute 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import dense
from .corpus import Qrels
from .dense import DenseModel
from .errors import ConfigError, DataError
from .ranking import RankedList


@dataclass
class Report:
    """One metric over a run: per-query values, their mean, and coverage counts."""

    metric: str
    k: int
    per_query: dict[str, float]
    mean: float
    n: int
    excluded: int

    def to_dict(self) -> dict:
        return {"metric": self.metric, "k": self.k, "per_query": self.per_query,
                "mean": self.mean, "n": self.n, "excluded": self.excluded}


def _gain(grade: int) -> float:
    return float(2 ** grade - 1)


def _dcg(grades: Sequence[int], k: int) -> float:
    return sum(_gain(g) / math.log2(i + 2) for i, g in enumerate(grades[:k]))


def _evaluate(run: Mapping[str, RankedList], qrels: Qrels, k: int, metric: str,
              fn) -> Report:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    excluded = 0
    for qid, ranked in run.items():
        if qid not in qrels:
            excluded += 1
            continue
        per_query[qid] = fn(ranked, qrels.for_query(qid))
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return Report(metric=metric, k=k, per_query=per_query, mean=mean,
                  n=len(per_query), excluded=excluded)


def ndcg_at_k(run: Mapping[str, RankedList], qrels: Qrels, k: int = 10) -> Report:
    def one(ranked: RankedList, grades: dict[str, int]) -> float:
        got = [grades.get(pid, 0) for pid in ranked.passage_ids[:k]]
        ideal = sorted(grades.values(), reverse=True)
        idcg = _dcg(ideal, k)
        return _dcg(got, k) / idcg if idcg > 0 else 0.0

    return _evaluate(run, qrels, k, f"ndcg@{k}", one)


def recall_at_k(run: Mapping[str, RankedList], qrels: Qrels, k: int = 100) -> Report:
    def one(ranked: RankedList, grades: dict[str, int]) -> float:
        relevant = {pid for pid, g in grades.items() if g > 0}
        if not relevant:
            return 0.0
        hits = sum(1 for pid in ranked.passage_ids[:k] if pid in relevant)
        return hits / len(relevant)

    return _evaluate(run, qrels, k, f"recall@{k}", one)


def topk_accuracy(run: Mapping[str, RankedList], qrels: Qrels, k: int = 10) -> Report:
    def one(ranked: RankedList, grades: dict[str, int]) -> float:
        relevant = {pid for pid, g in grades.items() if g > 0}
        if not relevant:
            return 0.0
        return 1.0 if any(pid in relevant for pid in ranked.passage_ids[:k]) else 0.0

    return _evaluate(run, qrels, k, f"top{k}_accuracy", one)


def ensemble_search(models: Sequence[DenseModel], matrices: Sequence[np.ndarray],
                    ids: Sequence[str], query_text: str, k: int,
                    query_id: str = "") -> RankedList:
    """Top-k by the sum of each model's dot-product score (embedding concatenation)."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    if len(models) != len(matrices):
        raise ConfigError(f"{len(models)} models but {len(matrices)} matrices")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    for m, mat in zip(models, matrices):
        if mat.shape[0] != len(ids):
            raise DataError(f"matrix has {mat.shape[0]} rows for {len(ids)} ids")
        if mat.shape[1] != m.dim:
            raise DataError(f"matrix dim {mat.shape[1]} != model dim {m.dim}")
    scores = np.zeros(len(ids), dtype=np.float64)
    for model, matrix in zip(models, matrices):
        scores += matrix @ dense.encode(model, query_text, side="query")
    order = np.lexsort((np.arange(len(ids)), -scores))[:k]
    return RankedList(query_id,
                      tuple(ids[i] for i in order),
                      tuple(scores[i] for i in order))


def write_run(run: Mapping[str, RankedList], path: str, tag: str = "bootrank") -> None:
    """TREC format: `qid Q0 passage_id rank score tag`, scores to 6 decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in run.items():
            for rank, pid, score in ranked:
                fh.write(f"{qid} Q0 {pid} {rank} {score:.6f} {tag}\n")


def read_run(path: str) -> dict[str, RankedList]:
    """Parse a TREC run file; ranks must be contiguous from 1 per query."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, _ = parts
            try:
                rows.setdefault(qid, []).append((int(rank), pid, float(score)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rank or score") from None
    run: dict[str, RankedList] = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        if [rank for rank, _, _ in entries] != list(range(1, len(entries) + 1)):
            raise DataError(f"{path}: ranks for query {qid!r} are not contiguous from 1")
        run[qid] = RankedList(qid, tuple(pid for _, pid, _ in entries),
                              tuple(score for _, _, score in entries))
    return run
