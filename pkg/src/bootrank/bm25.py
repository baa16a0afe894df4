"""Exact-term BM25 indexing, scoring and search.

idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), always positive, so a passage
scores non-zero iff it shares at least one term with the query. score() and
search() accumulate term contributions in the same order, so their floats
are bit-identical and search equals brute-force score-then-sort exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .binio import Reader, Writer
from .corpus import Corpus
from .errors import ConfigError, DataError
from .ranking import RankedList
from .textproc import tokenize

_MAGIC = "ABIX1"


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ConfigError(f"k1 must be >= 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ConfigError(f"b must be in [0, 1], got {self.b}")


class Bm25Index:
    """Inverted index keyed by raw term string with per-term (ordinal, tf) postings."""

    def __init__(self, params: Bm25Params, ids: Sequence[str],
                 doc_lengths: np.ndarray,
                 postings: dict[str, tuple[np.ndarray, np.ndarray]],
                 include_titles: bool = True):
        self.params = params
        self.ids = tuple(ids)
        self._ordinal = {pid: i for i, pid in enumerate(self.ids)}
        self.doc_lengths = np.asarray(doc_lengths, dtype=np.int64)
        self.postings = postings
        self.include_titles = include_titles
        if len(self._ordinal) != len(self.ids):
            raise DataError("duplicate passage ids in index")
        if len(self.doc_lengths) != len(self.ids):
            raise DataError("doc_lengths does not match passage count")

    @property
    def n_passages(self) -> int:
        return len(self.ids)

    @property
    def avgdl(self) -> float:
        return float(self.doc_lengths.mean())

    def df(self, term: str) -> int:
        entry = self.postings.get(term)
        return 0 if entry is None else len(entry[0])

    def idf(self, term: str) -> float:
        df = self.df(term)
        n = self.n_passages
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def ordinal(self, passage_id: str) -> int:
        try:
            return self._ordinal[passage_id]
        except KeyError:
            raise DataError(f"unknown passage id {passage_id!r}") from None


def build(corpus: Corpus, params: Bm25Params | None = None,
          include_titles: bool = True) -> Bm25Index:
    """Index every passage of `corpus` (title + text when titled)."""
    params = params or Bm25Params()
    raw: dict[str, list[tuple[int, int]]] = {}
    lengths = np.zeros(len(corpus), dtype=np.int64)
    for i, p in enumerate(corpus):
        tokens = tokenize(corpus.index_text(p.id, include_titles))
        lengths[i] = len(tokens)
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            raw.setdefault(term, []).append((i, tf))
    postings = {
        term: (np.array([o for o, _ in plist], dtype=np.uint32),
               np.array([tf for _, tf in plist], dtype=np.uint32))
        for term, plist in raw.items()
    }
    return Bm25Index(params, corpus.ids, lengths, postings, include_titles)


def _unique_in_order(tokens: Sequence[str]) -> list[str]:
    return list(dict.fromkeys(tokens))


def score(index: Bm25Index, query_tokens: Sequence[str], passage_id: str) -> float:
    """BM25 score of one passage for pre-tokenized query terms."""
    ordinal = index.ordinal(passage_id)
    k1, b = index.params.k1, index.params.b
    avgdl = index.avgdl
    norm = 1.0 - b + b * (float(index.doc_lengths[ordinal]) / avgdl)
    total = 0.0
    for term in _unique_in_order(query_tokens):
        entry = index.postings.get(term)
        if entry is None:
            continue
        ordinals, tfs = entry
        pos = int(np.searchsorted(ordinals, ordinal))
        if pos == len(ordinals) or ordinals[pos] != ordinal:
            continue
        tf = float(tfs[pos])
        total += index.idf(term) * ((tf * (k1 + 1.0)) / (tf + k1 * norm))
    return total


def search(index: Bm25Index, query_text: str, k: int,
           query_id: str = "") -> RankedList:
    """Top-k passages by BM25; zero-score passages are excluded, ties break by ordinal."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    k1, b = index.params.k1, index.params.b
    avgdl = index.avgdl
    norms = 1.0 - b + b * (index.doc_lengths.astype(np.float64) / avgdl)
    scores = np.zeros(index.n_passages, dtype=np.float64)
    touched = np.zeros(index.n_passages, dtype=bool)
    for term in _unique_in_order(tokenize(query_text)):
        entry = index.postings.get(term)
        if entry is None:
            continue
        ordinals, tfs = entry
        tf = tfs.astype(np.float64)
        scores[ordinals] += index.idf(term) * ((tf * (k1 + 1.0)) / (tf + k1 * norms[ordinals]))
        touched[ordinals] = True
    candidates = np.flatnonzero(touched)
    order = candidates[np.lexsort((candidates, -scores[candidates]))][:k]
    return RankedList(query_id,
                      tuple(index.ids[i] for i in order),
                      tuple(scores[i] for i in order))


def save(index: Bm25Index, path: str) -> None:
    """Serialize the index; terms are written sorted so builds are byte-stable."""
    w = Writer()
    w.magic(_MAGIC)
    w.f64(index.params.k1)
    w.f64(index.params.b)
    w.u8(1 if index.include_titles else 0)
    w.u32(index.n_passages)
    for pid in index.ids:
        w.string(pid)
    w.u32_array(index.doc_lengths.astype(np.uint32))
    w.u32(len(index.postings))
    for term in sorted(index.postings):
        ordinals, tfs = index.postings[term]
        w.string(term)
        w.u32_array(ordinals)
        w.u32_array(tfs)
    with open(path, "wb") as fh:
        fh.write(w.finish())


def load(path: str) -> Bm25Index:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), _MAGIC)
    params = Bm25Params(k1=r.f64(), b=r.f64())
    include_titles = bool(r.u8())
    n = r.u32()
    ids = [r.string() for _ in range(n)]
    lengths = r.u32_array().astype(np.int64)
    postings: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(r.u32()):
        term = r.string()
        ordinals = r.u32_array()
        tfs = r.u32_array()
        postings[term] = (ordinals, tfs)
    return Bm25Index(params, ids, lengths, postings, include_titles)
