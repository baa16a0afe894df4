"""Corpus, query, and qrels containers with JSONL / TSV I/O and sentence cropping.

File conventions: corpus.jsonl and queries.jsonl hold one JSON object per
line with `_id` and `text` (passages may carry `title`); qrels are TSV with
the exact header `query-id<TAB>corpus-id<TAB>score`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, DataError
from .textproc import tokenize

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    title: str = ""


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    source_passage_id: str | None = None


class Corpus:
    """Ordered, id-unique passage collection."""

    def __init__(self, passages: Iterable[Passage]):
        self.passages: tuple[Passage, ...] = tuple(passages)
        self._ordinal: dict[str, int] = {}
        for i, p in enumerate(self.passages):
            if not p.id:
                raise DataError(f"passage at position {i} has an empty id")
            if not p.text.strip():
                raise DataError(f"passage {p.id!r} has empty text")
            if p.id in self._ordinal:
                raise DataError(f"duplicate passage id {p.id!r}")
            self._ordinal[p.id] = i
        if not self.passages:
            raise DataError("corpus is empty")

    def __len__(self) -> int:
        return len(self.passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self.passages)

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._ordinal

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.passages)

    def get(self, passage_id: str) -> Passage:
        try:
            return self.passages[self._ordinal[passage_id]]
        except KeyError:
            raise DataError(f"unknown passage id {passage_id!r}") from None

    def ordinal(self, passage_id: str) -> int:
        try:
            return self._ordinal[passage_id]
        except KeyError:
            raise DataError(f"unknown passage id {passage_id!r}") from None

    def index_text(self, passage_id: str, include_title: bool = True) -> str:
        """Text a retrieval component sees: title + newline + body when titled."""
        p = self.get(passage_id)
        if include_title and p.title:
            return p.title + "\n" + p.text
        return p.text

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.passages:
            h.update(p.id.encode("utf-8") + b"\x1f")
            h.update(p.title.encode("utf-8") + b"\x1f")
            h.update(p.text.encode("utf-8") + b"\x1e")
        return h.hexdigest()


class QuerySet:
    """Ordered, id-unique query collection."""

    def __init__(self, queries: Iterable[Query]):
        self.queries: tuple[Query, ...] = tuple(queries)
        self._by_id: dict[str, Query] = {}
        for i, q in enumerate(self.queries):
            if not q.id:
                raise DataError(f"query at position {i} has an empty id")
            if not q.text.strip():
                raise DataError(f"query {q.id!r} has empty text")
            if q.id in self._by_id:
                raise DataError(f"duplicate query id {q.id!r}")
            self._by_id[q.id] = q

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self) -> Iterator[Query]:
        return iter(self.queries)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._by_id

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.queries)

    def get(self, query_id: str) -> Query:
        try:
            return self._by_id[query_id]
        except KeyError:
            raise DataError(f"unknown query id {query_id!r}") from None

    def text(self, query_id: str) -> str:
        return self.get(query_id).text


class Qrels:
    """Graded relevance judgments: query id -> {passage id -> integer grade >= 0}."""

    def __init__(self, judgments: Mapping[str, Mapping[str, int]] | None = None):
        self._data: dict[str, dict[str, int]] = {}
        if judgments:
            for qid, row in judgments.items():
                for pid, grade in row.items():
                    self.add(qid, pid, grade)

    def add(self, query_id: str, passage_id: str, grade: int) -> None:
        if grade < 0:
            raise DataError(
                f"negative grade {grade} for ({query_id!r}, {passage_id!r})"
            )
        self._data.setdefault(query_id, {})[passage_id] = int(grade)

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._data

    @property
    def query_ids(self) -> tuple[str, ...]:
        return tuple(self._data)

    def for_query(self, query_id: str) -> dict[str, int]:
        return dict(self._data.get(query_id, {}))

    def relevant_ids(self, query_id: str) -> set[str]:
        return {p for p, g in self._data.get(query_id, {}).items() if g > 0}

    def items(self) -> Iterator[tuple[str, str, int]]:
        for qid, row in self._data.items():
            for pid, grade in row.items():
                yield qid, pid, grade

    def check_references(self, corpus: Corpus | None = None,
                         queries: QuerySet | None = None) -> list[str]:
        """Return ids referenced here but absent from the given collections."""
        dangling = []
        for qid, row in self._data.items():
            if queries is not None and qid not in queries:
                dangling.append(qid)
            if corpus is not None:
                dangling.extend(pid for pid in row if pid not in corpus)
        return dangling


def _iter_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _required_str(obj: dict, key: str, path: str, lineno: int) -> str:
    if key not in obj:
        raise DataError(f"{path}:{lineno}: missing required field {key!r}")
    return str(obj[key])


def load_corpus(path: str) -> Corpus:
    """Read a corpus.jsonl file; duplicate or missing ids and empty texts are errors."""
    passages = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_jsonl(path):
        pid = _required_str(obj, "_id", path, lineno)
        text = _required_str(obj, "text", path, lineno)
        if not text.strip():
            raise DataError(f"{path}:{lineno}: passage {pid!r} has empty text")
        if pid in seen:
            raise DataError(
                f"{path}:{lineno}: duplicate passage id {pid!r} (first seen on line {seen[pid]})"
            )
        seen[pid] = lineno
        passages.append(Passage(id=pid, text=text, title=str(obj.get("title", ""))))
    if not passages:
        raise DataError(f"{path}: corpus file is empty")
    return Corpus(passages)


def save_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus:
            obj: dict = {"_id": p.id}
            if p.title:
                obj["title"] = p.title
            obj["text"] = p.text
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_queries(path: str) -> QuerySet:
    """Read a queries.jsonl file into an ordered QuerySet."""
    queries = []
    for lineno, obj in _iter_jsonl(path):
        qid = _required_str(obj, "_id", path, lineno)
        text = _required_str(obj, "text", path, lineno)
        source = obj.get("source_passage_id")
        queries.append(Query(id=qid, text=text,
                             source_passage_id=None if source is None else str(source)))
    return QuerySet(queries)


def save_queries(queries: QuerySet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            obj: dict = {"_id": q.id, "text": q.text}
            if q.source_passage_id is not None:
                obj["source_passage_id"] = q.source_passage_id
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


_QRELS_HEADER = "query-id\tcorpus-id\tscore"


def load_qrels(path: str) -> Qrels:
    """Read a TSV qrels file; the exact header line is required."""
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != _QRELS_HEADER:
            raise DataError(
                f"{path}:1: bad qrels header {header!r}, expected {_QRELS_HEADER!r}"
            )
        for lineno, line in enumerate(fh, start=2):
            row = line.rstrip("\r\n")
            if not row:
                continue
            parts = row.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            qid, pid, score = parts
            try:
                grade = int(score)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: non-integer grade {score!r}"
                ) from None
            if grade < 0:
                raise DataError(f"{path}:{lineno}: negative grade {grade}")
            qrels.add(qid, pid, grade)
    return qrels


def save_qrels(qrels: Qrels, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_QRELS_HEADER + "\n")
        for qid, pid, grade in qrels.items():
            fh.write(f"{qid}\t{pid}\t{grade}\n")


def split_sentences(text: str, min_tokens: int = 3) -> list[str]:
    """Split on '.', '!' or '?' followed by whitespace; trim; drop pieces under `min_tokens` tokens."""
    pieces = (piece.strip() for piece in _SENTENCE_SPLIT.split(text))
    return [p for p in pieces if p and len(tokenize(p)) >= min_tokens]


def crop_queries(corpus: Corpus, cap: int = 2_000_000, seed: int = 0,
                 min_tokens: int = 3) -> QuerySet:
    """Build pseudo-queries by cropping sentences from passages.

    Every kept sentence becomes one query whose id is
    `<passage id>#s<sentence index>`. When the total exceeds `cap`, a uniform
    random sample of size `cap` is taken with the given seed; corpus order is
    preserved in the output either way.
    """
    if cap < 1:
        raise ConfigError(f"cap must be >= 1, got {cap}")
    candidates: list[Query] = []
    for p in corpus:
        for i, sentence in enumerate(split_sentences(p.text, min_tokens=min_tokens)):
            candidates.append(Query(id=f"{p.id}#s{i}", text=sentence,
                                    source_passage_id=p.id))
    if len(candidates) > cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(candidates), size=cap, replace=False))
        candidates = [candidates[i] for i in keep]
    return QuerySet(candidates)
