"""Ranked retrieval results shared by every scoring component."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator


@dataclass(frozen=True)
class RankedList:
    """Immutable ranking for one query: passage ids best-first with their scores.

    Ranks are implicit and contiguous: entry i has rank i + 1. Score order is
    a property of the producer (searches emit non-increasing scores; a
    partially reranked list may seam rerank scores against original tail
    scores), so it is not enforced here.
    """

    query_id: str
    passage_ids: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "passage_ids", tuple(self.passage_ids))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.passage_ids) != len(self.scores):
            raise ValueError(
                f"{len(self.passage_ids)} ids but {len(self.scores)} scores"
            )
        if len(set(self.passage_ids)) != len(self.passage_ids):
            raise ValueError(f"duplicate passage ids in ranking for {self.query_id!r}")

    def __len__(self) -> int:
        return len(self.passage_ids)

    def __iter__(self) -> Iterator[tuple[int, str, float]]:
        """Yield (rank, passage_id, score) with ranks starting at 1."""
        for i, (pid, score) in enumerate(zip(self.passage_ids, self.scores)):
            yield i + 1, pid, score

    def top(self, k: int) -> "RankedList":
        return RankedList(self.query_id, self.passage_ids[:k], self.scores[:k])

    def rank_of(self, passage_id: str) -> int | None:
        try:
            return self.passage_ids.index(passage_id) + 1
        except ValueError:
            return None
