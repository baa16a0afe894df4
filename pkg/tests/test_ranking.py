"""RankedList container invariants."""

import pytest

from bootrank.ranking import RankedList


def _sample() -> RankedList:
    return RankedList("q", ("a", "b", "c"), (3.0, 2.0, 1.0))


class TestRankedList:
    def test_iteration_yields_one_based_ranks(self):
        assert list(_sample()) == [(1, "a", 3.0), (2, "b", 2.0), (3, "c", 1.0)]

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="ids but"):
            RankedList("q", ("a", "b"), (1.0,))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            RankedList("q", ("a", "a"), (2.0, 1.0))

    def test_coerces_sequences_and_scores(self):
        r = RankedList("q", ["a", "b"], [2, 1])
        assert r.passage_ids == ("a", "b")
        assert r.scores == (2.0, 1.0)
        assert all(isinstance(s, float) for s in r.scores)

    def test_top_truncates(self):
        assert _sample().top(2).passage_ids == ("a", "b")
        assert _sample().top(10).passage_ids == ("a", "b", "c")

    def test_rank_of(self):
        r = _sample()
        assert r.rank_of("a") == 1
        assert r.rank_of("c") == 3
        assert r.rank_of("zz") is None

    def test_empty_list_allowed(self):
        r = RankedList("q", (), ())
        assert len(r) == 0
        assert list(r) == []
