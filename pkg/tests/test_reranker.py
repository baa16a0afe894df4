"""Joint query/passage scorer: features, losses, reranking, distillation."""

import math

import numpy as np
import pytest

from bootrank import reranker
from bootrank.corpus import Corpus, Passage, Query, QuerySet
from bootrank.errors import BootstrapError, ConfigError, DataError
from bootrank.ranking import RankedList
from bootrank.reranker import (RerankModel, RerankTrainConfig, SoftLabelSet,
                               ce_loss, features, kl_loss, rerank,
                               rerank_score)
from bootrank.textproc import NoiseConfig, tokenize


def _fnv1a64_reference(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _features_reference(model, q_tokens, p_tokens):
    """Oracle features: hand pooling plus set-based lexical overlap stats."""
    def pool(tokens):
        out = np.zeros(model.dim)
        for t in tokens:
            out += model.embed[_fnv1a64_reference(t.encode("utf-8")) % model.buckets]
        return out / len(tokens) if tokens else out

    u, v = pool(q_tokens), pool(p_tokens)
    qs, ps = set(q_tokens), set(p_tokens)
    jac = len(qs & ps) / len(qs | ps) if qs | ps else 0.0
    cov = len(qs & ps) / len(qs) if qs else 0.0
    return np.concatenate([u, v, u * v, [jac, cov]])


def _score_reference(model, q_tokens, p_tokens):
    f = _features_reference(model, q_tokens, p_tokens)
    return float(model.w2 @ np.tanh(model.w1 @ f + model.b1) + model.b2[0])


def _zero_model(dim=4, buckets=64, hidden=3) -> RerankModel:
    f = 3 * dim + 2
    return RerankModel(dim, buckets, hidden, np.zeros((buckets, dim)),
                       np.zeros((hidden, f)), np.zeros(hidden),
                       np.zeros(hidden), np.zeros(1))


def _rand_tokens(rng, lo=1, hi=8):
    return [f"w{int(v)}" for v in rng.integers(0, 40, size=int(rng.integers(lo, hi)))]


class TestFeatures:
    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        model = RerankModel.init(dim=5, buckets=32, hidden=4, seed=1)
        for _ in range(20):
            q, p = _rand_tokens(rng), _rand_tokens(rng)
            np.testing.assert_allclose(features(model, q, p),
                                       _features_reference(model, q, p),
                                       atol=1e-12)

    def test_feature_width(self):
        model = RerankModel.init(dim=6, buckets=16, hidden=2, seed=0)
        assert model.feature_dim == 3 * 6 + 2
        assert features(model, "a b", "c d").shape == (model.feature_dim,)

    def test_lexical_features_bounds(self):
        model = _zero_model()
        f = features(model, ["a", "b"], ["b", "c", "d"])
        jac, cov = f[-2], f[-1]
        assert jac == pytest.approx(1 / 4)
        assert cov == pytest.approx(1 / 2)
        f2 = features(model, ["a"], ["a"])
        assert f2[-2] == 1.0 and f2[-1] == 1.0

    def test_score_matches_oracle(self):
        rng = np.random.default_rng(1)
        model = RerankModel.init(dim=4, buckets=32, hidden=5, seed=2)
        for _ in range(20):
            q, p = _rand_tokens(rng), _rand_tokens(rng)
            assert rerank_score(model, q, p) == pytest.approx(
                _score_reference(model, q, p), abs=1e-12)

    def test_zero_model_scores_zero(self):
        assert rerank_score(_zero_model(), "any query", "any passage") == 0.0

    def test_constant_network_ignores_inputs(self):
        model = _zero_model()
        model.b1[:] = 0.7
        model.w2[:] = [2.0, -1.0, 0.5]
        model.b2[:] = 0.25
        expected = float(np.sum(model.w2) * math.tanh(0.7) + 0.25)
        assert rerank_score(model, "abc", "def") == pytest.approx(expected, abs=1e-12)


class TestKlLoss:
    def test_uniform_student_against_skewed_teacher(self):
        model = _zero_model()
        T = np.array([0.7, 0.3])
        loss, _ = kl_loss(model, "q tokens", ["pass one", "pass two"], T)
        expected = 0.5 * math.log(0.5 / 0.7) + 0.5 * math.log(0.5 / 0.3)
        assert loss == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.08717669357238891, abs=1e-12)

    def test_reverse_direction_value(self):
        model = _zero_model()
        T = np.array([0.7, 0.3])
        loss, _ = kl_loss(model, "q tokens", ["pass one", "pass two"], T,
                          direction="teacher_student")
        expected = 0.7 * math.log(0.7 / 0.5) + 0.3 * math.log(0.3 / 0.5)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_zero_when_student_equals_teacher(self):
        model = _zero_model()
        T = np.array([0.25, 0.25, 0.25, 0.25])
        texts = [f"text {i}" for i in range(4)]
        for direction in ("student_teacher", "teacher_student"):
            loss, grads = kl_loss(model, "q", texts, T, direction=direction)
            assert abs(loss) <= 1e-9
            for g in (grads.w1, grads.b1, grads.w2, grads.b2, grads.embed_rows):
                np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_nonnegative_on_random_instances(self):
        rng = np.random.default_rng(2)
        for trial in range(30):
            model = RerankModel.init(dim=3, buckets=32, hidden=3, seed=trial)
            n = int(rng.integers(2, 6))
            raw = rng.random(n) + 0.05
            T = raw / raw.sum()
            texts = [" ".join(_rand_tokens(rng)) for _ in range(n)]
            direction = ("student_teacher", "teacher_student")[trial % 2]
            loss, _ = kl_loss(model, " ".join(_rand_tokens(rng)), texts, T,
                              direction=direction)
            assert loss >= -1e-12

    def test_score_shift_invariance_via_output_bias(self):
        rng = np.random.default_rng(3)
        model = RerankModel.init(dim=4, buckets=32, hidden=4, seed=9)
        T = np.array([0.2, 0.5, 0.3])
        texts = ["alpha beta", "gamma delta", "epsilon zeta"]
        base, base_grads = kl_loss(model, "alpha gamma", texts, T)
        model.b2[0] += 57.0
        shifted, shifted_grads = kl_loss(model, "alpha gamma", texts, T)
        assert abs(base - shifted) <= 1e-9
        assert abs(base_grads.b2[0]) <= 1e-9
        np.testing.assert_allclose(base_grads.w1, shifted_grads.w1, atol=1e-9)

    def test_validation_errors(self):
        model = _zero_model()
        with pytest.raises(ValueError, match="teacher probs"):
            kl_loss(model, "q", ["a", "b"], np.array([1.0]))
        with pytest.raises(ValueError, match="at least two"):
            kl_loss(model, "q", ["a"], np.array([1.0]))
        with pytest.raises(ValueError, match="strictly positive"):
            kl_loss(model, "q", ["a", "b"], np.array([1.0, 0.0]))
        with pytest.raises(ValueError, match="sum to"):
            kl_loss(model, "q", ["a", "b"], np.array([0.9, 0.3]))
        with pytest.raises(ConfigError, match="direction"):
            kl_loss(model, "q", ["a", "b"], np.array([0.5, 0.5]),
                    direction="sideways")

    def test_noise_only_affects_student_deterministically(self):
        model = RerankModel.init(dim=4, buckets=32, hidden=4, seed=4)
        T = np.array([0.6, 0.4])
        texts = ["one two three four five six", "seven eight nine ten eleven twelve"]
        query = "one seven two eight three nine"
        a = kl_loss(model, query, texts, T, noise=NoiseConfig(rate=0.2, seed=5))[0]
        b = kl_loss(model, query, texts, T, noise=NoiseConfig(rate=0.2, seed=5))[0]
        c = kl_loss(model, query, texts, T, noise=NoiseConfig(rate=0.2, seed=6))[0]
        clean = kl_loss(model, query, texts, T)[0]
        assert a == b
        assert a != c or a != clean


class TestCeLoss:
    def test_equal_scores_give_log_candidate_count(self):
        model = _zero_model()
        loss, _ = ce_loss(model, "q", "pos text", [f"neg {i}" for i in range(7)])
        assert loss == pytest.approx(math.log(8.0), abs=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        model = _zero_model(dim=2, buckets=64, hidden=1)
        cov = 3 * model.dim + 1
        model.w1[0, cov] = 30.0
        model.w2[0] = 30.0
        loss, _ = ce_loss(model, "aa", "aa", ["bb", "cc", "dd"])
        assert loss < 1e-8

    def test_needs_a_negative(self):
        with pytest.raises(ValueError, match="at least one negative"):
            ce_loss(_zero_model(), "q", "pos", [])


class TestGradientChecks:
    def _fd_all_params(self, model, loss_fn, h=1e-4):
        """Central finite differences against analytic gradients, all parameters."""
        loss, grads = loss_fn()
        analytic = {
            "embed": grads.embed_dense(model.buckets, model.dim),
            "w1": grads.w1, "b1": grads.b1, "w2": grads.w2, "b2": grads.b2,
        }
        rng = np.random.default_rng(0)
        params = {"embed": model.embed, "w1": model.w1, "b1": model.b1,
                  "w2": model.w2, "b2": model.b2}
        for name, arr in params.items():
            if name == "embed":
                rows = list(set(grads.embed_indices.tolist()))[:4]
                coords = [(r, c) for r in rows for c in range(model.dim)]
            else:
                flat = [tuple(idx) for idx in np.ndindex(arr.shape)]
                coords = [flat[int(i)] for i in
                          rng.choice(len(flat), size=min(12, len(flat)), replace=False)]
            for idx in coords:
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_fn()[0]
                arr[idx] = orig - h
                down = loss_fn()[0]
                arr[idx] = orig
                fd = (up - down) / (2 * h)
                a = analytic[name][idx]
                if max(abs(a), abs(fd)) > 1e-6:
                    assert abs(a - fd) / max(abs(a), abs(fd)) < 1e-4, (name, idx)
                else:
                    assert abs(a - fd) < 1e-7, (name, idx)

    def test_kl_gradients_both_directions(self):
        rng = np.random.default_rng(5)
        for trial in range(4):
            model = RerankModel.init(dim=3, buckets=32, hidden=3, seed=40 + trial)
            n = int(rng.integers(2, 5))
            raw = rng.random(n) + 0.1
            T = raw / raw.sum()
            texts = [" ".join(_rand_tokens(rng)) for _ in range(n)]
            query = " ".join(_rand_tokens(rng))
            direction = ("student_teacher", "teacher_student")[trial % 2]
            self._fd_all_params(
                model, lambda: kl_loss(model, query, texts, T, direction=direction))

    def test_ce_gradients(self):
        rng = np.random.default_rng(6)
        for trial in range(3):
            model = RerankModel.init(dim=3, buckets=32, hidden=3, seed=50 + trial)
            pos = " ".join(_rand_tokens(rng))
            negs = [" ".join(_rand_tokens(rng)) for _ in range(int(rng.integers(1, 4)))]
            query = " ".join(_rand_tokens(rng))
            self._fd_all_params(model, lambda: ce_loss(model, query, pos, negs))


def _candidate_corpus(n=8) -> Corpus:
    rng = np.random.default_rng(7)
    return Corpus([Passage(id=f"p{i}",
                           text=" ".join(f"w{int(v)}"
                                         for v in rng.integers(0, 30, size=6)))
                   for i in range(n)])


class TestRerank:
    def test_output_is_permutation_with_tail_preserved(self):
        corpus = _candidate_corpus()
        model = RerankModel.init(dim=4, buckets=32, hidden=4, seed=8)
        cands = RankedList("q", corpus.ids, tuple(float(8 - i) for i in range(8)))
        out = rerank(model, "w1 w2 w3", cands, corpus, depth=5)
        assert sorted(out.passage_ids) == sorted(cands.passage_ids)
        assert out.passage_ids[5:] == cands.passage_ids[5:]
        assert out.scores[5:] == cands.scores[5:]
        assert set(out.passage_ids[:5]) == set(cands.passage_ids[:5])

    def test_block_sorted_by_joint_score(self):
        corpus = _candidate_corpus()
        model = RerankModel.init(dim=4, buckets=32, hidden=4, seed=8)
        cands = RankedList("q", corpus.ids, tuple(float(8 - i) for i in range(8)))
        out = rerank(model, "w1 w2 w3", cands, corpus, depth=8)
        expected = sorted(
            corpus.ids,
            key=lambda pid: (-rerank_score(model, "w1 w2 w3",
                                           corpus.index_text(pid)),
                             cands.passage_ids.index(pid)))
        assert list(out.passage_ids) == expected
        assert list(out.scores) == sorted(out.scores, reverse=True)

    def test_zero_model_is_stable_identity_on_ids(self):
        corpus = _candidate_corpus()
        cands = RankedList("q", corpus.ids, tuple(float(8 - i) for i in range(8)))
        out = rerank(_zero_model(), "w1 w2", cands, corpus, depth=8)
        assert out.passage_ids == cands.passage_ids

    def test_depth_one_keeps_order(self):
        corpus = _candidate_corpus()
        model = RerankModel.init(dim=4, buckets=32, hidden=4, seed=8)
        cands = RankedList("q", corpus.ids, tuple(float(8 - i) for i in range(8)))
        out = rerank(model, "w1", cands, corpus, depth=1)
        assert out.passage_ids == cands.passage_ids

    def test_depth_clipped_to_list_length(self):
        corpus = _candidate_corpus()
        model = RerankModel.init(dim=4, buckets=32, hidden=4, seed=8)
        cands = RankedList("q", corpus.ids[:3], (3.0, 2.0, 1.0))
        out = rerank(model, "w1", cands, corpus, depth=100)
        assert sorted(out.passage_ids) == sorted(cands.passage_ids)

    def test_empty_candidates_pass_through(self):
        corpus = _candidate_corpus()
        cands = RankedList("q", (), ())
        out = rerank(_zero_model(), "w1", cands, corpus, depth=5)
        assert len(out) == 0

    def test_bad_depth(self):
        corpus = _candidate_corpus()
        cands = RankedList("q", corpus.ids[:2], (2.0, 1.0))
        with pytest.raises(ConfigError):
            rerank(_zero_model(), "w1", cands, corpus, depth=0)


class TestSoftLabelSet:
    def test_valid_construction(self):
        s = SoftLabelSet("q", ("a", "b"), (0.25, 0.75))
        assert s.probs == (0.25, 0.75)

    def test_validation(self):
        with pytest.raises(ValueError, match="length mismatch"):
            SoftLabelSet("q", ("a", "b"), (1.0,))
        with pytest.raises(ValueError, match="at least two"):
            SoftLabelSet("q", ("a",), (1.0,))
        with pytest.raises(ValueError, match="strictly positive"):
            SoftLabelSet("q", ("a", "b"), (1.0, 0.0))
        with pytest.raises(ValueError, match="sum to"):
            SoftLabelSet("q", ("a", "b"), (0.9, 0.3))


def _training_setup(n=12, list_len=12, seed=0):
    rng = np.random.default_rng(seed)
    corpus = Corpus([Passage(id=f"p{i}",
                             text=" ".join(f"w{int(v)}"
                                           for v in rng.integers(0, 25, size=6)))
                     for i in range(30)])
    queries = QuerySet([Query(id=f"q{i}",
                              text=" ".join(f"w{int(v)}"
                                            for v in rng.integers(0, 25, size=4)))
                        for i in range(n)])
    candidates = {}
    for q in queries:
        ids = [f"p{int(i)}" for i in rng.permutation(30)[:list_len]]
        scores = np.sort(rng.normal(size=list_len))[::-1]
        candidates[q.id] = RankedList(q.id, tuple(ids), tuple(scores))
    return corpus, queries, candidates


class TestRerankTraining:
    def _config(self, **kw):
        base = dict(epochs=2, batch_size=4, learning_rate=1e-3, n_negatives=3,
                    positive_depth=3, hidden=4, noise=NoiseConfig(rate=0.0),
                    seed=13)
        base.update(kw)
        return RerankTrainConfig(**base)

    def test_fresh_init_discipline(self):
        corpus, queries, candidates = _training_setup()
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        _, stats = reranker.train(template, queries, corpus, candidates,
                                  self._config(), init_seed=777)
        fresh = RerankModel.init(dim=4, buckets=32, hidden=4, seed=777)
        assert stats.init_checksum == fresh.checksum()

    def test_warm_start_continues_from_previous(self):
        corpus, queries, candidates = _training_setup()
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        prev, _ = reranker.train(template, queries, corpus, candidates,
                                 self._config(), init_seed=777)
        _, stats = reranker.train(template, queries, corpus, candidates,
                                  self._config(warm_start=True), init_seed=888,
                                  previous=prev)
        assert stats.init_checksum == prev.checksum()

    def test_deterministic_and_seed_sensitive(self):
        corpus, queries, candidates = _training_setup()
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        a, _ = reranker.train(template, queries, corpus, candidates, self._config())
        b, _ = reranker.train(template, queries, corpus, candidates, self._config())
        c, _ = reranker.train(template, queries, corpus, candidates,
                              self._config(seed=14))
        assert a.to_bytes() == b.to_bytes()
        assert a.to_bytes() != c.to_bytes()

    def test_shallow_lists_skipped(self):
        corpus, queries, candidates = _training_setup(list_len=12)
        shallow = dict(candidates)
        ids = list(queries.ids)
        for qid in ids[:5]:
            shallow[qid] = shallow[qid].top(2)
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        _, stats = reranker.train(template, queries, corpus, shallow,
                                  self._config(positive_depth=3))
        assert stats.queries_skipped == 5
        assert stats.queries_used == len(ids) - 5

    def test_no_usable_lists_is_an_error(self):
        corpus, queries, candidates = _training_setup(list_len=2)
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        with pytest.raises(BootstrapError, match="no usable"):
            reranker.train(template, queries, corpus, candidates,
                           self._config(positive_depth=3))

    def test_zero_epochs_returns_fresh_init(self):
        corpus, queries, candidates = _training_setup()
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        model, stats = reranker.train(template, queries, corpus, candidates,
                                      self._config(epochs=0), init_seed=777)
        assert model.checksum() == stats.init_checksum
        assert stats.steps == 0

    def test_distillation_reduces_loss(self):
        # Teacher scores follow query-token coverage, a signal the student's
        # lexical features can express, so the loss must come down.
        rng = np.random.default_rng(3)
        corpus = Corpus([Passage(id=f"p{i}",
                                 text=" ".join(f"w{int(v)}"
                                               for v in rng.integers(0, 25, size=6)))
                         for i in range(30)])
        queries = QuerySet([Query(id=f"q{i}",
                                  text=" ".join(f"w{int(v)}"
                                                for v in rng.integers(0, 25, size=4)))
                            for i in range(6)])
        candidates = {}
        for q in queries:
            q_set = set(tokenize(q.text))
            overlap = {pid: len(q_set & set(tokenize(corpus.index_text(pid))))
                       for pid in corpus.ids}
            ids = sorted(corpus.ids, key=lambda pid: (-overlap[pid], pid))[:12]
            candidates[q.id] = RankedList(
                q.id, tuple(ids), tuple(float(overlap[pid]) for pid in ids))
        template = RerankModel.init(dim=4, buckets=64, hidden=8, seed=0)
        _, stats = reranker.train(template, queries, corpus, candidates,
                                  self._config(epochs=30, learning_rate=2e-3,
                                               batch_size=6))
        assert stats.epoch_losses[-1] < stats.epoch_losses[0]

    def test_ce_loss_mode_trains(self):
        corpus, queries, candidates = _training_setup()
        template = RerankModel.init(dim=4, buckets=32, hidden=4, seed=0)
        model, stats = reranker.train(template, queries, corpus, candidates,
                                      self._config(loss="ce"))
        assert stats.steps > 0
        assert model.checksum() != stats.init_checksum


class TestPersistence:
    def test_round_trip_bytes_stable(self, tmp_path):
        model = RerankModel.init(dim=5, buckets=32, hidden=4, seed=6)
        path = str(tmp_path / "rr.ckpt")
        reranker.save(model, path)
        back = reranker.load(path)
        assert back.to_bytes() == model.to_bytes()
        assert back.checksum() == model.checksum()
        assert (back.dim, back.buckets, back.hidden) == (5, 32, 4)

    def test_scores_survive_round_trip_in_float32(self, tmp_path):
        model = RerankModel.init(dim=5, buckets=32, hidden=4, seed=6)
        path = str(tmp_path / "rr.ckpt")
        reranker.save(model, path)
        back = reranker.load(path)
        a = rerank_score(model, "alpha beta", "gamma delta")
        b = rerank_score(back, "alpha beta", "gamma delta")
        assert a == pytest.approx(b, abs=1e-6)

    def test_tampering_detected(self, tmp_path):
        model = RerankModel.init(dim=4, buckets=16, hidden=3, seed=6)
        path = tmp_path / "rr.ckpt"
        reranker.save(model, str(path))
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0x10
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum mismatch"):
            reranker.load(str(path))
