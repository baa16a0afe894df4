"""Cross-scoring reranker distilled from retriever soft labels.

The scorer is a one-hidden-layer network over a joint query/passage feature
vector: pooled query embedding, pooled passage embedding, their elementwise
product, token-overlap Jaccard, and the fraction of distinct query tokens
present in the passage. Both pooled embeddings share one hash table, so the
feature width is 3 * dim + 2. Checkpoints are little-endian float32
("ABRR1").
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .binio import Reader, Writer
from .corpus import Corpus, QuerySet
from .errors import BootstrapError, ConfigError, DataError
from .optim import log_softmax, make_optimizer, softmax
from .ranking import RankedList
from .textproc import NoiseConfig, corrupt, derive_seed, hash_token, tokenize

logger = logging.getLogger(__name__)

_MAGIC = "ABRR1"


def _as_tokens(value: str | Sequence[str]) -> list[str]:
    return tokenize(value) if isinstance(value, str) else list(value)


class RerankModel:
    """tanh MLP over joint features: score = w2 . tanh(W1 f + b1) + b2."""

    def __init__(self, dim: int, buckets: int, hidden: int, embed: np.ndarray,
                 w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray,
                 init_seed: int = 0):
        if dim < 1 or buckets < 1 or hidden < 1:
            raise ConfigError(
                f"dim, buckets, hidden must be >= 1, got {dim}, {buckets}, {hidden}")
        self.dim = dim
        self.buckets = buckets
        self.hidden = hidden
        self.embed = np.asarray(embed, dtype=np.float64)
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        f = self.feature_dim
        if self.embed.shape != (buckets, dim) or self.w1.shape != (hidden, f) \
                or self.b1.shape != (hidden,) or self.w2.shape != (hidden,) \
                or self.b2.shape != (1,):
            raise ConfigError("parameter shapes do not match (dim, buckets, hidden)")
        self.init_seed = init_seed

    @property
    def feature_dim(self) -> int:
        return 3 * self.dim + 2

    @classmethod
    def init(cls, dim: int = 64, buckets: int = 65536, hidden: int = 32,
             seed: int = 0) -> "RerankModel":
        rng = np.random.default_rng(seed)
        f = 3 * dim + 2
        embed = rng.normal(0.0, 0.02, size=(buckets, dim))
        w1 = rng.normal(0.0, 1.0 / np.sqrt(f), size=(hidden, f))
        b1 = np.zeros(hidden)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden)
        b2 = np.zeros(1)
        return cls(dim, buckets, hidden, embed, w1, b1, w2, b2, init_seed=seed)

    def copy(self) -> "RerankModel":
        return RerankModel(self.dim, self.buckets, self.hidden, self.embed.copy(),
                           self.w1.copy(), self.b1.copy(), self.w2.copy(),
                           self.b2.copy(), init_seed=self.init_seed)

    def params(self) -> list[np.ndarray]:
        return [self.embed, self.w1, self.b1, self.w2, self.b2]

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(_MAGIC)
        w.u32(self.dim)
        w.u32(self.buckets)
        w.u32(self.hidden)
        w.u64(self.init_seed)
        for arr in self.params():
            w.f32_array(arr)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RerankModel":
        r = Reader(data, _MAGIC)
        dim = r.u32()
        buckets = r.u32()
        hidden = r.u32()
        seed = r.u64()
        f = 3 * dim + 2
        embed = r.f32_array((buckets, dim)).astype(np.float64)
        w1 = r.f32_array((hidden, f)).astype(np.float64)
        b1 = r.f32_array((hidden,)).astype(np.float64)
        w2 = r.f32_array((hidden,)).astype(np.float64)
        b2 = r.f32_array((1,)).astype(np.float64)
        return cls(dim, buckets, hidden, embed, w1, b1, w2, b2, init_seed=seed)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save(model: RerankModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load(path: str) -> RerankModel:
    with open(path, "rb") as fh:
        return RerankModel.from_bytes(fh.read())


def _pool(table: np.ndarray, tokens: Sequence[str], buckets: int) -> np.ndarray:
    ids = [hash_token(t, buckets) for t in tokens]
    if not ids:
        return np.zeros(table.shape[1], dtype=np.float64)
    uids, counts = np.unique(np.asarray(ids, dtype=np.int64), return_counts=True)
    return (table[uids] * counts[:, None].astype(np.float64)).sum(axis=0) / len(ids)


def _lexical(q_tokens: Sequence[str], p_tokens: Sequence[str]) -> tuple[float, float]:
    q_set, p_set = set(q_tokens), set(p_tokens)
    union = q_set | p_set
    jaccard = len(q_set & p_set) / len(union) if union else 0.0
    coverage = len(q_set & p_set) / len(q_set) if q_set else 0.0
    return jaccard, coverage


def features(model: RerankModel, query: str | Sequence[str],
             passage: str | Sequence[str]) -> np.ndarray:
    """Joint feature vector: [q emb; p emb; q*p; Jaccard; query-token coverage]."""
    q_tokens = _as_tokens(query)
    p_tokens = _as_tokens(passage)
    u = _pool(model.embed, q_tokens, model.buckets)
    v = _pool(model.embed, p_tokens, model.buckets)
    jaccard, coverage = _lexical(q_tokens, p_tokens)
    return np.concatenate([u, v, u * v, [jaccard, coverage]])


@dataclass
class _Forward:
    q_tokens: list[str]
    p_tokens: list[list[str]]
    u: np.ndarray           # (dim,) pooled query embedding
    v: np.ndarray           # (m, dim) pooled passage embeddings
    feats: np.ndarray       # (m, f)
    act: np.ndarray         # (m, hidden) tanh activations
    scores: np.ndarray      # (m,)


def _forward(model: RerankModel, query: str | Sequence[str],
             passages: Sequence[str | Sequence[str]]) -> _Forward:
    q_tokens = _as_tokens(query)
    p_tokens = [_as_tokens(p) for p in passages]
    u = _pool(model.embed, q_tokens, model.buckets)
    v = np.stack([_pool(model.embed, t, model.buckets) for t in p_tokens])
    lex = np.array([_lexical(q_tokens, t) for t in p_tokens])
    feats = np.concatenate([np.tile(u, (len(p_tokens), 1)), v, u * v, lex], axis=1)
    act = np.tanh(feats @ model.w1.T + model.b1)
    scores = act @ model.w2 + model.b2[0]
    return _Forward(q_tokens, p_tokens, u, v, feats, act, scores)


def rerank_score(model: RerankModel, query: str | Sequence[str],
                 passage: str | Sequence[str]) -> float:
    """Joint relevance score for one query/passage pair."""
    return float(_forward(model, query, [passage]).scores[0])


@dataclass
class RerankGrads:
    """Gradients for every parameter; the embedding part is sparse rows."""

    embed_indices: np.ndarray
    embed_rows: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def embed_dense(self, buckets: int, dim: int) -> np.ndarray:
        out = np.zeros((buckets, dim), dtype=np.float64)
        if len(self.embed_indices):
            out[self.embed_indices] = self.embed_rows
        return out

    def add_embed_into(self, buffer: np.ndarray) -> None:
        if len(self.embed_indices):
            buffer[self.embed_indices] += self.embed_rows


def _backward(model: RerankModel, fwd: _Forward, g_scores: np.ndarray) -> RerankGrads:
    d = model.dim
    g = np.asarray(g_scores, dtype=np.float64)
    d_act = g[:, None] * model.w2[None, :]
    d_pre = d_act * (1.0 - np.square(fwd.act))
    g_w1 = d_pre.T @ fwd.feats
    g_b1 = d_pre.sum(axis=0)
    g_w2 = fwd.act.T @ g
    g_b2 = np.array([g.sum()])
    d_feats = d_pre @ model.w1
    d_u = (d_feats[:, :d] + d_feats[:, 2 * d:3 * d] * fwd.v).sum(axis=0)
    d_v = d_feats[:, d:2 * d] + d_feats[:, 2 * d:3 * d] * fwd.u[None, :]

    acc: dict[int, np.ndarray] = {}

    def scatter(tokens: Sequence[str], vec_grad: np.ndarray) -> None:
        ids = [hash_token(t, model.buckets) for t in tokens]
        if not ids:
            return
        uids, counts = np.unique(np.asarray(ids, dtype=np.int64), return_counts=True)
        weights = counts.astype(np.float64) / len(ids)
        for uid, w in zip(uids.tolist(), weights):
            row = acc.get(uid)
            if row is None:
                acc[uid] = w * vec_grad
            else:
                row += w * vec_grad

    scatter(fwd.q_tokens, d_u)
    for tokens, gv in zip(fwd.p_tokens, d_v):
        scatter(tokens, gv)
    if acc:
        order = sorted(acc)
        idx = np.asarray(order, dtype=np.int64)
        rows = np.stack([acc[i] for i in order])
    else:
        idx = np.empty(0, dtype=np.int64)
        rows = np.empty((0, d))
    return RerankGrads(idx, rows, g_w1, g_b1, g_w2, g_b2)


def _apply_noise(q_tokens: list[str], p_tokens: list[list[str]],
                 noise: NoiseConfig | None) -> tuple[list[str], list[list[str]]]:
    if noise is None or noise.rate == 0.0:
        return q_tokens, p_tokens
    q = corrupt(q_tokens, replace(noise, seed=derive_seed(noise.seed, "q")))
    ps = [corrupt(t, replace(noise, seed=derive_seed(noise.seed, "p", i)))
          for i, t in enumerate(p_tokens)]
    return q, ps


def kl_loss(model: RerankModel, query: str | Sequence[str],
            passages: Sequence[str | Sequence[str]], teacher_probs: np.ndarray,
            noise: NoiseConfig | None = None,
            direction: str = "student_teacher") -> tuple[float, RerankGrads]:
    """KL divergence between the reranker's softmax and a teacher distribution.

    direction "student_teacher" gives KL(S || T) (gradient per score
    s_k: S_k * (ln(S_k / T_k) - KL)); "teacher_student" gives KL(T || S)
    (gradient S_k - T_k). Noise, when given, corrupts the student's inputs
    only; the teacher probabilities stay fixed.
    """
    teacher = np.asarray(teacher_probs, dtype=np.float64)
    if len(passages) != len(teacher):
        raise ValueError(f"{len(passages)} passages but {len(teacher)} teacher probs")
    if len(teacher) < 2:
        raise ValueError("need at least two candidates")
    if np.any(teacher <= 0.0):
        raise ValueError("teacher probabilities must be strictly positive")
    if abs(float(teacher.sum()) - 1.0) > 1e-6:
        raise ValueError(f"teacher probabilities sum to {float(teacher.sum())!r}")
    if direction not in ("student_teacher", "teacher_student"):
        raise ConfigError(f"unknown kl direction {direction!r}")
    q_tokens, p_tokens = _apply_noise(_as_tokens(query),
                                      [_as_tokens(p) for p in passages], noise)
    fwd = _forward(model, q_tokens, p_tokens)
    log_s = log_softmax(fwd.scores)
    s = np.exp(log_s)
    log_t = np.log(teacher)
    if direction == "student_teacher":
        loss = float((s * (log_s - log_t)).sum())
        g_scores = s * ((log_s - log_t) - loss)
    else:
        loss = float((teacher * (log_t - log_s)).sum())
        g_scores = s - teacher
    return loss, _backward(model, fwd, g_scores)


def ce_loss(model: RerankModel, query: str | Sequence[str],
            positive: str | Sequence[str],
            negatives: Sequence[str | Sequence[str]],
            noise: NoiseConfig | None = None) -> tuple[float, RerankGrads]:
    """Cross-entropy of the positive against the negatives under the softmax."""
    if not len(negatives):
        raise ValueError("need at least one negative")
    q_tokens, p_tokens = _apply_noise(
        _as_tokens(query),
        [_as_tokens(positive)] + [_as_tokens(n) for n in negatives], noise)
    fwd = _forward(model, q_tokens, p_tokens)
    log_s = log_softmax(fwd.scores)
    loss = float(-log_s[0])
    g_scores = np.exp(log_s)
    g_scores[0] -= 1.0
    return loss, _backward(model, fwd, g_scores)


def rerank(model: RerankModel, query_text: str, candidates: RankedList,
           corpus: Corpus, depth: int = 100,
           include_titles: bool = True) -> RankedList:
    """Stable-reorder the top `depth` candidates by reranker score.

    The reordered block carries reranker scores; entries past `depth` keep
    their original order and scores. Output ids are a permutation of the
    input ids.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    if not len(candidates):
        return candidates
    cut = min(depth, len(candidates))
    texts = [corpus.index_text(pid, include_titles)
             for pid in candidates.passage_ids[:cut]]
    scores = _forward(model, query_text, texts).scores
    order = sorted(range(cut), key=lambda i: (-scores[i], i))
    ids = [candidates.passage_ids[i] for i in order]
    new_scores = [float(scores[i]) for i in order]
    ids.extend(candidates.passage_ids[cut:])
    new_scores.extend(candidates.scores[cut:])
    return RankedList(candidates.query_id, tuple(ids), tuple(new_scores))


@dataclass(frozen=True)
class SoftLabelSet:
    """One query's distillation target: candidate ids and teacher probabilities."""

    query_id: str
    passage_ids: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "passage_ids", tuple(self.passage_ids))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.passage_ids) != len(self.probs):
            raise ValueError("ids and probs length mismatch")
        if len(self.passage_ids) < 2:
            raise ValueError("need at least two candidates")
        if any(p <= 0 for p in self.probs):
            raise ValueError("probabilities must be strictly positive")
        if abs(sum(self.probs) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(self.probs)!r}")


@dataclass(frozen=True)
class RerankTrainConfig:
    epochs: int = 8
    batch_size: int = 16
    learning_rate: float = 2e-3
    n_negatives: int = 7
    positive_depth: int = 10
    teacher_temperature: float = 1.0
    hidden: int = 32
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "kl"
    kl_direction: str = "student_teacher"
    warm_start: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.n_negatives < 1:
            raise ConfigError(f"n_negatives must be >= 1, got {self.n_negatives}")
        if self.positive_depth < 1:
            raise ConfigError(f"positive_depth must be >= 1, got {self.positive_depth}")
        if self.teacher_temperature <= 0:
            raise ConfigError(
                f"teacher_temperature must be > 0, got {self.teacher_temperature}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.loss not in ("kl", "ce"):
            raise ConfigError(f"loss must be 'kl' or 'ce', got {self.loss!r}")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ConfigError(f"unknown kl direction {self.kl_direction!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RerankTrainStats:
    queries_used: int
    queries_skipped: int
    steps: int
    epoch_losses: list[float]
    init_checksum: str


def train(template: RerankModel, queries: QuerySet, corpus: Corpus,
          candidates: Mapping[str, RankedList], config: RerankTrainConfig,
          init_seed: int | None = None, previous: RerankModel | None = None,
          include_titles: bool = True) -> tuple[RerankModel, RerankTrainStats]:
    """Distill retriever rankings into a reranker.

    Per query and epoch, one positive is drawn from the candidate list's top
    `positive_depth` entries and `n_negatives` from the remainder; the
    teacher distribution is a softmax of the stored retrieval scores at
    `teacher_temperature`. Parameters are freshly initialized from
    `init_seed` (shapes from `template`) unless `config.warm_start` and
    `previous` are given. Queries whose list is too shallow to sample from
    are skipped.
    """
    if config.warm_start and previous is not None:
        model = previous.copy()
    else:
        seed = derive_seed(config.seed, "init") if init_seed is None else init_seed
        model = RerankModel.init(template.dim, template.buckets,
                                 template.hidden, seed=seed)
    stats = RerankTrainStats(queries_used=0, queries_skipped=0, steps=0,
                             epoch_losses=[], init_checksum=model.checksum())
    usable: list[tuple[str, RankedList]] = []
    for q in queries:
        ranked = candidates.get(q.id)
        if ranked is None or len(ranked) <= config.positive_depth:
            stats.queries_skipped += 1
            continue
        usable.append((q.id, ranked))
    stats.queries_used = len(usable)
    if not usable:
        raise BootstrapError("reranker training has no usable candidate lists")
    if config.epochs == 0:
        return model, stats

    opt = make_optimizer(config.optimizer, config.learning_rate)
    params = model.params()
    embed_buf = np.zeros_like(model.embed)
    small_bufs = [np.zeros_like(p) for p in params[1:]]
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            derive_seed(config.seed, "order", epoch)).permutation(len(usable))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            embed_buf.fill(0.0)
            for buf in small_bufs:
                buf.fill(0.0)
            batch_loss = 0.0
            for i in chunk:
                qid, ranked = usable[i]
                r = np.random.default_rng(derive_seed(config.seed, "sample", epoch, qid))
                top = min(config.positive_depth, len(ranked))
                pos = int(r.integers(top))
                pool = np.arange(top, len(ranked))
                take = min(config.n_negatives, len(pool))
                negs = np.sort(r.choice(pool, size=take, replace=False))
                picked = [pos] + negs.tolist()
                pids = [ranked.passage_ids[j] for j in picked]
                raw_scores = np.array([ranked.scores[j] for j in picked])
                texts = [corpus.index_text(pid, include_titles) for pid in pids]
                noise = None
                if config.noise.rate > 0:
                    noise = replace(config.noise,
                                    seed=derive_seed(config.seed, "noise", epoch, qid))
                if config.loss == "kl":
                    labels = SoftLabelSet(
                        qid, tuple(pids),
                        tuple(softmax(raw_scores / config.teacher_temperature)))
                    loss, grads = kl_loss(model, queries.text(qid), texts,
                                          np.asarray(labels.probs),
                                          noise=noise, direction=config.kl_direction)
                else:
                    loss, grads = ce_loss(model, queries.text(qid), texts[0],
                                          texts[1:], noise=noise)
                batch_loss += loss
                grads.add_embed_into(embed_buf)
                for buf, g in zip(small_bufs, [grads.w1, grads.b1, grads.w2, grads.b2]):
                    buf += g
            scale = 1.0 / len(chunk)
            embed_buf *= scale
            for buf in small_bufs:
                buf *= scale
            opt.step(params, [embed_buf] + small_bufs)
            stats.steps += 1
            losses.append(batch_loss * scale)
        stats.epoch_losses.append(float(np.mean(losses)))
    return model, stats
