"""Hashed bag-of-words dual encoder with in-batch-negative contrastive training.

Queries and passages are encoded by mean-pooling rows of two separate
(buckets x dim) tables indexed by FNV-1a token hashes; relevance is the dot
product. Training distributes analytic gradients from the contrastive loss
back onto the pooled rows. Checkpoints are little-endian float32 ("ABDM1").
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .binio import Reader, Writer
from .corpus import Corpus, QuerySet
from .errors import BootstrapError, ConfigError, DataError
from .optim import log_softmax, make_optimizer, softmax
from .parallel import parallel_map
from .ranking import RankedList
from .textproc import NoiseConfig, corrupt, derive_seed, hash_token, tokenize

logger = logging.getLogger(__name__)

_MAGIC = "ABDM1"


def _as_tokens(value: str | Sequence[str]) -> list[str]:
    return tokenize(value) if isinstance(value, str) else list(value)


def _bucket_counts(tokens: Sequence[str], buckets: int) -> tuple[np.ndarray, np.ndarray]:
    ids = [hash_token(t, buckets) for t in tokens]
    if not ids:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    uids, counts = np.unique(np.asarray(ids, dtype=np.int64), return_counts=True)
    return uids, counts.astype(np.float64)


def _pool(table: np.ndarray, tokens: Sequence[str], buckets: int) -> np.ndarray:
    """Mean of the hashed rows; the zero vector for an empty token sequence."""
    uids, counts = _bucket_counts(tokens, buckets)
    if not len(uids):
        return np.zeros(table.shape[1], dtype=np.float64)
    return (table[uids] * counts[:, None]).sum(axis=0) / counts.sum()


class DenseModel:
    """Asymmetric dual encoder: separate query and passage hash tables."""

    def __init__(self, dim: int, buckets: int, query_table: np.ndarray,
                 passage_table: np.ndarray, init_seed: int = 0):
        if dim < 1 or buckets < 1:
            raise ConfigError(f"dim and buckets must be >= 1, got {dim}, {buckets}")
        if query_table.shape != (buckets, dim) or passage_table.shape != (buckets, dim):
            raise ConfigError("table shapes do not match (buckets, dim)")
        self.dim = dim
        self.buckets = buckets
        self.query_table = np.asarray(query_table, dtype=np.float64)
        self.passage_table = np.asarray(passage_table, dtype=np.float64)
        self.init_seed = init_seed

    @classmethod
    def init(cls, dim: int = 64, buckets: int = 65536, seed: int = 0) -> "DenseModel":
        """Fresh model; both tables start from the same seeded Gaussian draw (sigma 0.02)."""
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, 0.02, size=(buckets, dim))
        return cls(dim, buckets, table, table.copy(), init_seed=seed)

    def copy(self) -> "DenseModel":
        return DenseModel(self.dim, self.buckets, self.query_table.copy(),
                          self.passage_table.copy(), init_seed=self.init_seed)

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(_MAGIC)
        w.u32(self.dim)
        w.u32(self.buckets)
        w.u64(self.init_seed)
        w.f32_array(self.query_table)
        w.f32_array(self.passage_table)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DenseModel":
        r = Reader(data, _MAGIC)
        dim = r.u32()
        buckets = r.u32()
        seed = r.u64()
        q = r.f32_array((buckets, dim)).astype(np.float64)
        p = r.f32_array((buckets, dim)).astype(np.float64)
        return cls(dim, buckets, q, p, init_seed=seed)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_bytes()).hexdigest()


def save(model: DenseModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load(path: str) -> DenseModel:
    with open(path, "rb") as fh:
        return DenseModel.from_bytes(fh.read())


def encode(model: DenseModel, text: str | Sequence[str], side: str = "query") -> np.ndarray:
    """Embed text (or a pre-tokenized sequence) with the query or passage table."""
    if side == "query":
        table = model.query_table
    elif side == "passage":
        table = model.passage_table
    else:
        raise ConfigError(f"side must be 'query' or 'passage', got {side!r}")
    return _pool(table, _as_tokens(text), model.buckets)


def dot(query_vec: np.ndarray, passage_vec: np.ndarray) -> float:
    if query_vec.shape != passage_vec.shape:
        raise ValueError(
            f"dimension mismatch: {query_vec.shape} vs {passage_vec.shape}"
        )
    return float(np.dot(query_vec, passage_vec))


def encode_corpus(model: DenseModel, corpus: Corpus, include_titles: bool = True,
                  threads: int = 1) -> np.ndarray:
    """Passage-table embeddings for the whole corpus, one row per passage in order."""
    def enc(pid: str) -> np.ndarray:
        return _pool(model.passage_table,
                     tokenize(corpus.index_text(pid, include_titles)), model.buckets)

    return np.stack(parallel_map(enc, corpus.ids, threads))


def encode_corpus_cached(model: DenseModel, corpus: Corpus, cache_dir: str,
                         include_titles: bool = True, threads: int = 1) -> np.ndarray:
    """encode_corpus with an on-disk cache keyed by model and corpus checksums."""
    tag = "t" if include_titles else "n"
    name = f"pmat-{model.checksum()[:16]}-{corpus.checksum()[:16]}-{tag}.npy"
    path = os.path.join(cache_dir, name)
    if os.path.exists(path):
        return np.load(path)
    matrix = encode_corpus(model, corpus, include_titles, threads)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, matrix)
    os.replace(tmp, path)
    return matrix


def search(model: DenseModel, matrix: np.ndarray, ids: Sequence[str],
           query_text: str, k: int, query_id: str = "") -> RankedList:
    """Exact top-k by dot product over the precomputed passage matrix."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if matrix.shape[0] != len(ids):
        raise DataError(f"matrix has {matrix.shape[0]} rows for {len(ids)} ids")
    if matrix.shape[1] != model.dim:
        raise DataError(f"matrix dim {matrix.shape[1]} != model dim {model.dim}")
    qvec = encode(model, query_text, side="query")
    scores = matrix @ qvec
    order = np.lexsort((np.arange(len(ids)), -scores))[:k]
    return RankedList(query_id,
                      tuple(ids[i] for i in order),
                      tuple(scores[i] for i in order))


def search_many(model: DenseModel, matrix: np.ndarray, ids: Sequence[str],
                queries: Sequence[tuple[str, str]], k: int,
                threads: int = 1) -> dict[str, RankedList]:
    """search() over (query_id, text) pairs; result order follows the input."""
    results = parallel_map(
        lambda item: search(model, matrix, ids, item[1], k, query_id=item[0]),
        queries, threads)
    return {r.query_id: r for r in results}


@dataclass(frozen=True)
class TrainingExample:
    """Mined labels for one query: candidate positive and negative passage ids."""

    query_id: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise DataError(
                f"query {self.query_id!r}: ids in both positives and negatives: {sorted(overlap)}"
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    temperature: float = 1.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TableGrad:
    """Sparse row-gradient for one hash table (indices are unique and sorted)."""

    indices: np.ndarray
    rows: np.ndarray

    def to_dense(self, buckets: int, dim: int) -> np.ndarray:
        out = np.zeros((buckets, dim), dtype=np.float64)
        if len(self.indices):
            out[self.indices] = self.rows
        return out

    def add_into(self, buffer: np.ndarray) -> None:
        if len(self.indices):
            buffer[self.indices] += self.rows


@dataclass
class ContrastiveGrads:
    query_table: TableGrad
    passage_table: TableGrad


def _scatter(token_lists: Sequence[Sequence[str]], vec_grads: np.ndarray,
             buckets: int, dim: int) -> TableGrad:
    acc: dict[int, np.ndarray] = {}
    for tokens, g in zip(token_lists, vec_grads):
        uids, counts = _bucket_counts(tokens, buckets)
        if not len(uids):
            continue
        weights = counts / counts.sum()
        for uid, w in zip(uids.tolist(), weights):
            row = acc.get(uid)
            if row is None:
                acc[uid] = w * g
            else:
                row += w * g
    if not acc:
        return TableGrad(np.empty(0, dtype=np.int64), np.empty((0, dim)))
    order = sorted(acc)
    return TableGrad(np.asarray(order, dtype=np.int64),
                     np.stack([acc[i] for i in order]))


def contrastive_loss(model: DenseModel,
                     batch: Sequence[tuple[str | Sequence[str], str | Sequence[str], str | Sequence[str]]],
                     temperature: float = 1.0) -> tuple[float, ContrastiveGrads]:
    """In-batch-negative contrastive loss and its analytic parameter gradients.

    Each batch item is (query, positive passage, negative passage); items may
    be raw strings or pre-tokenized sequences. Candidates for query i are all
    2 * batch positives and negatives; the loss is the mean negative
    log-likelihood of each query's own positive under a softmax of
    dot-product scores divided by `temperature`.
    """
    if not batch:
        raise ValueError("empty batch")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    n = len(batch)
    q_tokens = [_as_tokens(q) for q, _, _ in batch]
    c_tokens: list[list[str]] = []
    for _, pos, neg in batch:
        c_tokens.append(_as_tokens(pos))
        c_tokens.append(_as_tokens(neg))
    q_vecs = np.stack([_pool(model.query_table, t, model.buckets) for t in q_tokens])
    c_vecs = np.stack([_pool(model.passage_table, t, model.buckets) for t in c_tokens])
    logits = (q_vecs @ c_vecs.T) / temperature
    logp = log_softmax(logits)
    rows = np.arange(n)
    pos_cols = 2 * rows
    loss = float(-logp[rows, pos_cols].mean())
    g_scores = np.exp(logp)
    g_scores[rows, pos_cols] -= 1.0
    g_scores /= temperature * n
    g_q = g_scores @ c_vecs
    g_c = g_scores.T @ q_vecs
    return loss, ContrastiveGrads(
        query_table=_scatter(q_tokens, g_q, model.buckets, model.dim),
        passage_table=_scatter(c_tokens, g_c, model.buckets, model.dim),
    )


@dataclass
class TrainStats:
    examples_used: int
    examples_skipped: int
    steps: int
    epoch_losses: list[float]


def _noised(tokens: list[str], noise: NoiseConfig, *seed_parts) -> list[str]:
    if noise.rate == 0.0:
        return tokens
    return corrupt(tokens, replace(noise, seed=derive_seed(*seed_parts)))


def train(model: DenseModel, examples: Sequence[TrainingExample], queries: QuerySet,
          corpus: Corpus, config: TrainConfig,
          include_titles: bool = True) -> tuple[DenseModel, TrainStats]:
    """Contrastive training over mined examples; returns a new model, input untouched.

    Per epoch and query one positive and one negative are drawn from the
    example (seeded per query id), query and passage token sequences are
    noise-corrupted, and batches step the optimizer. Examples missing a
    positive or negative are skipped with a warning. Per-use RNG streams all
    derive from `config.seed`; `config.noise.seed` is not consulted here.
    """
    usable = [ex for ex in examples if ex.positives and ex.negatives]
    skipped = len(examples) - len(usable)
    if skipped:
        logger.warning("skipping %d/%d examples without both label sides",
                       skipped, len(examples))
    out = model.copy()
    stats = TrainStats(examples_used=len(usable), examples_skipped=skipped,
                       steps=0, epoch_losses=[])
    if not usable or config.epochs == 0:
        return out, stats
    opt = make_optimizer(config.optimizer, config.learning_rate)
    params = [out.query_table, out.passage_table]
    q_buf = np.zeros_like(out.query_table)
    p_buf = np.zeros_like(out.passage_table)
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            derive_seed(config.seed, "order", epoch)).permutation(len(usable))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start:start + config.batch_size]:
                ex = usable[i]
                r = np.random.default_rng(derive_seed(config.seed, "sample", epoch, ex.query_id))
                pos_id = ex.positives[int(r.integers(len(ex.positives)))]
                neg_id = ex.negatives[int(r.integers(len(ex.negatives)))]
                q = _noised(tokenize(queries.text(ex.query_id)), config.noise,
                            config.seed, "noise", epoch, ex.query_id, "q")
                p = _noised(tokenize(corpus.index_text(pos_id, include_titles)),
                            config.noise, config.seed, "noise", epoch, ex.query_id, "p")
                ng = _noised(tokenize(corpus.index_text(neg_id, include_titles)),
                             config.noise, config.seed, "noise", epoch, ex.query_id, "n")
                batch.append((q, p, ng))
            loss, grads = contrastive_loss(out, batch, config.temperature)
            losses.append(loss)
            q_buf.fill(0.0)
            p_buf.fill(0.0)
            grads.query_table.add_into(q_buf)
            grads.passage_table.add_into(p_buf)
            opt.step(params, [q_buf, p_buf])
            stats.steps += 1
        stats.epoch_losses.append(float(np.mean(losses)))
    return out, stats


def soft_labels(model: DenseModel, query_text: str | Sequence[str],
                passages: Sequence[str | Sequence[str]],
                temperature: float = 1.0) -> np.ndarray:
    """Teacher distribution: softmax of dot scores over `passages` at `temperature`."""
    if not len(passages):
        raise ValueError("soft_labels needs at least one passage")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    qvec = encode(model, query_text, side="query")
    scores = np.array([dot(qvec, encode(model, p, side="passage")) for p in passages])
    return softmax(scores / temperature)


@dataclass
class FinetuneResult:
    model: DenseModel
    stage1_model: DenseModel
    queries_used: int
    queries_skipped: int
    hard_negative_counts: dict[str, int]


def _finetune_stage(model: DenseModel, items: Sequence[tuple[str, tuple[str, ...], tuple[str, ...]]],
                    queries: QuerySet, corpus: Corpus, config: TrainConfig,
                    include_titles: bool, hard_negatives: Mapping[str, tuple[str, ...]] | None,
                    hard_prob: float) -> DenseModel:
    # Shared by both stages so that hard_prob == 0 reproduces stage 1 exactly:
    # the hard/random coin is always drawn, keeping RNG streams aligned.
    out = model.copy()
    if config.epochs == 0:
        return out
    opt = make_optimizer(config.optimizer, config.learning_rate)
    params = [out.query_table, out.passage_table]
    q_buf = np.zeros_like(out.query_table)
    p_buf = np.zeros_like(out.passage_table)
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            derive_seed(config.seed, "ft-order", epoch)).permutation(len(items))
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start:start + config.batch_size]:
                qid, positives, pool = items[i]
                r = np.random.default_rng(derive_seed(config.seed, "ft-sample", epoch, qid))
                pos_id = positives[int(r.integers(len(positives)))]
                coin = float(r.random())
                hard = hard_negatives.get(qid) if hard_negatives else None
                if hard and coin < hard_prob:
                    neg_id = hard[int(r.integers(len(hard)))]
                else:
                    neg_id = pool[int(r.integers(len(pool)))]
                q = _noised(tokenize(queries.text(qid)), config.noise,
                            config.seed, "ft-noise", epoch, qid, "q")
                p = _noised(tokenize(corpus.index_text(pos_id, include_titles)),
                            config.noise, config.seed, "ft-noise", epoch, qid, "p")
                ng = _noised(tokenize(corpus.index_text(neg_id, include_titles)),
                             config.noise, config.seed, "ft-noise", epoch, qid, "n")
                batch.append((q, p, ng))
            _, grads = contrastive_loss(out, batch, config.temperature)
            q_buf.fill(0.0)
            p_buf.fill(0.0)
            grads.query_table.add_into(q_buf)
            grads.passage_table.add_into(p_buf)
            opt.step(params, [q_buf, p_buf])
    return out


def finetune_supervised(model: DenseModel, qrels, queries: QuerySet, corpus: Corpus,
                        config: TrainConfig, hard_negative_prob: float = 0.1,
                        mine_k: int = 100, random_pool: int = 50,
                        include_titles: bool = True, threads: int = 1) -> FinetuneResult:
    """Two-stage supervised fine-tune on judged queries.

    Stage 1 trains from `model` on gold positives against randomly sampled
    negatives. Stage 2 mines each query's top-`mine_k` non-positives with the
    stage-1 model, then retrains from `model` drawing a mined hard negative
    with probability `hard_negative_prob` (random negative otherwise).
    Queries without a positive judgment are skipped.
    """
    if not 0.0 <= hard_negative_prob <= 1.0:
        raise ConfigError(
            f"hard_negative_prob must be in [0, 1], got {hard_negative_prob}")
    items: list[tuple[str, tuple[str, ...], tuple[str, ...]]] = []
    skipped = 0
    all_ids = corpus.ids
    for q in queries:
        gold = sorted(qrels.relevant_ids(q.id))
        if not gold:
            skipped += 1
            continue
        gold_set = set(gold)
        non_pos = [pid for pid in all_ids if pid not in gold_set]
        if not non_pos:
            skipped += 1
            continue
        r = np.random.default_rng(derive_seed(config.seed, "ft-pool", q.id))
        take = min(random_pool, len(non_pos))
        keep = np.sort(r.choice(len(non_pos), size=take, replace=False))
        items.append((q.id, tuple(gold), tuple(non_pos[i] for i in keep)))
    if skipped:
        logger.warning("finetune: skipping %d queries without positive judgments", skipped)
    if not items:
        raise BootstrapError("no queries with positive judgments to fine-tune on")

    stage1 = _finetune_stage(model, items, queries, corpus, config,
                             include_titles, None, 0.0)
    matrix = encode_corpus(stage1, corpus, include_titles, threads)
    hard: dict[str, tuple[str, ...]] = {}
    for qid, gold, _ in items:
        ranked = search(stage1, matrix, all_ids, queries.text(qid),
                        min(mine_k, len(corpus)), query_id=qid)
        gold_set = set(gold)
        mined = tuple(pid for pid in ranked.passage_ids if pid not in gold_set)
        if mined:
            hard[qid] = mined
    stage2 = _finetune_stage(model, items, queries, corpus, config,
                             include_titles, hard, hard_negative_prob)
    return FinetuneResult(model=stage2, stage1_model=stage1,
                          queries_used=len(items), queries_skipped=skipped,
                          hard_negative_counts={k: len(v) for k, v in hard.items()})
