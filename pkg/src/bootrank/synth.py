"""Seeded synthetic corpora with a latent-topic relevance oracle.

Each passage belongs to one latent topic and mixes topic-specific words,
corpus-wide common words, and near-unique noise words. A query cropped from
a passage is relevant (grade 1) to every passage of the same topic. Used by
the test harness and to generate the bundled demo corpus.
"""

from __future__ import annotations

import argparse
import os
from dataclasses import dataclass

import numpy as np

from .corpus import (Corpus, Passage, Qrels, QuerySet, crop_queries, save_corpus,
                     save_qrels, save_queries)
from .errors import ConfigError
from .textproc import derive_seed


@dataclass(frozen=True)
class WorldConfig:
    n_passages: int = 3000
    n_topics: int = 100
    topic_vocab: int = 30
    common_vocab: int = 150
    noise_vocab: int = 20000
    min_sentences: int = 4
    max_sentences: int = 6
    min_words: int = 8
    max_words: int = 12
    p_topic: float = 0.45
    p_common: float = 0.45
    query_cap: int = 500
    seed: int = 0
    # Surface variation: topic words are voiced in one of `dialects` disjoint
    # slices of the topic vocabulary, borrowing a word from a sibling slice
    # with probability `p_dialect_leak`. The voice is chosen per passage, or
    # per sentence when `sentence_dialects` is set. Sentence-level voicing
    # makes a cropped sentence underrepresent its passage's vocabulary: exact
    # token match only reaches the slice the query happens to be voiced in,
    # while within-passage co-occurrence still ties the topic together for
    # representation learners.
    dialects: int = 1
    p_dialect_leak: float = 0.1
    sentence_dialects: bool = False
    # Lexical traps: with probability `p_ambiguous` a topic-word draw is
    # replaced by a word from a corpus-wide ambiguous vocabulary shared by
    # every topic. Sized large, each ambiguous word is individually rare, so
    # inverse-document-frequency weighting overrates it even though it carries
    # no topic information; co-occurrence statistics expose it as noise.
    p_ambiguous: float = 0.0
    ambiguous_vocab: int = 0
    # Two-level oracle: when set, passages sharing both topic and dialect are
    # grade 2 ("the specific aspect the query came from") while same-topic
    # passages in another dialect stay grade 1. Requires passage-level
    # dialects, where the dialect is a lexically coherent sub-vocabulary.
    graded_dialects: bool = False
    # Distributional sub-structure: each topic splits into `fine_topics`
    # aspects that all share the topic's full vocabulary but concentrate
    # `p_fine` of their topic-word draws on an aspect-preferred half of it.
    # Same-aspect passages are grade 2, same-topic grade 1. Frequency-profile
    # differences are muted for saturating exact-match scorers but add up
    # linearly in pooled embeddings.
    fine_topics: int = 0
    p_fine: float = 0.8

    def __post_init__(self) -> None:
        if self.n_passages < self.n_topics or self.n_topics < 1:
            raise ConfigError("need n_passages >= n_topics >= 1")
        if not 0 <= self.p_topic + self.p_common <= 1:
            raise ConfigError("word mixture probabilities must sum to <= 1")
        if self.dialects < 1 or self.topic_vocab % self.dialects != 0:
            raise ConfigError("dialects must be >= 1 and divide topic_vocab")
        if not 0 <= self.p_dialect_leak <= 1:
            raise ConfigError("p_dialect_leak must be in [0, 1]")
        if not 0 <= self.p_ambiguous <= 1:
            raise ConfigError("p_ambiguous must be in [0, 1]")
        if self.p_ambiguous > 0 and self.ambiguous_vocab < 1:
            raise ConfigError("ambiguous_vocab must be >= 1 when p_ambiguous > 0")
        if self.graded_dialects and (self.dialects < 2 or self.sentence_dialects):
            raise ConfigError(
                "graded_dialects needs dialects >= 2 voiced per passage")
        if self.fine_topics:
            if self.fine_topics < 2 or self.topic_vocab < 2 * self.fine_topics:
                raise ConfigError(
                    "fine_topics needs >= 2 aspects and topic_vocab >= twice that")
            if self.dialects > 1:
                raise ConfigError("fine_topics and dialects are exclusive")
        if not 0 <= self.p_fine <= 1:
            raise ConfigError("p_fine must be in [0, 1]")


@dataclass
class World:
    corpus: Corpus
    queries: QuerySet
    qrels: Qrels
    topic_of: dict[str, int]


def build_world(config: WorldConfig = WorldConfig()) -> World:
    """Deterministically generate a corpus, cropped queries, and oracle qrels."""
    rng = np.random.default_rng(derive_seed(config.seed, "world"))
    slice_size = config.topic_vocab // config.dialects
    fine_sets = None
    if config.fine_topics:
        # per (topic, aspect): a preferred half of the topic vocabulary and
        # its complement, drawn up front so the passage stream is unaffected
        # when the feature is off
        half = config.topic_vocab // 2
        fine_sets = []
        for _ in range(config.n_topics):
            rows = []
            for _ in range(config.fine_topics):
                perm = rng.permutation(config.topic_vocab)
                rows.append((perm[:half], perm[half:]))
            fine_sets.append(rows)
    passages = []
    topic_of: dict[str, int] = {}
    dialect_of: dict[str, int] = {}
    fine_of: dict[str, int] = {}
    for i in range(config.n_passages):
        topic = i % config.n_topics
        # cycles through dialects within each topic, keeping them balanced
        dialect = (i // config.n_topics) % config.dialects
        pid = f"p{i:05d}"
        topic_of[pid] = topic
        dialect_of[pid] = dialect
        fine_of[pid] = (i // config.n_topics) % max(config.fine_topics, 1)
        n_sent = int(rng.integers(config.min_sentences, config.max_sentences + 1))
        sentences = []
        for _ in range(n_sent):
            s_dialect = dialect
            if config.dialects > 1 and config.sentence_dialects:
                s_dialect = int(rng.integers(config.dialects))
            n_words = int(rng.integers(config.min_words, config.max_words + 1))
            words = []
            for _ in range(n_words):
                u = rng.random()
                if u < config.p_topic:
                    if (config.p_ambiguous > 0
                            and rng.random() < config.p_ambiguous):
                        words.append(
                            f"a{int(rng.integers(config.ambiguous_vocab)):04d}")
                        continue
                    if fine_sets is not None:
                        preferred, rest = fine_sets[topic][fine_of[pid]]
                        pool = preferred if rng.random() < config.p_fine else rest
                        words.append(f"t{topic:03d}w{int(pool[int(rng.integers(len(pool)))]):02d}")
                        continue
                    if config.dialects == 1:
                        w = int(rng.integers(config.topic_vocab))
                    else:
                        voice = s_dialect
                        if rng.random() < config.p_dialect_leak:
                            voice = (s_dialect + 1 + int(rng.integers(
                                config.dialects - 1))) % config.dialects
                        w = voice * slice_size + int(rng.integers(slice_size))
                    words.append(f"t{topic:03d}w{w:02d}")
                elif u < config.p_topic + config.p_common:
                    words.append(f"c{int(rng.integers(config.common_vocab)):03d}")
                else:
                    words.append(f"n{int(rng.integers(config.noise_vocab)):05d}")
            sentences.append(" ".join(words) + ".")
        passages.append(Passage(id=pid, text=" ".join(sentences)))
    corpus = Corpus(passages)

    queries = crop_queries(corpus, cap=config.query_cap,
                           seed=derive_seed(config.seed, "crop"))
    by_topic: dict[int, list[str]] = {}
    for pid, topic in topic_of.items():
        by_topic.setdefault(topic, []).append(pid)
    qrels = Qrels()
    for q in queries:
        src = q.source_passage_id
        topic = topic_of[src]
        for pid in by_topic[topic]:
            grade = 1
            if config.graded_dialects and dialect_of[pid] == dialect_of[src]:
                grade = 2
            if config.fine_topics and fine_of[pid] == fine_of[src]:
                grade = 2
            qrels.add(q.id, pid, grade)
    return World(corpus=corpus, queries=queries, qrels=qrels, topic_of=topic_of)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        description="Generate a synthetic latent-topic corpus with queries and qrels.")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--passages", type=int, default=300)
    parser.add_argument("--topics", type=int, default=20)
    parser.add_argument("--query-cap", type=int, default=60)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    world = build_world(WorldConfig(n_passages=args.passages, n_topics=args.topics,
                                    noise_vocab=2000, query_cap=args.query_cap,
                                    seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    save_corpus(world.corpus, os.path.join(args.out, "corpus.jsonl"))
    save_queries(world.queries, os.path.join(args.out, "queries.jsonl"))
    save_qrels(world.qrels, os.path.join(args.out, "qrels.tsv"))
    print(f"wrote {len(world.corpus)} passages, {len(world.queries)} queries to {args.out}")


if __name__ == "__main__":
    main()
