"""Label-free bootstrapped training of a dense retriever / reranker pair."""

from .bootstrap import (BootstrapState, EvalContext, ExtractionRule,
                        IterationRecord, SelectedModels, extract_labels,
                        iterate, select_final, warmup)
from .corpus import (Corpus, Passage, Qrels, Query, QuerySet, crop_queries,
                     load_corpus, load_qrels, load_queries, save_corpus,
                     save_qrels, save_queries, split_sentences)
from .errors import BootstrapError, ConfigError, DataError
from .metrics import (Report, ensemble_search, ndcg_at_k, read_run,
                      recall_at_k, topk_accuracy, write_run)
from .ranking import RankedList
from .textproc import NoiseConfig, corrupt, derive_seed, tokenize

__version__ = "0.1.0"

__all__ = [
    "BootstrapError",
    "BootstrapState",
    "ConfigError",
    "Corpus",
    "DataError",
    "EvalContext",
    "ExtractionRule",
    "IterationRecord",
    "NoiseConfig",
    "Passage",
    "Qrels",
    "Query",
    "QuerySet",
    "RankedList",
    "Report",
    "SelectedModels",
    "corrupt",
    "crop_queries",
    "derive_seed",
    "ensemble_search",
    "extract_labels",
    "iterate",
    "load_corpus",
    "load_qrels",
    "load_queries",
    "ndcg_at_k",
    "read_run",
    "recall_at_k",
    "save_corpus",
    "save_qrels",
    "save_queries",
    "select_final",
    "split_sentences",
    "tokenize",
    "topk_accuracy",
    "warmup",
    "write_run",
]
