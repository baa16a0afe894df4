"""Command-line driver for the bootstrapped retrieval pipeline.

Every subcommand reads settings from an optional JSON --config file,
overridable by individual flags, and prints a single JSON summary line to
stdout. Errors print a JSON object to stderr and exit 2 (configuration),
3 (malformed data), or 4 (runtime failure). Artifacts under --workdir are
byte-identical across reruns with unchanged inputs and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass

from . import bm25, bootstrap, dense, metrics, reranker
from .bootstrap import EvalContext, ExtractionRule
from .corpus import (crop_queries, load_corpus, load_qrels, load_queries,
                     save_queries)
from .dense import TrainConfig
from .errors import ConfigError, DataError
from .parallel import parallel_map
from .reranker import RerankTrainConfig
from .textproc import NoiseConfig, derive_seed

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    # inputs
    corpus: str | None = None
    queries: str | None = None
    qrels: str | None = None
    val_queries: str | None = None
    val_qrels: str | None = None
    run: str | None = None
    retriever: str | None = None
    reranker: str | None = None
    models: list[str] | None = None
    use_synthetic_queries_file: str | None = None
    # run control
    workdir: str = "work"
    seed: int | None = None
    threads: int = 1
    include_titles: bool = True
    tag: str = "bootrank"
    # bm25
    k1: float = 1.2
    b: float = 0.75
    # label extraction
    window_k: int = 50
    k_pos: int = 10
    k_neg: int = 5
    # dense retriever
    dim: int = 64
    buckets: int = 65536
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    temperature: float = 1.0
    noise_rate: float = 0.1
    mask_symbol: str = "__mask__"
    optimizer: str = "adam"
    # reranker
    rr_hidden: int = 32
    rr_epochs: int = 8
    rr_batch_size: int = 16
    rr_learning_rate: float = 2e-3
    rr_n_negatives: int = 7
    rr_teacher_temperature: float = 1.0
    rr_noise_rate: float = 0.1
    rr_loss: str = "kl"
    kl_direction: str = "student_teacher"
    rr_optimizer: str = "adam"
    # loop
    iterations: int = 2
    retrieve_k: int = 100
    rerank_depth: int = 100
    self_supervision: bool = False
    warm_start: bool = False
    # cropping
    crop_cap: int = 2_000_000
    crop_min_tokens: int = 3
    # eval
    metric: str = "ndcg"
    k: int = 10
    # supervised fine-tune
    hard_negative_prob: float = 0.1
    mine_k: int = 100
    random_pool: int = 50

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("seed is required (set --seed or 'seed' in --config)")
        return int(self.seed)

    def require_path(self, name: str) -> str:
        value = getattr(self, name)
        if not value:
            raise ConfigError(f"--{name.replace('_', '-')} is required")
        if not os.path.exists(value):
            raise ConfigError(f"--{name.replace('_', '-')}: no such file: {value}")
        return value

    def extraction_rule(self) -> ExtractionRule:
        return ExtractionRule(k=self.window_k, k_pos=self.k_pos, k_neg=self.k_neg)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, temperature=self.temperature,
            noise=NoiseConfig(rate=self.noise_rate, mask_symbol=self.mask_symbol),
            seed=seed, optimizer=self.optimizer)

    def rerank_train_config(self, seed: int = 0) -> RerankTrainConfig:
        return RerankTrainConfig(
            epochs=self.rr_epochs, batch_size=self.rr_batch_size,
            learning_rate=self.rr_learning_rate, n_negatives=self.rr_n_negatives,
            positive_depth=self.k_pos,
            teacher_temperature=self.rr_teacher_temperature, hidden=self.rr_hidden,
            noise=NoiseConfig(rate=self.rr_noise_rate, mask_symbol=self.mask_symbol),
            seed=seed, optimizer=self.rr_optimizer, loss=self.rr_loss,
            kl_direction=self.kl_direction, warm_start=self.warm_start)


_HELP = {
    "corpus": "corpus.jsonl path",
    "queries": "queries.jsonl path (training queries)",
    "qrels": "qrels TSV path",
    "val_queries": "held-out queries.jsonl for per-iteration evaluation",
    "val_qrels": "held-out qrels TSV for per-iteration evaluation",
    "run": "TREC run file to evaluate",
    "retriever": "dense retriever checkpoint path",
    "reranker": "reranker checkpoint path",
    "models": "dense checkpoint path (repeat for each ensemble member)",
    "use_synthetic_queries_file": "queries.jsonl to use instead of cropped queries",
    "workdir": "directory for artifacts",
    "seed": "master random seed (required)",
    "threads": "worker threads; results are identical for any value",
    "include_titles": "index passages as title + text",
    "tag": "run tag written into TREC run files",
    "k1": "BM25 k1",
    "b": "BM25 b",
    "window_k": "extraction window size over reranked lists",
    "k_pos": "extraction: ranks 1..k_pos become positives",
    "k_neg": "extraction: bottom k_neg ranks of the window become negatives",
    "dim": "dense embedding width",
    "buckets": "hash buckets per embedding table",
    "epochs": "retriever training epochs",
    "batch_size": "retriever batch size",
    "learning_rate": "retriever learning rate",
    "temperature": "contrastive softmax temperature",
    "noise_rate": "retriever training noise rate",
    "mask_symbol": "mask sentinel token",
    "optimizer": "retriever optimizer: adam or sgd",
    "rr_hidden": "reranker hidden width",
    "rr_epochs": "reranker training epochs",
    "rr_batch_size": "reranker batch size",
    "rr_learning_rate": "reranker learning rate",
    "rr_n_negatives": "negatives per distilled candidate subset",
    "rr_teacher_temperature": "teacher softmax temperature",
    "rr_noise_rate": "reranker training noise rate",
    "rr_loss": "reranker loss: kl or ce",
    "kl_direction": "kl direction: student_teacher or teacher_student",
    "rr_optimizer": "reranker optimizer: adam or sgd",
    "iterations": "refinement iterations to run",
    "retrieve_k": "candidate list depth retrieved per query",
    "rerank_depth": "how deep the reranker reorders each list",
    "self_supervision": "skip the reranker; extract labels from the retriever",
    "warm_start": "continue from previous weights instead of re-initializing",
    "crop_cap": "maximum number of cropped queries",
    "crop_min_tokens": "drop cropped sentences shorter than this many tokens",
    "metric": "eval metric: ndcg, recall, or accuracy",
    "k": "eval cutoff",
    "hard_negative_prob": "stage-2 probability of drawing a mined hard negative",
    "mine_k": "stage-2 mining depth",
    "random_pool": "random negatives pre-sampled per query",
}


def _add_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON config file; flags override its keys")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress to stderr")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        text = f"{_HELP[f.name]} (default: {f.default})"
        if f.name == "models":
            parser.add_argument("--model", dest="models", action="append",
                                default=None, help=_HELP["models"] + " (default: none)")
        elif f.type == "bool":
            parser.add_argument(flag, dest=f.name,
                                action=argparse.BooleanOptionalAction,
                                default=None, help=text)
        elif f.type in ("int", "int | None"):
            parser.add_argument(flag, dest=f.name, type=int, default=None, help=text)
        elif f.type == "float":
            parser.add_argument(flag, dest=f.name, type=float, default=None, help=text)
        else:
            parser.add_argument(flag, dest=f.name, default=None, help=text)


def _build_config(args: argparse.Namespace) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    merged = dataclasses.asdict(RunConfig())
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"--config: no such file: {args.config}")
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config {args.config}: malformed JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"--config {args.config}: expected a JSON object")
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"--config {args.config}: unknown keys: {unknown}")
        merged.update(data)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad configuration: {exc}") from None
    cfg.require_seed()
    return cfg


def _resolve_train_queries(cfg: RunConfig):
    if cfg.use_synthetic_queries_file:
        return load_queries(cfg.require_path("use_synthetic_queries_file"))
    if cfg.queries:
        return load_queries(cfg.require_path("queries"))
    default = os.path.join(cfg.workdir, "cropped_queries.jsonl")
    if os.path.exists(default):
        return load_queries(default)
    raise ConfigError(
        "no training queries: pass --queries, --use-synthetic-queries-file, "
        "or run crop-queries first")


def _eval_context(cfg: RunConfig) -> EvalContext | None:
    if cfg.val_queries and cfg.val_qrels:
        return EvalContext(queries=load_queries(cfg.require_path("val_queries")),
                           qrels=load_qrels(cfg.require_path("val_qrels")),
                           k=cfg.k)
    return None


def _cmd_ingest(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg.require_path("corpus"))
    summary: dict = {"command": "ingest", "passages": len(corpus),
                     "corpus_checksum": corpus.checksum()}
    queries = None
    if cfg.queries:
        queries = load_queries(cfg.require_path("queries"))
        summary["queries"] = len(queries)
    if cfg.qrels:
        qrels = load_qrels(cfg.require_path("qrels"))
        summary["qrels_queries"] = len(qrels)
        summary["qrels_pairs"] = sum(1 for _ in qrels.items())
        summary["dangling_references"] = len(
            qrels.check_references(corpus=corpus, queries=queries))
    os.makedirs(cfg.workdir, exist_ok=True)
    path = os.path.join(cfg.workdir, "ingest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary["output"] = path
    return summary


def _cmd_crop_queries(cfg: RunConfig) -> dict:
    seed = cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    queries = crop_queries(corpus, cap=cfg.crop_cap, seed=derive_seed(seed, "crop"),
                           min_tokens=cfg.crop_min_tokens)
    os.makedirs(cfg.workdir, exist_ok=True)
    path = os.path.join(cfg.workdir, "cropped_queries.jsonl")
    save_queries(queries, path)
    return {"command": "crop-queries", "queries": len(queries),
            "cap": cfg.crop_cap, "output": path}


def _cmd_bm25_index(cfg: RunConfig) -> dict:
    cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    index = bm25.build(corpus, bm25.Bm25Params(k1=cfg.k1, b=cfg.b),
                       cfg.include_titles)
    os.makedirs(cfg.workdir, exist_ok=True)
    path = os.path.join(cfg.workdir, "bm25.idx")
    bm25.save(index, path)
    return {"command": "bm25-index", "passages": index.n_passages,
            "terms": len(index.postings), "avgdl": index.avgdl, "output": path}


def _cmd_warmup(cfg: RunConfig) -> dict:
    seed = cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    queries = _resolve_train_queries(cfg)
    index_path = os.path.join(cfg.workdir, "bm25.idx")
    index = bm25.load(index_path) if os.path.exists(index_path) else None
    state = bootstrap.warmup(
        corpus, queries, cfg.extraction_rule(), cfg.train_config(), seed,
        dim=cfg.dim, buckets=cfg.buckets, bm25_index=index,
        bm25_params=bm25.Bm25Params(k1=cfg.k1, b=cfg.b),
        eval_ctx=_eval_context(cfg), include_titles=cfg.include_titles,
        threads=cfg.threads, workdir=cfg.workdir)
    rec = state.trace[0]
    return {"command": "warmup", "t": 0,
            "examples_used": rec.examples_used,
            "examples_skipped": rec.examples_skipped,
            "retriever_ndcg": rec.retriever_ndcg,
            "checkpoint": os.path.join(cfg.workdir, "iter0.retriever.ckpt")}


def _cmd_iterate(cfg: RunConfig) -> dict:
    seed = cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    queries = _resolve_train_queries(cfg)
    ckpt = os.path.join(cfg.workdir, "iter0.retriever.ckpt")
    trace_path = os.path.join(cfg.workdir, "trace.json")
    if not os.path.exists(ckpt) or not os.path.exists(trace_path):
        raise ConfigError(f"workdir {cfg.workdir!r} has no warm-up artifacts; "
                          "run warmup first")
    trace_seed, records = bootstrap.read_trace(trace_path)
    if trace_seed != seed:
        raise ConfigError(
            f"workdir was produced with seed {trace_seed}, not {seed}")
    warm_model = dense.load(ckpt)
    state = bootstrap.BootstrapState(
        corpus=corpus, queries=queries, rule=cfg.extraction_rule(), seed=seed,
        include_titles=cfg.include_titles, t=0, warmup_model=warm_model,
        retriever=warm_model, reranker=None, trace=records[:1],
        retrievers={0: warm_model}, rerankers={})
    bootstrap.iterate(
        state, cfg.iterations, cfg.train_config(), cfg.rerank_train_config(),
        retrieve_k=cfg.retrieve_k, rerank_depth=cfg.rerank_depth,
        self_supervision=cfg.self_supervision, warm_start=cfg.warm_start,
        eval_ctx=_eval_context(cfg), threads=cfg.threads, workdir=cfg.workdir)
    summary: dict = {
        "command": "iterate", "iterations_run": cfg.iterations, "t": state.t,
        "trace": [{"t": rec.t, "retriever_ndcg": rec.retriever_ndcg,
                   "reranker_ndcg": rec.reranker_ndcg} for rec in state.trace],
    }
    if state.t >= 1 and any(rec.retriever_ndcg is not None
                            for rec in state.trace if rec.t >= 1):
        chosen = bootstrap.select_final(state)
        summary["selected_retriever_iteration"] = chosen.retriever_iteration
        summary["selected_reranker_iteration"] = chosen.reranker_iteration
    return summary


def _cmd_rerank(cfg: RunConfig) -> dict:
    cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    queries = _resolve_train_queries(cfg)
    model = dense.load(cfg.require_path("retriever"))
    rr = reranker.load(cfg.require_path("reranker"))
    matrix = dense.encode_corpus(model, corpus, cfg.include_titles, cfg.threads)
    pairs = [(q.id, q.text) for q in queries]
    lists = dense.search_many(model, matrix, corpus.ids, pairs,
                              min(cfg.retrieve_k, len(corpus)), cfg.threads)
    reranked = parallel_map(
        lambda q: reranker.rerank(rr, q.text, lists[q.id], corpus,
                                  cfg.rerank_depth, cfg.include_titles),
        queries, cfg.threads)
    run = {r.query_id: r for r in reranked}
    os.makedirs(cfg.workdir, exist_ok=True)
    path = os.path.join(cfg.workdir, "reranked.trec")
    metrics.write_run(run, path, tag=cfg.tag)
    return {"command": "rerank", "queries": len(run),
            "retrieve_k": cfg.retrieve_k, "rerank_depth": cfg.rerank_depth,
            "output": path}


def _cmd_eval(cfg: RunConfig) -> dict:
    run = metrics.read_run(cfg.require_path("run"))
    qrels = load_qrels(cfg.require_path("qrels"))
    if cfg.metric == "ndcg":
        report = metrics.ndcg_at_k(run, qrels, cfg.k)
    elif cfg.metric == "recall":
        report = metrics.recall_at_k(run, qrels, cfg.k)
    elif cfg.metric == "accuracy":
        report = metrics.topk_accuracy(run, qrels, cfg.k)
    else:
        raise ConfigError(f"unknown metric {cfg.metric!r} "
                          "(expected ndcg, recall, or accuracy)")
    os.makedirs(cfg.workdir, exist_ok=True)
    path = os.path.join(cfg.workdir, "eval.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"command": "eval", report.metric: report.mean, "n": report.n,
            "excluded": report.excluded, "output": path}


def _cmd_ensemble(cfg: RunConfig) -> dict:
    cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    queries = _resolve_train_queries(cfg)
    if not cfg.models:
        raise ConfigError("--model is required (repeat it for each member)")
    models = []
    for path in cfg.models:
        if not os.path.exists(path):
            raise ConfigError(f"--model: no such file: {path}")
        models.append(dense.load(path))
    matrices = [dense.encode_corpus(m, corpus, cfg.include_titles, cfg.threads)
                for m in models]
    k = min(cfg.retrieve_k, len(corpus))
    run = {q.id: metrics.ensemble_search(models, matrices, corpus.ids, q.text,
                                         k, query_id=q.id)
           for q in queries}
    os.makedirs(cfg.workdir, exist_ok=True)
    path = os.path.join(cfg.workdir, "ensemble.trec")
    metrics.write_run(run, path, tag=cfg.tag)
    return {"command": "ensemble", "models": len(models), "queries": len(run),
            "k": k, "output": path}


def _cmd_finetune(cfg: RunConfig) -> dict:
    seed = cfg.require_seed()
    corpus = load_corpus(cfg.require_path("corpus"))
    queries = load_queries(cfg.require_path("queries"))
    qrels = load_qrels(cfg.require_path("qrels"))
    model = dense.load(cfg.require_path("retriever"))
    result = dense.finetune_supervised(
        model, qrels, queries, corpus,
        cfg.train_config(seed=derive_seed(seed, "finetune")),
        hard_negative_prob=cfg.hard_negative_prob, mine_k=cfg.mine_k,
        random_pool=cfg.random_pool, include_titles=cfg.include_titles,
        threads=cfg.threads)
    os.makedirs(cfg.workdir, exist_ok=True)
    stage1_path = os.path.join(cfg.workdir, "finetune.stage1.ckpt")
    final_path = os.path.join(cfg.workdir, "finetune.final.ckpt")
    dense.save(result.stage1_model, stage1_path)
    dense.save(result.model, final_path)
    summary: dict = {"command": "finetune", "queries_used": result.queries_used,
                     "queries_skipped": result.queries_skipped,
                     "stage1_checkpoint": stage1_path, "checkpoint": final_path}
    eval_ctx = _eval_context(cfg)
    if eval_ctx is not None:
        matrix = dense.encode_corpus(result.model, corpus, cfg.include_titles,
                                     cfg.threads)
        pairs = [(q.id, q.text) for q in eval_ctx.queries]
        run = dense.search_many(result.model, matrix, corpus.ids, pairs,
                                eval_ctx.k, cfg.threads)
        report = metrics.ndcg_at_k(run, eval_ctx.qrels, eval_ctx.k)
        summary[report.metric] = report.mean
    return summary


_COMMANDS = {
    "ingest": (_cmd_ingest, "validate and summarize input files"),
    "crop-queries": (_cmd_crop_queries, "crop passage sentences into pseudo-queries"),
    "bm25-index": (_cmd_bm25_index, "build and store the BM25 index"),
    "warmup": (_cmd_warmup, "mine BM25 labels and train retriever D0"),
    "iterate": (_cmd_iterate, "run alternating refinement iterations"),
    "rerank": (_cmd_rerank, "retrieve and rerank; write a TREC run file"),
    "eval": (_cmd_eval, "score a TREC run file against qrels"),
    "ensemble": (_cmd_ensemble, "search with summed scores of several retrievers"),
    "finetune": (_cmd_finetune, "two-stage supervised fine-tune of a retriever"),
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bootrank",
        description="Label-free bootstrapped training of a dense retriever "
                    "and reranker pair.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_flags(p)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": {"type": kind, "message": message}}),
          file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _build_config(args)
        summary = _COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        return _fail(2, "config_error", str(exc))
    except DataError as exc:
        return _fail(3, "data_error", str(exc))
    except Exception as exc:  # noqa: BLE001 - map anything else to exit 4
        return _fail(4, "runtime_error", f"{type(exc).__name__}: {exc}")
    print(json.dumps(summary, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
