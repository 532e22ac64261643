"""Command-line pipeline driver.

Subcommands cover the whole flow: synthetic corpus generation, vocabulary
building, training, index construction, serving, proxying, evaluation, and
embedding export.  Every artifact-producing command writes a run manifest
next to its outputs; every consuming command verifies recorded hashes before
trusting an artifact.

Configuration precedence is flags > config file > defaults; the fully
resolved configuration is dumped into the manifest.  Logs go to stderr,
data goes to files.  Exit codes: 0 success, 2 usage, 3 missing artifact,
4 artifact hash or consistency mismatch, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Mapping, Sequence

import numpy as np

from . import evaluation, ingest
from .index import IndexFormatError, IndexParams, build_index, save_index
from .manifest import ArtifactMismatchError, RunManifest, sha256_file
from .serving import (
    ServableLoadError,
    load_routes,
    load_servable,
    run_proxy,
    run_server,
)
from .tokenizer import Vocabulary, encode
from .towers import (
    CheckpointFormatError,
    ItemTowerParams,
    TowerConfig,
    item_forward_batch,
    load_checkpoint,
    query_forward,
    save_checkpoint,
)
from .training import TrainConfig, train

logger = logging.getLogger("semsearch.cli")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4

_REQUIRED = object()


class CliError(Exception):
    """Failure with a specific exit code."""

    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _parse_int_list(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    text = str(value).strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flag values over config-file values over defaults.

    Flags left unset parse as None and fall through to the config file, then
    to the built-in default.  Unknown config-file keys and unresolved
    required settings are usage errors.
    """
    file_cfg: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as err:
            raise CliError(EXIT_USAGE, f"config file is not valid JSON: {err}")
        if not isinstance(file_cfg, dict):
            raise CliError(EXIT_USAGE, "config file must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise CliError(
                EXIT_USAGE,
                f"config file has unknown keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, default)
        if value is _REQUIRED:
            flag = "--" + key.replace("_", "-")
            raise CliError(EXIT_USAGE, f"missing required setting {flag}")
        resolved[key] = value
    return resolved


def embed_item_corpus(
    s_params: ItemTowerParams,
    vocab: Vocabulary,
    items: Mapping[str, ingest.ItemRecord],
    chunk: int = 8192,
    progress_every: int = 200_000,
) -> tuple[list[str], np.ndarray]:
    """Embed every item's text, in file order, chunked for memory.

    Returns:
        (item ids, (n, dim) float32 unit-norm matrix).
    """
    ids = list(items)
    blocks = []
    for start in range(0, len(ids), chunk):
        batch_ids = ids[start:start + chunk]
        seqs = [encode(vocab, ingest.item_text(items[i])) for i in batch_ids]
        vecs, _ = item_forward_batch(s_params, seqs)
        blocks.append(vecs.astype(np.float32))
        done = start + len(batch_ids)
        if progress_every and (done % progress_every < chunk or done == len(ids)):
            logger.info("embedded %d / %d items", done, len(ids))
    return ids, np.vstack(blocks)


def _check_vocab_consistency(meta: dict, config: TowerConfig,
                             vocab_path: str, vocab: Vocabulary) -> None:
    recorded = meta.get("vocab_sha256")
    current = sha256_file(vocab_path)
    if recorded is not None and recorded != current:
        raise ArtifactMismatchError(
            f"{vocab_path}: hash {current[:12]}... does not match "
            f"{recorded[:12]}... recorded in the checkpoint")
    if config.vocab_size != vocab.size:
        raise CliError(
            EXIT_MISMATCH,
            f"checkpoint was trained over {config.vocab_size} tokens but "
            f"{vocab_path} holds {vocab.size}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_build_vocab(args: argparse.Namespace) -> int:
    defaults = {
        "items": _REQUIRED, "interactions": _REQUIRED, "users": None,
        "out": _REQUIRED, "min_count": 1,
    }
    cfg = resolve_config(args, defaults)
    manifest = RunManifest(command="build-vocab", config=cfg)
    items = ingest.load_items(cfg["items"])
    manifest.add_input(cfg["items"])
    manifest.add_input(cfg["interactions"])
    users = None
    if cfg["users"]:
        users = ingest.load_users(cfg["users"])
        manifest.add_input(cfg["users"])
    corpus = ingest.vocabulary_corpus(items, cfg["interactions"], users)
    vocab = Vocabulary.build(corpus, min_count=int(cfg["min_count"]))
    vocab.save(cfg["out"])
    manifest.write(cfg["out"])
    logger.info("vocabulary of %d tokens written to %s", vocab.size, cfg["out"])
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    defaults = {
        "out_dir": _REQUIRED, "clusters": 50, "items_per_cluster": 40,
        "queries_per_cluster": 20, "clicks": 100_000, "users": 500,
        "noise": 0.1, "skew": 0.0, "polysemous_queries": 0, "seed": 0,
    }
    cfg = resolve_config(args, defaults)
    spec = ingest.SyntheticSpec(
        clusters=int(cfg["clusters"]),
        items_per_cluster=int(cfg["items_per_cluster"]),
        queries_per_cluster=int(cfg["queries_per_cluster"]),
        clicks=int(cfg["clicks"]),
        users=int(cfg["users"]),
        noise=float(cfg["noise"]),
        skew=float(cfg["skew"]),
        polysemous_queries=int(cfg["polysemous_queries"]),
        seed=int(cfg["seed"]),
    )
    corpus = ingest.generate_synthetic(spec, cfg["out_dir"])
    manifest = RunManifest(command="synth", config=cfg, seed=spec.seed)
    for path in (corpus.users_path, corpus.items_path,
                 corpus.interactions_path, corpus.ground_truth_path):
        manifest.write(path)
    logger.info("synthetic corpus written under %s", cfg["out_dir"])
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    defaults = {
        "items": _REQUIRED, "interactions": _REQUIRED, "vocab": _REQUIRED,
        "out": _REQUIRED, "users": None, "supervision": None,
        "personalize": False, "dim": 64, "heads": 1, "agg_dim": 64,
        "hidden": "256,128", "batch_size": 64, "n_neg": 64, "n_rand": 64,
        "alpha": 0.5, "beta": 1.0, "margin": 0.1, "lr": 0.01, "steps": None,
        "seed": 0, "checkpoint_every": 0,
    }
    cfg = resolve_config(args, defaults)
    manifest = RunManifest(command="train", config=dict(cfg), seed=int(cfg["seed"]))
    vocab_digest = manifest.add_input(cfg["vocab"])
    manifest.add_input(cfg["items"])
    manifest.add_input(cfg["interactions"])
    vocab = Vocabulary.load(cfg["vocab"])
    items = ingest.load_items(cfg["items"])
    users = None
    if cfg["users"]:
        manifest.add_input(cfg["users"])
        users = ingest.load_users(cfg["users"])
    elif cfg["personalize"]:
        raise CliError(EXIT_USAGE, "--personalize requires --users")
    supervision = None
    if cfg["supervision"]:
        manifest.add_input(cfg["supervision"])
        supervision = ingest.load_supervision(cfg["supervision"])

    interactions = ingest.iter_interactions(cfg["interactions"])
    data = ingest.assemble_training_data(
        users, items, interactions, vocab, supervision=supervision,
        personalize=bool(cfg["personalize"]))
    logger.info("assembled %d pairs, pool of %d (join: %s)",
                len(data.pairs), len(data.pool), data.stats)

    tower_cfg = TowerConfig(
        vocab_size=vocab.size, dim=int(cfg["dim"]), heads=int(cfg["heads"]),
        agg_dim=int(cfg["agg_dim"]), hidden=_parse_int_list(cfg["hidden"]))
    steps = cfg["steps"]
    train_cfg = TrainConfig(
        batch_size=int(cfg["batch_size"]), n_neg=int(cfg["n_neg"]),
        n_rand=int(cfg["n_rand"]), alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]), margin=float(cfg["margin"]),
        lr=float(cfg["lr"]), max_steps=None if steps is None else int(steps),
        seed=int(cfg["seed"]))
    meta = {
        "vocab_sha256": vocab_digest,
        "train_beta": train_cfg.beta,
        "train_alpha": train_cfg.alpha,
        "pairs": len(data.pairs),
    }

    def progress(step: int, loss: float, eps: float) -> None:
        logger.info("step %d loss %.5f (%.0f examples/s)", step, loss, eps)

    q, s = train(data.pairs, data.pool, tower_cfg, train_cfg,
                 progress=progress, progress_every=100,
                 checkpoint_path=cfg["out"],
                 checkpoint_every=int(cfg["checkpoint_every"]),
                 checkpoint_meta=meta)
    save_checkpoint(cfg["out"], tower_cfg, q, s, meta=meta)
    manifest.write(cfg["out"])
    logger.info("checkpoint written to %s", cfg["out"])
    return EXIT_OK


def cmd_build_index(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": _REQUIRED, "vocab": _REQUIRED, "items": _REQUIRED,
        "out": _REQUIRED, "degree": IndexParams.degree,
        "build_beam": IndexParams.build_beam,
        "search_beam": IndexParams.search_beam,
        "exact_threshold": IndexParams.exact_threshold, "index_seed": 0,
    }
    cfg = resolve_config(args, defaults)
    manifest = RunManifest(command="build-index", config=cfg,
                           seed=int(cfg["index_seed"]))
    manifest.add_input(cfg["checkpoint"])
    manifest.add_input(cfg["vocab"])
    manifest.add_input(cfg["items"])
    config, _, s_params, meta = load_checkpoint(cfg["checkpoint"])
    vocab = Vocabulary.load(cfg["vocab"])
    _check_vocab_consistency(meta, config, cfg["vocab"], vocab)
    items = ingest.load_items(cfg["items"])

    ids, vectors = embed_item_corpus(s_params, vocab, items)
    params = IndexParams(
        degree=int(cfg["degree"]), build_beam=int(cfg["build_beam"]),
        search_beam=int(cfg["search_beam"]),
        exact_threshold=int(cfg["exact_threshold"]), seed=int(cfg["index_seed"]))
    index = build_index(
        ids, vectors, params,
        progress=lambda done, total: logger.info("indexed %d / %d", done, total))
    save_index(index, cfg["out"])
    manifest.write(cfg["out"])
    logger.info("index over %d items (%s mode) written to %s",
                index.count, index.mode, cfg["out"])
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": _REQUIRED, "index": _REQUIRED, "vocab": _REQUIRED,
        "host": "127.0.0.1", "port": 8080, "model_name": "default",
        "default_k": 10, "fanout": 1.0,
    }
    cfg = resolve_config(args, defaults)
    for path in (cfg["checkpoint"], cfg["index"], cfg["vocab"]):
        RunManifest(command="serve", config={}).add_input(path)
    servable = load_servable(
        cfg["checkpoint"], cfg["index"], cfg["vocab"],
        model_name=cfg["model_name"], default_k=int(cfg["default_k"]),
        fanout=float(cfg["fanout"]))
    run_server(servable, cfg["host"], int(cfg["port"]))
    return EXIT_OK


def cmd_proxy(args: argparse.Namespace) -> int:
    defaults = {
        "routes": _REQUIRED, "host": "127.0.0.1", "port": 8081,
        "backend_timeout": 1.0, "health_interval": 2.0,
    }
    cfg = resolve_config(args, defaults)
    routes = load_routes(cfg["routes"])
    run_proxy(routes, cfg["host"], int(cfg["port"]),
              backend_timeout=float(cfg["backend_timeout"]),
              health_interval=float(cfg["health_interval"]))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": _REQUIRED, "vocab": _REQUIRED, "items": _REQUIRED,
        "eval_interactions": _REQUIRED, "out": _REQUIRED,
        "n": 1024, "k_list": "1,10", "beta": None, "eval_seed": 0,
        "index": None, "popularity_k": 10,
        "endpoint": None, "bench_concurrency": 32, "bench_requests": 1000,
        "bench_k": 10,
    }
    cfg = resolve_config(args, defaults)
    manifest = RunManifest(command="eval", config={k: v for k, v in cfg.items()},
                           seed=int(cfg["eval_seed"]))
    manifest.add_input(cfg["checkpoint"])
    manifest.add_input(cfg["vocab"])
    manifest.add_input(cfg["items"])
    manifest.add_input(cfg["eval_interactions"])
    if cfg["index"]:
        manifest.add_input(cfg["index"])

    config, q_params, s_params, meta = load_checkpoint(cfg["checkpoint"])
    vocab = Vocabulary.load(cfg["vocab"])
    _check_vocab_consistency(meta, config, cfg["vocab"], vocab)
    items = ingest.load_items(cfg["items"])
    beta = cfg["beta"]
    if beta is None:
        beta = float(meta.get("train_beta", 1.0))
    beta = float(beta)

    ids, item_matrix = embed_item_corpus(s_params, vocab, items)
    row_of = {item_id: row for row, item_id in enumerate(ids)}

    topk_queries: list[tuple[list[int], int]] = []
    auc_scores: list[float] = []
    auc_labels: list[bool] = []
    query_texts: list[str] = []
    for inter in ingest.iter_interactions(cfg["eval_interactions"]):
        if inter.item_id not in row_of:
            raise CliError(EXIT_MISMATCH,
                           f"eval interaction references unknown item {inter.item_id!r}")
        row = row_of[inter.item_id]
        if inter.label in ingest.POSITIVE_LABELS:
            topk_queries.append((encode(vocab, inter.query), row))
            query_texts.append(inter.query)
        if inter.label in ingest.SUPERVISION_LABELS:
            heads = query_forward(q_params, encode(vocab, inter.query))
            score = evaluation.soft_scores(heads, item_matrix[row][None, :], beta)[0]
            auc_scores.append(float(score))
            auc_labels.append(inter.label == "human_pos")

    report = evaluation.MetricReport()
    extras: dict[str, float] = {}
    if topk_queries:
        rng = np.random.default_rng(int(cfg["eval_seed"]))
        ranks = evaluation.relevance_ranks(
            q_params, beta, topk_queries, item_matrix, int(cfg["n"]), rng)
        for k in _parse_int_list(cfg["k_list"]):
            rate = float(np.mean(ranks <= k))
            extras[f"top{k}"] = rate
            if k == 1:
                report.top1 = rate
            elif k == 10:
                report.top10 = rate
    if auc_scores:
        report.auc = evaluation.auc(auc_scores, auc_labels)
    if cfg["index"]:
        servable = load_servable(cfg["checkpoint"], cfg["index"], cfg["vocab"])
        popularity = {i: float(rec.popularity) for i, rec in items.items()}
        unique_texts = sorted(set(query_texts))
        if unique_texts:
            report.mean_popularity = evaluation.mean_retrieved_popularity(
                servable, unique_texts, popularity, k=int(cfg["popularity_k"]))
    if cfg["endpoint"]:
        bodies = [{"query": text, "k": int(cfg["bench_k"])}
                  for text in (query_texts or [""])]
        bench = evaluation.latency_bench(
            cfg["endpoint"], bodies, concurrency=int(cfg["bench_concurrency"]),
            total_requests=int(cfg["bench_requests"]))
        report.p50_ms = bench.p50_ms
        report.p99_ms = bench.p99_ms
        report.qps = bench.qps

    payload = json.loads(report.to_json())
    payload["top_k"] = extras
    payload["beta"] = beta
    payload["queries"] = len(topk_queries)
    with open(cfg["out"], "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    manifest.write(cfg["out"])
    print(evaluation.MetricReport.tsv_header())
    print(report.to_tsv_line())
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": _REQUIRED, "vocab": _REQUIRED,
        "items": None, "out_items": None,
        "queries": None, "out_queries": None,
    }
    cfg = resolve_config(args, defaults)
    if not (cfg["items"] and cfg["out_items"]) and not (
            cfg["queries"] and cfg["out_queries"]):
        raise CliError(EXIT_USAGE,
                       "pass --items with --out-items and/or --queries with --out-queries")
    manifest = RunManifest(command="export", config=cfg)
    manifest.add_input(cfg["checkpoint"])
    manifest.add_input(cfg["vocab"])
    config, q_params, s_params, meta = load_checkpoint(cfg["checkpoint"])
    vocab = Vocabulary.load(cfg["vocab"])
    _check_vocab_consistency(meta, config, cfg["vocab"], vocab)

    if cfg["items"]:
        manifest.add_input(cfg["items"])
        items = ingest.load_items(cfg["items"])
        ids, vectors = embed_item_corpus(s_params, vocab, items)
        evaluation.export_item_embeddings(cfg["out_items"], ids, vectors)
        manifest.write(cfg["out_items"])
        logger.info("item embeddings written to %s", cfg["out_items"])
    if cfg["queries"]:
        manifest.add_input(cfg["queries"])
        with open(cfg["queries"], encoding="utf-8") as f:
            texts = [line.strip() for line in f if line.strip()]
        named = [(text, encode(vocab, text)) for text in texts]
        evaluation.export_query_embeddings(cfg["out_queries"], named, q_params)
        manifest.write(cfg["out_queries"])
        logger.info("query embeddings written to %s", cfg["out_queries"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file mirroring flag names")
    sub.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semsearch",
        description="Personalized semantic retrieval pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("build-vocab", help="count tokens and write a vocabulary")
    _add_common(p)
    p.add_argument("--items")
    p.add_argument("--interactions")
    p.add_argument("--users")
    p.add_argument("--out")
    p.add_argument("--min-count", type=int, dest="min_count")
    p.set_defaults(func=cmd_build_vocab)

    p = subs.add_parser("synth", help="generate a synthetic clustered corpus")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--clusters", type=int)
    p.add_argument("--items-per-cluster", type=int, dest="items_per_cluster")
    p.add_argument("--queries-per-cluster", type=int, dest="queries_per_cluster")
    p.add_argument("--clicks", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--skew", type=float)
    p.add_argument("--polysemous-queries", type=int, dest="polysemous_queries")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train the towers on click data")
    _add_common(p)
    p.add_argument("--items")
    p.add_argument("--interactions")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--users")
    p.add_argument("--supervision")
    p.add_argument("--personalize", action=argparse.BooleanOptionalAction)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--agg-dim", type=int, dest="agg_dim")
    p.add_argument("--hidden")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--n-neg", type=int, dest="n_neg")
    p.add_argument("--n-rand", type=int, dest="n_rand")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("build-index", help="embed items and build the index")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--items")
    p.add_argument("--out")
    p.add_argument("--degree", type=int)
    p.add_argument("--build-beam", type=int, dest="build_beam")
    p.add_argument("--search-beam", type=int, dest="search_beam")
    p.add_argument("--exact-threshold", type=int, dest="exact_threshold")
    p.add_argument("--index-seed", type=int, dest="index_seed")
    p.set_defaults(func=cmd_build_index)

    p = subs.add_parser("serve", help="serve retrieval over HTTP")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--index")
    p.add_argument("--vocab")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--default-k", type=int, dest="default_k")
    p.add_argument("--fanout", type=float)
    p.set_defaults(func=cmd_serve)

    p = subs.add_parser("proxy", help="route requests across model shards")
    _add_common(p)
    p.add_argument("--routes")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--backend-timeout", type=float, dest="backend_timeout")
    p.add_argument("--health-interval", type=float, dest="health_interval")
    p.set_defaults(func=cmd_proxy)

    p = subs.add_parser("eval", help="offline metrics and optional bench")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--items")
    p.add_argument("--eval-interactions", dest="eval_interactions")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--k-list", dest="k_list")
    p.add_argument("--beta", type=float)
    p.add_argument("--eval-seed", type=int, dest="eval_seed")
    p.add_argument("--index")
    p.add_argument("--popularity-k", type=int, dest="popularity_k")
    p.add_argument("--endpoint")
    p.add_argument("--bench-concurrency", type=int, dest="bench_concurrency")
    p.add_argument("--bench-requests", type=int, dest="bench_requests")
    p.add_argument("--bench-k", type=int, dest="bench_k")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("export", help="write embedding TSVs")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--items")
    p.add_argument("--out-items", dest="out_items")
    p.add_argument("--queries")
    p.add_argument("--out-queries", dest="out_queries")
    p.set_defaults(func=cmd_export)

    return parser


def _fail(code: int, message: str) -> int:
    print(json.dumps({"code": code, "error": message}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        return _fail(err.code, str(err))
    except FileNotFoundError as err:
        return _fail(EXIT_MISSING, f"missing artifact: {err.filename or err}")
    except (ArtifactMismatchError, ServableLoadError) as err:
        return _fail(EXIT_MISMATCH, str(err))
    except (ValueError, RuntimeError, OSError,
            IndexFormatError, CheckpointFormatError) as err:
        return _fail(EXIT_OTHER, str(err))


if __name__ == "__main__":
    sys.exit(main())
