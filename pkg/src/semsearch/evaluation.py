"""Offline retrieval metrics, latency benchmarking, and embedding export.

Metrics: top-k hit rate against uniformly sampled distractors with
pessimistic tie ranking, rank-sum AUC with tie midranks, and mean retrieved
popularity for studying how negative mixing shifts results toward or away
from popular items.  The latency bench replays queries against a running
server at fixed concurrency.  Exports write TSV embeddings reloadable by
external projection tools, with scores reproducible from the exported text.
"""

from __future__ import annotations

import http.client
import json
import math
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .serving import Servable, retrieve
from .towers import QueryTowerParams, query_forward

TSV_FLOAT_FORMAT = "%.6g"


def soft_scores(heads: np.ndarray, items: np.ndarray, beta: float) -> np.ndarray:
    """Attention-weighted scores of many items against one query's heads.

    For each item, per-head inner products are combined by a softmax over
    heads at temperature beta, so the result matches the training-time
    scoring function.

    Args:
        heads: (m, d) query head vectors.
        items: (n, d) item vectors.
        beta: Softmax temperature, > 0.

    Returns:
        (n,) scores.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    t = heads @ items.T                       # (m, n)
    z = t / beta
    z -= z.max(axis=0, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=0, keepdims=True)
    return (w * t).sum(axis=0)


def relevance_ranks(
    q_params: QueryTowerParams,
    beta: float,
    eval_queries: Sequence[tuple[Sequence[int], int]],
    item_vectors: np.ndarray,
    n_candidates: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pessimistic rank of each query's relevant item among random distractors.

    For every (query ids, relevant row) pair, the relevant item competes
    against n_candidates - 1 distractors drawn uniformly without replacement
    from the corpus excluding the relevant item.  Ties rank pessimistically:
    rank = 1 + count(distractor score >= relevant score), so an all-equal
    scorer ranks the relevant item last.

    Args:
        q_params: Query tower parameters.
        beta: Scoring temperature.
        eval_queries: Pairs of (query token ids, relevant row into
            item_vectors).
        item_vectors: (n_items, d) corpus embedding matrix.
        n_candidates: Candidate set size N (relevant + N-1 distractors).
        rng: Distractor sampling generator.

    Returns:
        (len(eval_queries),) integer ranks, each in [1, n_candidates].
    """
    n_items = item_vectors.shape[0]
    if n_candidates < 2:
        raise ValueError(f"n_candidates must be >= 2, got {n_candidates}")
    if n_candidates > n_items:
        raise ValueError(
            f"cannot draw {n_candidates - 1} distinct distractors from "
            f"{n_items - 1} non-relevant items"
        )
    ranks = np.empty(len(eval_queries), dtype=np.int64)
    for i, (ids, rel) in enumerate(eval_queries):
        if not 0 <= rel < n_items:
            raise ValueError(f"relevant row {rel} outside corpus of {n_items}")
        draw = rng.choice(n_items - 1, size=n_candidates - 1, replace=False)
        draw = np.where(draw >= rel, draw + 1, draw)
        heads = query_forward(q_params, ids)
        rel_score = soft_scores(heads, item_vectors[rel][None, :], beta)[0]
        distractor_scores = soft_scores(heads, item_vectors[draw], beta)
        ranks[i] = 1 + int(np.sum(distractor_scores >= rel_score))
    return ranks


def top_k_rate(
    q_params: QueryTowerParams,
    beta: float,
    eval_queries: Sequence[tuple[Sequence[int], int]],
    item_vectors: np.ndarray,
    k: int,
    n_candidates: int,
    rng: np.random.Generator,
) -> float:
    """Fraction of queries whose relevant item ranks within the top k.

    See :func:`relevance_ranks` for the protocol.  With a fixed seed the
    rate is monotonically nondecreasing in k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not eval_queries:
        raise ValueError("no evaluation queries")
    ranks = relevance_ranks(q_params, beta, eval_queries, item_vectors,
                            n_candidates, rng)
    return float(np.mean(ranks <= k))


def auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2.

    Rank-sum (Mann-Whitney) formulation with midranks for tied scores.

    Args:
        scores: Predicted scores.
        labels: True for positive pairs.

    Returns:
        AUC in [0, 1].

    Raises:
        ValueError: Empty input or only one class present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isfinite(s).all():
        raise ValueError("scores contain non-finite values")
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUC needs both classes; got {n_pos} positives, {n_neg} negatives"
        )
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    midranks = starts + (counts + 1) / 2.0     # 1-based average ranks
    ranks = midranks[inverse]
    pos_rank_sum = float(ranks[y].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mean_retrieved_popularity(
    servable: Servable,
    query_texts: Sequence[str],
    popularity: dict[str, float],
    k: int,
) -> float:
    """Average popularity over all top-k hits across the query set.

    Args:
        servable: Loaded servable to retrieve with.
        query_texts: Query strings; order does not affect the result.
        popularity: Item id -> popularity; must cover every retrieved item.
        k: Hits per query.

    Returns:
        Flat mean of hit popularities pooled over queries.

    Raises:
        ValueError: A retrieved item is missing from the popularity map, or
            no query produced any hits.
    """
    total = 0.0
    count = 0
    for text in query_texts:
        resp = retrieve(servable, text, k=k)
        for hit in resp.hits:
            if hit.item_id not in popularity:
                raise ValueError(f"no popularity recorded for item {hit.item_id!r}")
            total += float(popularity[hit.item_id])
            count += 1
    if count == 0:
        raise ValueError("no hits retrieved over the whole query set")
    return total / count


# ---------------------------------------------------------------------------
# Latency bench


@dataclass
class BenchReport:
    requests: int
    errors: int
    duration_s: float
    concurrency: int
    qps: float
    p50_ms: float
    p99_ms: float

    def to_dict(self) -> dict:
        return {
            "requests": self.requests,
            "errors": self.errors,
            "duration_s": self.duration_s,
            "concurrency": self.concurrency,
            "qps": self.qps,
            "p50_ms": self.p50_ms,
            "p99_ms": self.p99_ms,
        }


def _bench_percentile(sorted_ms: list[float], pct: float) -> float:
    idx = max(0, min(len(sorted_ms) - 1,
                     math.ceil(pct / 100 * len(sorted_ms)) - 1))
    return sorted_ms[idx]


def latency_bench(
    endpoint: str,
    request_bodies: Sequence[dict],
    concurrency: int,
    total_requests: int | None = None,
    duration_s: float | None = None,
) -> BenchReport:
    """Replay retrieval requests at fixed concurrency and time them.

    Workers hold keep-alive connections and walk the request list in strided
    order (worker w takes indices w, w+concurrency, ...), cycling when the
    replay budget exceeds the list length.  Exactly one of total_requests or
    duration_s selects the budget.  Request errors are counted and the bench
    completes; an endpoint that fails its health probe aborts instead.

    Args:
        endpoint: Server base URL, e.g. "http://127.0.0.1:8080".
        request_bodies: JSON-serializable retrieval request bodies.
        concurrency: Worker thread count.
        total_requests: Fixed replay size, split across workers.
        duration_s: Wall-clock budget instead of a fixed size.

    Returns:
        Latency/QPS report.

    Raises:
        ValueError: Bad arguments.
        RuntimeError: Health probe failed.
    """
    if concurrency < 1:
        raise ValueError(f"concurrency must be >= 1, got {concurrency}")
    if not request_bodies:
        raise ValueError("no requests to replay")
    if (total_requests is None) == (duration_s is None):
        raise ValueError("pass exactly one of total_requests or duration_s")
    if total_requests is not None and total_requests < 1:
        raise ValueError(f"total_requests must be >= 1, got {total_requests}")

    base = endpoint.rstrip("/")
    try:
        with urllib.request.urlopen(base + "/healthz", timeout=5) as resp:
            if resp.status != 200:
                raise RuntimeError(f"endpoint unhealthy: /healthz -> {resp.status}")
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as err:
        raise RuntimeError(f"endpoint unhealthy: {err}") from err

    host = base.split("://", 1)[-1]
    payloads = [json.dumps(b).encode("utf-8") for b in request_bodies]
    deadline = None if duration_s is None else time.monotonic() + duration_s
    latencies: list[list[float]] = [[] for _ in range(concurrency)]
    errors = [0] * concurrency

    def worker(w: int) -> None:
        conn = http.client.HTTPConnection(host, timeout=10)
        i = w
        while True:
            if deadline is not None:
                if time.monotonic() >= deadline:
                    break
            elif i >= total_requests:
                break
            body = payloads[i % len(payloads)]
            t0 = time.perf_counter()
            try:
                conn.request("POST", "/v1/retrieve", body=body,
                             headers={"Content-Type": "application/json"})
                resp = conn.getresponse()
                resp.read()
                ok = resp.status == 200
            except (http.client.HTTPException, ConnectionError, OSError):
                conn.close()
                conn = http.client.HTTPConnection(host, timeout=10)
                ok = False
            took = (time.perf_counter() - t0) * 1e3
            if ok:
                latencies[w].append(took)
            else:
                errors[w] += 1
            i += concurrency
        conn.close()

    threads = [threading.Thread(target=worker, args=(w,), daemon=True)
               for w in range(concurrency)]
    t_start = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t_start

    merged = sorted(ms for per in latencies for ms in per)
    n_ok = len(merged)
    n_err = sum(errors)
    if n_ok == 0:
        raise RuntimeError(f"bench completed with zero successes ({n_err} errors)")
    return BenchReport(
        requests=n_ok + n_err,
        errors=n_err,
        duration_s=elapsed,
        concurrency=concurrency,
        qps=(n_ok + n_err) / max(elapsed, 1e-9),
        p50_ms=_bench_percentile(merged, 50.0),
        p99_ms=_bench_percentile(merged, 99.0),
    )


# ---------------------------------------------------------------------------
# Embedding export


def export_item_embeddings(path: str, ids: Sequence[str],
                           vectors: np.ndarray) -> None:
    """Write one TSV row per item: id then the vector at 6 significant digits."""
    if len(ids) != vectors.shape[0]:
        raise ValueError(
            f"{len(ids)} ids for {vectors.shape[0]} vector rows")
    with open(path, "w", encoding="utf-8") as f:
        for item_id, row in zip(ids, vectors):
            floats = "\t".join(TSV_FLOAT_FORMAT % x for x in row)
            f.write(f"{item_id}\t{floats}\n")


def export_query_embeddings(path: str,
                            queries: Sequence[tuple[str, Sequence[int]]],
                            q_params: QueryTowerParams) -> None:
    """Write one TSV row per (query, head): name, head index, vector."""
    with open(path, "w", encoding="utf-8") as f:
        for name, ids in queries:
            heads = query_forward(q_params, ids)
            for h in range(heads.shape[0]):
                floats = "\t".join(TSV_FLOAT_FORMAT % x for x in heads[h])
                f.write(f"{name}\t{h}\t{floats}\n")


def read_embedding_tsv(path: str, with_head: bool = False
                       ) -> tuple[list[str], np.ndarray | None, np.ndarray]:
    """Reload an exported TSV.

    Args:
        path: File written by one of the export functions.
        with_head: True for query exports (id, head, floats rows).

    Returns:
        (names, head indices or None, float64 matrix).
    """
    names: list[str] = []
    heads: list[int] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            parts = line.rstrip("\n").split("\t")
            skip = 2 if with_head else 1
            if len(parts) <= skip:
                raise ValueError(f"{path}:{line_no + 1}: too few columns")
            names.append(parts[0])
            if with_head:
                heads.append(int(parts[1]))
            rows.append([float(x) for x in parts[skip:]])
    matrix = np.asarray(rows, dtype=np.float64)
    return names, (np.asarray(heads) if with_head else None), matrix


# ---------------------------------------------------------------------------
# Report container


@dataclass
class MetricReport:
    """Bundle of offline metrics; fields left None were not computed."""

    top1: float | None = None
    top10: float | None = None
    auc: float | None = None
    mean_popularity: float | None = None
    p50_ms: float | None = None
    p99_ms: float | None = None
    qps: float | None = None

    FIELDS = ("top1", "top10", "auc", "mean_popularity", "p50_ms", "p99_ms", "qps")

    def __post_init__(self) -> None:
        for name in ("top1", "top10", "auc"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.FIELDS},
                          sort_keys=True)

    @classmethod
    def tsv_header(cls) -> str:
        return "\t".join(cls.FIELDS)

    def to_tsv_line(self) -> str:
        cells = []
        for name in self.FIELDS:
            value = getattr(self, name)
            cells.append("NA" if value is None else TSV_FLOAT_FORMAT % value)
        return "\t".join(cells)
