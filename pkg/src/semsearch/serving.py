"""One-servable retrieval and shard routing.

The servable fuses the query tower and the item index inside one process, so
a query embedding reaches the index through memory rather than a network hop.
An HTTP front end exposes retrieval plus health and stats endpoints, and a
separate proxy routes requests across model shards with periodic health
checks, strike-based ejection, and strict round-robin over healthy backends.

Request handlers treat servable state as immutable, so any number of threads
may serve concurrently and replaying a request stream in any order yields
identical per-request responses.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import NamedTuple, Sequence

import numpy as np

from .index import EmbeddingIndex, load_index, search
from .manifest import sha256_file
from .tokenizer import UNK_ID, Vocabulary, encode
from .towers import QueryTowerParams, TowerConfig, load_checkpoint, query_forward

logger = logging.getLogger("semsearch.serving")

DEFAULT_K = 10
DEFAULT_FANOUT = 1.0
MAX_IN_FLIGHT = 1024
DRAIN_SECONDS = 5.0
HEALTH_CHECK_INTERVAL = 2.0
EJECTION_STRIKES = 3
BACKEND_TIMEOUT = 1.0
EMPTY_QUERY_WARNING = "query has no known tokens"


class ServableLoadError(ValueError):
    """Artifacts passed to load_servable are missing or mutually inconsistent."""


class RetrievedHit(NamedTuple):
    item_id: str
    score: float
    head: int


@dataclass
class RetrievalResponse:
    hits: list[RetrievedHit]
    warning: str | None = None
    took_ms: float = 0.0


@dataclass
class Servable:
    """Immutable query-tower + index pair answering retrieval requests."""

    model_name: str
    vocab: Vocabulary
    config: TowerConfig
    query_params: QueryTowerParams
    index: EmbeddingIndex
    default_k: int = DEFAULT_K
    fanout: float = DEFAULT_FANOUT


def load_servable(
    checkpoint_path: str,
    index_path: str,
    vocab_path: str,
    model_name: str = "default",
    default_k: int = DEFAULT_K,
    fanout: float = DEFAULT_FANOUT,
) -> Servable:
    """Load and cross-check the three artifacts behind one servable.

    Args:
        checkpoint_path: Tower checkpoint produced by training.
        index_path: Serialized embedding index.
        vocab_path: Vocabulary TSV the model was trained against.
        model_name: Name this servable answers to on the wire.
        default_k: Hit count used when a request does not send k.
        fanout: Per-head fetch multiplier; each head fetches ceil(k * fanout).

    Returns:
        A ready servable.

    Raises:
        ServableLoadError: Tower output dim differs from index dim, the
            vocabulary hash recorded at training time does not match the
            loaded vocabulary file, or sizes disagree.
    """
    if default_k < 1:
        raise ValueError(f"default_k must be >= 1, got {default_k}")
    if fanout <= 0:
        raise ValueError(f"fanout must be > 0, got {fanout}")
    config, q_params, _, meta = load_checkpoint(checkpoint_path)
    index = load_index(index_path)
    if config.dim != index.dim:
        raise ServableLoadError(
            f"query tower emits dim {config.dim} but index holds dim {index.dim}"
        )
    vocab_digest = sha256_file(vocab_path)
    recorded = meta.get("vocab_sha256")
    if recorded is None:
        raise ServableLoadError(
            "checkpoint records no vocabulary hash; cannot establish that "
            "training and serving tokenize identically"
        )
    if recorded != vocab_digest:
        raise ServableLoadError(
            f"vocabulary file hash {vocab_digest[:12]}... does not match "
            f"{recorded[:12]}... recorded in the checkpoint"
        )
    vocab = Vocabulary.load(vocab_path)
    if config.vocab_size != vocab.size:
        raise ServableLoadError(
            f"checkpoint was trained over {config.vocab_size} tokens but the "
            f"vocabulary holds {vocab.size}"
        )
    return Servable(model_name, vocab, config, q_params, index,
                    default_k=default_k, fanout=fanout)


def retrieve(
    servable: Servable,
    query_text: str,
    user_features: Sequence[int] = (),
    k: int | None = None,
    fanout: float | None = None,
) -> RetrievalResponse:
    """Encode a query, search the index with every head, and merge.

    Each head fetches ceil(k * fanout) items; the union is deduplicated by
    item id keeping the maximum per-head inner product and the head that
    produced it (lowest head index on an exact tie).  Hits sort by score
    descending, item id ascending, and are cut to k.

    Args:
        servable: Loaded servable.
        query_text: Raw query text; tokenized with the shared tokenizer.
        user_features: Optional vocabulary ids appended to the query ids,
            mirroring how personalized training examples are built.
        k: Hit count; servable default when omitted.
        fanout: Per-head fetch multiplier; servable default when omitted.

    Returns:
        Response with up to k hits.  A query with no known tokens yields
        empty hits and a warning rather than a fault.

    Raises:
        ValueError: k < 1, fanout <= 0, or user feature ids out of range.
    """
    t0 = time.perf_counter()
    if k is None:
        k = servable.default_k
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if fanout is None:
        fanout = servable.fanout
    if fanout <= 0:
        raise ValueError(f"fanout must be > 0, got {fanout}")
    for f in user_features:
        if not (0 <= int(f) < servable.vocab.size):
            raise ValueError(
                f"user feature id {f} outside vocabulary of size {servable.vocab.size}"
            )

    ids = encode(servable.vocab, query_text)
    if ids == [UNK_ID]:
        took = (time.perf_counter() - t0) * 1e3
        return RetrievalResponse([], warning=EMPTY_QUERY_WARNING, took_ms=took)

    heads = query_forward(servable.query_params, ids, tuple(int(f) for f in user_features))
    per_head = math.ceil(k * fanout)
    merged: dict[str, tuple[float, int]] = {}
    for h in range(heads.shape[0]):
        for hit in search(servable.index, heads[h], per_head):
            cur = merged.get(hit.item_id)
            if cur is None or hit.score > cur[0]:
                merged[hit.item_id] = (hit.score, h)
    ordered = sorted(merged.items(), key=lambda kv: (-kv[1][0], kv[0]))[:k]
    hits = [RetrievedHit(item_id, score, head) for item_id, (score, head) in ordered]
    took = (time.perf_counter() - t0) * 1e3
    return RetrievalResponse(hits, took_ms=took)


# ---------------------------------------------------------------------------
# HTTP front end


class ServerStats:
    """Thread-safe request counters and latency percentiles."""

    def __init__(self, window: int = 10_000) -> None:
        self._lock = threading.Lock()
        self._latencies: deque[float] = deque(maxlen=window)
        self.requests = 0
        self.errors = 0
        self.started_at = time.time()

    def record(self, took_ms: float, error: bool = False) -> None:
        with self._lock:
            self.requests += 1
            if error:
                self.errors += 1
            else:
                self._latencies.append(took_ms)

    def snapshot(self) -> dict:
        with self._lock:
            lat = sorted(self._latencies)
            requests = self.requests
            errors = self.errors
        elapsed = max(time.time() - self.started_at, 1e-9)
        snap = {
            "requests": requests,
            "errors": errors,
            "qps": requests / elapsed,
            "p50_ms": _percentile(lat, 50.0),
            "p99_ms": _percentile(lat, 99.0),
        }
        return snap


def _percentile(sorted_vals: list[float], pct: float) -> float | None:
    if not sorted_vals:
        return None
    rank = max(0, min(len(sorted_vals) - 1, math.ceil(pct / 100 * len(sorted_vals)) - 1))
    return sorted_vals[rank]


def _json_bytes(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def response_payload(resp: RetrievalResponse, debug: bool = False) -> dict:
    """Wire shape of a retrieval response.

    Timings are included only under the request's debug flag so that replays
    of identical requests produce byte-identical bodies.
    """
    payload: dict = {
        "hits": [
            {"head": h.head, "item_id": h.item_id, "score": h.score}
            for h in resp.hits
        ]
    }
    if resp.warning is not None:
        payload["warning"] = resp.warning
    if debug:
        payload["took_ms"] = resp.took_ms
    return payload


class RetrievalServer(ThreadingHTTPServer):
    """Threaded HTTP server owning one servable."""

    daemon_threads = True

    def __init__(self, address: tuple[str, int], servable: Servable,
                 max_in_flight: int = MAX_IN_FLIGHT) -> None:
        super().__init__(address, _RetrievalHandler)
        self.servable = servable
        self.stats = ServerStats()
        self.capacity = threading.Semaphore(max_in_flight)
        self._in_flight = 0
        self._in_flight_lock = threading.Lock()

    def track(self, delta: int) -> None:
        with self._in_flight_lock:
            self._in_flight += delta

    @property
    def in_flight(self) -> int:
        with self._in_flight_lock:
            return self._in_flight

    def drain(self, timeout: float = DRAIN_SECONDS) -> bool:
        """Stop accepting and wait for in-flight requests; True when drained."""
        self.shutdown()
        deadline = time.monotonic() + timeout
        while self.in_flight > 0 and time.monotonic() < deadline:
            time.sleep(0.01)
        drained = self.in_flight == 0
        self.server_close()
        return drained


class _RetrievalHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Headers and body go out as separate writes; without TCP_NODELAY the
    # second write stalls on the peer's delayed ACK (~40ms per response).
    disable_nagle_algorithm = True
    server: RetrievalServer

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, code: int, obj: dict, extra: dict | None = None) -> None:
        body = _json_bytes(obj)
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for name, value in (extra or {}).items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/healthz":
            self._send_json(200, {"status": "ok"})
        elif self.path == "/stats":
            self._send_json(200, self.server.stats.snapshot())
        else:
            self._send_json(404, {"error": f"no such path: {self.path}"})

    def do_POST(self) -> None:
        if self.path != "/v1/retrieve":
            self._send_json(404, {"error": f"no such path: {self.path}"})
            return
        if not self.server.capacity.acquire(blocking=False):
            self._send_json(503, {"error": "server overloaded"})
            return
        self.server.track(1)
        t0 = time.perf_counter()
        try:
            status, payload = self._handle_retrieve()
            self._send_json(status, payload)
            took = (time.perf_counter() - t0) * 1e3
            self.server.stats.record(took, error=status >= 500)
        finally:
            self.server.track(-1)
            self.server.capacity.release()

    def _handle_retrieve(self) -> tuple[int, dict]:
        try:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b""
            req = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as err:
            return 400, {"error": f"malformed JSON body: {err}"}
        if not isinstance(req, dict):
            return 400, {"error": "request body must be a JSON object"}

        servable = self.server.servable
        model = req.get("model")
        if model is not None and model != servable.model_name:
            return 404, {"error": f"unknown model: {model!r}"}
        query = req.get("query")
        if not isinstance(query, str):
            return 400, {"error": "field 'query' must be a string"}
        k = req.get("k", None)
        if k is not None and (isinstance(k, bool) or not isinstance(k, int) or k < 1):
            return 400, {"error": "field 'k' must be an integer >= 1"}
        feats = req.get("user_features", [])
        if not isinstance(feats, list) or any(
            isinstance(f, bool) or not isinstance(f, int) for f in feats
        ):
            return 400, {"error": "field 'user_features' must be a list of integers"}
        debug = req.get("debug", False)
        if not isinstance(debug, bool):
            return 400, {"error": "field 'debug' must be a boolean"}

        try:
            resp = retrieve(servable, query, feats, k=k)
        except ValueError as err:
            return 400, {"error": str(err)}
        except Exception:
            logger.exception("retrieval failed")
            return 500, {"error": "internal retrieval failure"}
        return 200, response_payload(resp, debug=debug)


def start_server(servable: Servable, host: str = "127.0.0.1",
                 port: int = 0) -> RetrievalServer:
    """Bind a retrieval server and run it on a background thread.

    Returns the server; its bound port is ``server.server_address[1]``.
    Call ``server.drain()`` to stop.
    """
    server = RetrievalServer((host, port), servable)
    thread = threading.Thread(target=server.serve_forever, daemon=True,
                              name="retrieval-server")
    thread.start()
    return server


def run_server(servable: Servable, host: str, port: int) -> None:
    """Serve until interrupted, then drain in-flight requests."""
    server = RetrievalServer((host, port), servable)
    logger.info("serving model %r on %s:%d", servable.model_name,
                host, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("draining in-flight requests")
    finally:
        threading.Thread(target=server.shutdown, daemon=True).start()
        deadline = time.monotonic() + DRAIN_SECONDS
        while server.in_flight > 0 and time.monotonic() < deadline:
            time.sleep(0.01)
        server.server_close()


# ---------------------------------------------------------------------------
# Shard-routing proxy


@dataclass
class BackendState:
    url: str
    healthy: bool = True
    strikes: int = 0
    routed: int = 0


class ShardTable:
    """Model name -> backend list with health state and strict round-robin.

    A single health-check agent mutates state; readers take the lock only to
    snapshot, so they always observe a consistent view.
    """

    def __init__(self, routes: dict[str, list[str]]) -> None:
        if not routes:
            raise ValueError("proxy routing table is empty")
        self._lock = threading.Lock()
        self._backends: dict[str, list[BackendState]] = {}
        self._rr: dict[str, int] = {}
        for model, urls in routes.items():
            if not urls:
                raise ValueError(f"model {model!r} has no backends")
            self._backends[model] = [BackendState(url.rstrip("/")) for url in urls]
            self._rr[model] = 0

    @property
    def models(self) -> list[str]:
        return list(self._backends)

    def all_backends(self) -> list[BackendState]:
        with self._lock:
            return [b for backends in self._backends.values() for b in backends]

    def has_model(self, model: str) -> bool:
        return model in self._backends

    def next_backend(self, model: str) -> BackendState | None:
        """Next healthy backend under strict round-robin; None when all down."""
        with self._lock:
            backends = self._backends.get(model)
            if backends is None:
                return None
            healthy = [b for b in backends if b.healthy]
            if not healthy:
                return None
            chosen = healthy[self._rr[model] % len(healthy)]
            self._rr[model] += 1
            chosen.routed += 1
            return chosen

    def strike(self, backend: BackendState) -> None:
        """Count a failure; eject after EJECTION_STRIKES consecutive ones."""
        with self._lock:
            backend.strikes += 1
            if backend.strikes >= EJECTION_STRIKES and backend.healthy:
                backend.healthy = False
                logger.warning("ejecting backend %s after %d strikes",
                               backend.url, backend.strikes)

    def mark_alive(self, backend: BackendState) -> None:
        with self._lock:
            if not backend.healthy:
                logger.info("backend %s recovered", backend.url)
            backend.strikes = 0
            backend.healthy = True

    def snapshot(self) -> dict:
        with self._lock:
            return {
                model: [
                    {"url": b.url, "healthy": b.healthy,
                     "strikes": b.strikes, "routed": b.routed}
                    for b in backends
                ]
                for model, backends in self._backends.items()
            }


def check_backend_health(backend: BackendState, timeout: float = 1.0) -> bool:
    try:
        with urllib.request.urlopen(backend.url + "/healthz", timeout=timeout) as r:
            return r.status == 200
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError):
        return False


class ProxyServer(ThreadingHTTPServer):
    """Reverse proxy routing retrieval requests to model shards."""

    daemon_threads = True

    def __init__(self, address: tuple[str, int], table: ShardTable,
                 backend_timeout: float = BACKEND_TIMEOUT,
                 health_interval: float = HEALTH_CHECK_INTERVAL) -> None:
        super().__init__(address, _ProxyHandler)
        self.table = table
        self.backend_timeout = backend_timeout
        self.health_interval = health_interval
        self._stop = threading.Event()
        self._health_thread = threading.Thread(
            target=self._health_loop, daemon=True, name="proxy-health")

    def start_health_checks(self) -> None:
        self._health_thread.start()

    def _health_loop(self) -> None:
        while not self._stop.wait(self.health_interval):
            for backend in self.table.all_backends():
                if check_backend_health(backend):
                    self.table.mark_alive(backend)
                else:
                    self.table.strike(backend)

    def close(self) -> None:
        self._stop.set()
        self.shutdown()
        self.server_close()
        if self._health_thread.is_alive():
            self._health_thread.join(timeout=2.0)


class _ProxyHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Same delayed-ACK hazard as the retrieval handler.
    disable_nagle_algorithm = True
    server: ProxyServer

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_raw(self, code: int, body: bytes,
                  content_type: str = "application/json",
                  extra: dict | None = None) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for name, value in (extra or {}).items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, obj: dict, extra: dict | None = None) -> None:
        self._send_raw(code, _json_bytes(obj), extra=extra)

    def do_GET(self) -> None:
        if self.path == "/healthz":
            self._send_json(200, {"status": "ok"})
        elif self.path == "/stats":
            self._send_json(200, self.server.table.snapshot())
        else:
            self._send_json(404, {"error": f"no such path: {self.path}"})

    def do_POST(self) -> None:
        if self.path != "/v1/retrieve":
            self._send_json(404, {"error": f"no such path: {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b""
            req = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as err:
            self._send_json(400, {"error": f"malformed JSON body: {err}"})
            return
        model = req.get("model") if isinstance(req, dict) else None
        if not isinstance(model, str):
            self._send_json(400, {"error": "field 'model' must be a string"})
            return
        if not self.server.table.has_model(model):
            self._send_json(404, {"error": f"unknown model: {model!r}"})
            return
        self._forward(model, raw)

    def _forward(self, model: str, raw: bytes) -> None:
        table = self.server.table
        attempts = len(table.all_backends())
        timed_out = False
        for _ in range(attempts):
            backend = table.next_backend(model)
            if backend is None:
                break
            request = urllib.request.Request(
                backend.url + "/v1/retrieve", data=raw,
                headers={"Content-Type": "application/json"}, method="POST")
            try:
                with urllib.request.urlopen(
                        request, timeout=self.server.backend_timeout) as resp:
                    body = resp.read()
                    self._send_raw(resp.status, body,
                                   extra={"X-Routed-To": backend.url})
                    return
            except urllib.error.HTTPError as err:
                # The backend answered; relay its error untouched, no strike.
                body = err.read()
                self._send_raw(err.code, body, extra={"X-Routed-To": backend.url})
                return
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as err:
                reason = getattr(err, "reason", err)
                timed_out = isinstance(err, TimeoutError) or isinstance(
                    reason, (socket.timeout, TimeoutError))
                logger.warning("backend %s failed: %s", backend.url, err)
                table.strike(backend)
        if timed_out:
            self._send_json(504, {"error": f"backend timeout for model {model!r}"})
        else:
            self._send_json(503, {"error": f"no healthy backend for model {model!r}"})


def load_routes(path: str) -> dict[str, list[str]]:
    """Read a proxy config file: JSON object model name -> backend URL list."""
    with open(path, encoding="utf-8") as f:
        routes = json.load(f)
    if not isinstance(routes, dict) or not all(
        isinstance(m, str) and isinstance(urls, list) and
        all(isinstance(u, str) for u in urls)
        for m, urls in routes.items()
    ):
        raise ValueError("proxy config must map model names to URL lists")
    return routes


def start_proxy(routes: dict[str, list[str]], host: str = "127.0.0.1",
                port: int = 0,
                backend_timeout: float = BACKEND_TIMEOUT,
                health_interval: float = HEALTH_CHECK_INTERVAL) -> ProxyServer:
    """Bind a proxy, start health checks, and run it on a background thread."""
    proxy = ProxyServer((host, port), ShardTable(routes),
                        backend_timeout=backend_timeout,
                        health_interval=health_interval)
    proxy.start_health_checks()
    thread = threading.Thread(target=proxy.serve_forever, daemon=True,
                              name="proxy-server")
    thread.start()
    return proxy


def run_proxy(routes: dict[str, list[str]], host: str, port: int,
              backend_timeout: float = BACKEND_TIMEOUT,
              health_interval: float = HEALTH_CHECK_INTERVAL) -> None:
    """Proxy until interrupted."""
    proxy = ProxyServer((host, port), ShardTable(routes),
                        backend_timeout=backend_timeout,
                        health_interval=health_interval)
    proxy.start_health_checks()
    logger.info("proxying models %s on %s:%d", proxy.table.models,
                host, proxy.server_address[1])
    try:
        proxy.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        proxy.close()
