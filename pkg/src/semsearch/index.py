"""Approximate nearest-neighbor index over unit-norm item embeddings.

Large corpora get a layered proximity graph searched by beam expansion;
small corpora (below ``exact_threshold``) skip the graph and use an exact
scan, which is bit-identical to the brute-force oracle including tie order.
Results rank by inner product descending with ascending item id breaking
ties, so equal-score items always come back in the same order.

The on-disk format is a magic/version header, a JSON descriptor, then raw
little-endian blocks.  Builds are deterministic: levels come from a seeded
generator and insertion is sequential, so the serialized index is a pure
function of (vectors, ids, params).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import graph_kernels

INDEX_MAGIC = b"SSIX"
INDEX_VERSION = 1

UNIT_NORM_TOL = 1e-5


class IndexFormatError(ValueError):
    """Raised when index bytes do not match the expected layout."""


class SearchHit(NamedTuple):
    item_id: str
    score: float


@dataclass
class IndexParams:
    """Graph construction and search knobs.

    Attributes:
        degree: Max neighbors per node on upper layers; layer 0 keeps twice
            as many.
        build_beam: Beam width while inserting nodes.
        search_beam: Extra beam width at query time on top of ``k``; the
            effective beam is ``k + search_beam``.
        exact_threshold: Corpora smaller than this skip the graph and scan
            exactly.
        seed: Seed for the level assignment.
    """

    degree: int = 32
    build_beam: int = 200
    search_beam: int = 400
    exact_threshold: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.degree < 2:
            raise ValueError(f"degree must be >= 2, got {self.degree}")
        if self.build_beam < 1:
            raise ValueError(f"build_beam must be >= 1, got {self.build_beam}")
        if self.search_beam < 0:
            raise ValueError(f"search_beam must be >= 0, got {self.search_beam}")
        if self.exact_threshold < 0:
            raise ValueError(f"exact_threshold must be >= 0, got {self.exact_threshold}")

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "build_beam": self.build_beam,
            "search_beam": self.search_beam,
            "exact_threshold": self.exact_threshold,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexParams":
        return cls(
            degree=int(d["degree"]),
            build_beam=int(d["build_beam"]),
            search_beam=int(d["search_beam"]),
            exact_threshold=int(d["exact_threshold"]),
            seed=int(d["seed"]),
        )


@dataclass
class EmbeddingIndex:
    """An immutable searchable index over item embeddings."""

    ids: list[str]
    vectors: np.ndarray              # (n, dim) float32, unit rows
    params: IndexParams
    mode: str                        # "flat" or "graph"
    levels: np.ndarray | None = None
    offsets: np.ndarray | None = None
    neighbors: np.ndarray | None = None
    counts: np.ndarray | None = None
    entry: int = graph_kernels.NO_NODE
    max_level: int = -1

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def search(self, query: np.ndarray, k: int) -> list[SearchHit]:
        return search(self, query, k)


def _validate_items(ids: Sequence[str], vectors: np.ndarray) -> np.ndarray:
    if len(ids) == 0:
        raise ValueError("cannot build an index over zero items")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError(
            f"vectors must be (n_items, dim), got {vectors.shape} for {len(ids)} ids"
        )
    seen: set[str] = set()
    for item_id in ids:
        if not item_id:
            raise ValueError("empty item id")
        if "\t" in item_id or "\n" in item_id or "\r" in item_id:
            raise ValueError(f"item id contains tab or newline: {item_id!r}")
        if item_id in seen:
            raise ValueError(f"duplicate item id: {item_id!r}")
        seen.add(item_id)
    out = np.ascontiguousarray(vectors, dtype=np.float32)
    if not np.isfinite(out).all():
        raise ValueError("vectors contain non-finite values")
    norms = np.linalg.norm(out.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"vector for item {ids[i]!r} is not unit norm (|v| = {norms[i]:.6f})"
        )
    return out


def _assign_levels(n: int, degree: int, seed: int) -> np.ndarray:
    """Geometric level draw with mean 1/ln(degree), capped for safety."""
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    scale = 1.0 / np.log(degree)
    levels = np.floor(-np.log1p(-u) * scale).astype(np.int32)
    return np.minimum(levels, 60)


def build_index(
    ids: Sequence[str],
    vectors: np.ndarray,
    params: IndexParams | None = None,
    progress=None,
    progress_every: int = 100_000,
) -> EmbeddingIndex:
    """Build a searchable index over unit-norm vectors.

    Corpora smaller than ``params.exact_threshold`` stay flat (exact scan);
    larger ones get the proximity graph.

    Args:
        ids: Unique, non-empty item ids aligned with ``vectors`` rows.
        vectors: (n, dim) array of unit-norm embeddings; any float dtype.
        params: Construction knobs; defaults used when omitted.
        progress: Optional callback ``(n_inserted, n_total)``.
        progress_every: Insertions between callbacks.

    Returns:
        The built index.

    Raises:
        ValueError: Empty input, duplicate or malformed ids, shape mismatch,
            or vectors that are not unit norm.
    """
    params = params or IndexParams()
    mat = _validate_items(ids, vectors)
    n = mat.shape[0]
    if n < params.exact_threshold:
        return EmbeddingIndex(list(ids), mat, params, mode="flat")

    levels = _assign_levels(n, params.degree, params.seed)
    row_counts = levels.astype(np.int64) + 1
    offsets = np.zeros(n, dtype=np.int64)
    np.cumsum(row_counts[:-1], out=offsets[1:])
    total_rows = int(row_counts.sum())
    row_cap = 2 * params.degree
    neighbors = np.full((total_rows, row_cap), graph_kernels.NO_NODE, dtype=np.int32)
    counts = np.zeros(total_rows, dtype=np.int32)
    visited = np.zeros(n, dtype=np.int64)

    entry = graph_kernels.NO_NODE
    max_level = -1
    stamp = 0
    chunk = max(1, min(progress_every, 50_000))
    done = 0
    while done < n:
        stop = min(done + chunk, n)
        entry, max_level, stamp = graph_kernels.build_range(
            mat, levels, offsets, neighbors, counts,
            done, stop, entry, max_level, params.build_beam, params.degree,
            visited, stamp,
        )
        done = stop
        if progress is not None and (done % progress_every == 0 or done == n):
            progress(done, n)

    return EmbeddingIndex(
        list(ids), mat, params, mode="graph",
        levels=levels, offsets=offsets, neighbors=neighbors, counts=counts,
        entry=int(entry), max_level=int(max_level),
    )


def _rank_candidates(
    ids: Sequence[str], cand: np.ndarray, cand_scores: np.ndarray, k: int
) -> list[SearchHit]:
    """Order candidate rows by score desc, id asc; cut to k."""
    pairs = sorted(
        zip(cand.tolist(), cand_scores.tolist()), key=lambda p: (-p[1], ids[p[0]])
    )[:k]
    return [SearchHit(ids[i], float(score)) for i, score in pairs]


def brute_force_search(
    ids: Sequence[str], vectors: np.ndarray, query: np.ndarray, k: int
) -> list[SearchHit]:
    """Exact oracle: score every item and fully sort.

    Scores are float32 inner products, ranked descending with ascending id
    tie-break.  Item ids are unique, so that key is a total order and any
    sort implementation yields the same ranking as index searches.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    mat = np.ascontiguousarray(vectors, dtype=np.float32)
    q = np.ascontiguousarray(np.asarray(query).reshape(-1), dtype=np.float32)
    if q.shape[0] != mat.shape[1]:
        raise ValueError(f"query dim {q.shape[0]} != index dim {mat.shape[1]}")
    scores = mat @ q
    order = np.lexsort((np.asarray(ids), -scores))[:k]
    return [SearchHit(ids[i], float(scores[i])) for i in order]


def search(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[SearchHit]:
    """Top-k inner-product search.

    Flat indexes (and any query with k >= corpus size) scan exactly; graph
    indexes beam-search with width ``k + search_beam`` and re-rank the
    candidates with the same float32 scoring as the exact path.

    Args:
        index: A built or loaded index.
        query: (dim,) query vector; any float dtype.
        k: Number of hits wanted, >= 1.

    Returns:
        Up to k hits, score descending, ascending id on ties.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.ascontiguousarray(np.asarray(query).reshape(-1), dtype=np.float32)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if not np.isfinite(q).all():
        raise ValueError("query contains non-finite values")

    if index.mode == "flat" or k >= index.count:
        scores = index.vectors @ q
        if k >= index.count:
            cand = np.arange(index.count)
        else:
            part = np.argpartition(-scores, k - 1)[:k]
            threshold = scores[part].min()
            cand = np.flatnonzero(scores >= threshold)
        return _rank_candidates(index.ids, cand, scores[cand], k)

    ef = k + index.params.search_beam
    out_nodes = np.empty(ef, dtype=np.int32)
    out_dists = np.empty(ef, dtype=np.float64)
    n_found = graph_kernels.graph_search(
        index.vectors, index.levels, index.offsets, index.neighbors, index.counts,
        index.entry, index.max_level, q, ef, out_nodes, out_dists,
    )
    cand = out_nodes[:n_found].astype(np.int64)
    cand_scores = index.vectors[cand] @ q
    return _rank_candidates(index.ids, cand, cand_scores, k)


def save_index(index: EmbeddingIndex, path: str) -> None:
    """Serialize to the magic/version/JSON-header/raw-blocks layout."""
    ids_blob = "\n".join(index.ids).encode("utf-8")
    blocks: list[tuple[str, bytes]] = [
        ("ids", ids_blob),
        ("vectors", np.ascontiguousarray(index.vectors, dtype="<f4").tobytes()),
    ]
    if index.mode == "graph":
        blocks.extend([
            ("levels", np.ascontiguousarray(index.levels, dtype="<i4").tobytes()),
            ("offsets", np.ascontiguousarray(index.offsets, dtype="<i8").tobytes()),
            ("neighbors", np.ascontiguousarray(index.neighbors, dtype="<i4").tobytes()),
            ("counts", np.ascontiguousarray(index.counts, dtype="<i4").tobytes()),
        ])
    header = {
        "mode": index.mode,
        "dim": index.dim,
        "count": index.count,
        "params": index.params.to_dict(),
        "entry": index.entry,
        "max_level": index.max_level,
        "row_cap": 0 if index.neighbors is None else int(index.neighbors.shape[1]),
        "blocks": [{"name": name, "bytes": len(blob)} for name, blob in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<II", INDEX_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    for _, blob in blocks:
        buf.write(blob)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_index(path: str) -> EmbeddingIndex:
    """Read an index written by :func:`save_index`.

    Raises:
        IndexFormatError: Bad magic, unsupported version, truncation, or
            inconsistent block sizes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: not an index file (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != INDEX_VERSION:
        raise IndexFormatError(
            f"{path}: index version {version} unsupported, expected {INDEX_VERSION}"
        )
    if len(blob) < 12 + header_len:
        raise IndexFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        mode = header["mode"]
        dim = int(header["dim"])
        count = int(header["count"])
        params = IndexParams.from_dict(header["params"])
        block_specs = header["blocks"]
    except (ValueError, KeyError, TypeError) as exc:
        raise IndexFormatError(f"{path}: malformed header: {exc}") from exc
    if mode not in ("flat", "graph"):
        raise IndexFormatError(f"{path}: unknown mode {mode!r}")

    offset = 12 + header_len
    raw: dict[str, bytes] = {}
    for spec in block_specs:
        nbytes = int(spec["bytes"])
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise IndexFormatError(f"{path}: truncated block {spec['name']!r}")
        raw[spec["name"]] = chunk
        offset += nbytes
    if offset != len(blob):
        raise IndexFormatError(f"{path}: {len(blob) - offset} trailing bytes")

    try:
        ids = raw["ids"].decode("utf-8").split("\n") if raw["ids"] else []
        vectors = np.frombuffer(raw["vectors"], dtype="<f4").reshape(count, dim).copy()
    except (KeyError, ValueError) as exc:
        raise IndexFormatError(f"{path}: bad core blocks: {exc}") from exc
    if len(ids) != count:
        raise IndexFormatError(f"{path}: id count {len(ids)} != declared {count}")

    if mode == "flat":
        return EmbeddingIndex(ids, vectors, params, mode="flat")

    try:
        row_cap = int(header["row_cap"])
        levels = np.frombuffer(raw["levels"], dtype="<i4").copy()
        offsets_arr = np.frombuffer(raw["offsets"], dtype="<i8").copy()
        counts = np.frombuffer(raw["counts"], dtype="<i4").copy()
        total_rows = counts.shape[0]
        neighbors = (
            np.frombuffer(raw["neighbors"], dtype="<i4").reshape(total_rows, row_cap).copy()
        )
    except (KeyError, ValueError) as exc:
        raise IndexFormatError(f"{path}: bad graph blocks: {exc}") from exc
    if levels.shape[0] != count or offsets_arr.shape[0] != count:
        raise IndexFormatError(f"{path}: graph arrays do not match item count")
    entry = int(header["entry"])
    max_level = int(header["max_level"])
    if not 0 <= entry < count:
        raise IndexFormatError(f"{path}: entry point {entry} out of range")
    return EmbeddingIndex(
        ids, vectors, params, mode="graph",
        levels=levels, offsets=offsets_arr, neighbors=neighbors, counts=counts,
        entry=entry, max_level=max_level,
    )
