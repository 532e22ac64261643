"""Two-tower scoring model: a multi-head query tower and a single-vector item tower.

Both towers share the same shape of computation: token embeddings are summed
into one aggregate vector, then pushed through a small MLP.  The query tower
fans the aggregate out through ``m`` head projections, one MLP per head, and
leaves the head outputs unnormalized.  The item tower produces a single
L2-normalized embedding so that inner products against it are cosine-like and
an ANN index over the outputs is well conditioned.

All arithmetic runs in float64; checkpoints store float32.  The item tower
counts how many embedding rows it computes (`item_forward_count`), which lets
training assert its reuse contract: every optimization step must embed
exactly batch_size + n_random items, no matter how many negatives are scored.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1

# Below this norm the MLP output carries no usable direction; the embedding
# falls back to a fixed unit vector and is flagged.
DEGENERATE_NORM = 1e-12


class CheckpointFormatError(ValueError):
    """Raised when checkpoint bytes do not match the expected layout."""


@dataclass
class TowerConfig:
    """Shapes shared by both towers.

    Attributes:
        vocab_size: Number of token ids including the unknown id.
        dim: Output embedding dimension of both towers.
        heads: Number of query heads m; the item tower always has one output.
        agg_dim: Width of the summed token embeddings.
        hidden: Hidden layer widths of every MLP, applied with ReLU.
    """

    vocab_size: int
    dim: int = 64
    heads: int = 1
    agg_dim: int = 64
    hidden: tuple[int, ...] = (256, 128)

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.agg_dim < 1:
            raise ValueError(f"agg_dim must be >= 1, got {self.agg_dim}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "heads": self.heads,
            "agg_dim": self.agg_dim,
            "hidden": list(self.hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TowerConfig":
        return cls(
            vocab_size=int(d["vocab_size"]),
            dim=int(d["dim"]),
            heads=int(d["heads"]),
            agg_dim=int(d["agg_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
        )


@dataclass
class MLPParams:
    """Dense layers applied as ``x @ W.T + b`` with ReLU between, linear last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class QueryTowerParams:
    token_table: np.ndarray          # (vocab_size, agg_dim)
    projections: np.ndarray          # (heads, agg_dim, agg_dim)
    head_mlps: list[MLPParams]       # one per head, agg_dim -> hidden -> dim


@dataclass
class ItemTowerParams:
    token_table: np.ndarray          # (vocab_size, agg_dim)
    mlp: MLPParams                   # agg_dim -> hidden -> dim


@dataclass
class ItemEmbedding:
    """Unit-norm item vector; ``degenerate`` marks the fixed fallback."""

    vector: np.ndarray
    degenerate: bool = False


_item_rows_embedded = 0


def reset_item_forward_count() -> None:
    """Zero the counter of item embedding rows computed."""
    global _item_rows_embedded
    _item_rows_embedded = 0


def item_forward_count() -> int:
    """Rows embedded by the item tower since the last reset."""
    return _item_rows_embedded


def _xavier(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_mlp(rng: np.random.Generator, widths: Sequence[int]) -> MLPParams:
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(_xavier(rng, (fan_out, fan_in), fan_in, fan_out))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases)


def init_params(config: TowerConfig, seed: int) -> tuple[QueryTowerParams, ItemTowerParams]:
    """Initialize both towers with Xavier-uniform weights and zero biases.

    The draw order is fixed (query table, projections, head MLPs, item
    table, item MLP) so a given seed always yields the same parameters.

    Args:
        config: Tower shapes.
        seed: Seed for the parameter RNG.

    Returns:
        Query and item tower parameters, float64.
    """
    rng = np.random.default_rng(seed)
    widths = (config.agg_dim, *config.hidden, config.dim)

    q_table = _xavier(rng, (config.vocab_size, config.agg_dim), config.vocab_size, config.agg_dim)
    projections = np.stack(
        [_xavier(rng, (config.agg_dim, config.agg_dim), config.agg_dim, config.agg_dim)
         for _ in range(config.heads)]
    )
    head_mlps = [_init_mlp(rng, widths) for _ in range(config.heads)]

    s_table = _xavier(rng, (config.vocab_size, config.agg_dim), config.vocab_size, config.agg_dim)
    s_mlp = _init_mlp(rng, widths)
    return QueryTowerParams(q_table, projections, head_mlps), ItemTowerParams(s_table, s_mlp)


def _flatten_ids(
    seqs: Sequence[Sequence[int]], vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Validate and flatten id sequences; returns (flat ids, start offsets)."""
    if len(seqs) == 0:
        raise ValueError("no token id sequences given")
    lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    if (lengths == 0).any():
        raise ValueError("token id sequence is empty")
    total = int(lengths.sum())
    flat = np.fromiter(
        (i for s in seqs for i in s), dtype=np.int64, count=total
    )
    if flat.size and (flat.min() < 0 or flat.max() >= vocab_size):
        bad = flat[(flat < 0) | (flat >= vocab_size)][0]
        raise ValueError(f"token id {bad} out of range [0, {vocab_size})")
    offsets = np.zeros(len(seqs), dtype=np.int64)
    np.cumsum(lengths[:-1], out=offsets[1:])
    return flat, offsets


def aggregate(table: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Sum the embedding rows for ``ids``.

    Args:
        table: Token embedding table, (vocab, agg_dim).
        ids: Non-empty token id sequence.

    Returns:
        The (agg_dim,) sum of rows.
    """
    flat, _ = _flatten_ids([ids], table.shape[0])
    return table[flat].sum(axis=0)


def aggregate_batch(
    table: np.ndarray, seqs: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sum embedding rows for each sequence in one gather.

    Returns:
        Tuple of aggregates (n, agg_dim), the flattened id array, and the
        per-sequence start offsets (n,), both needed to scatter gradients
        back to table rows.
    """
    flat, offsets = _flatten_ids(seqs, table.shape[0])
    gathered = table[flat]
    agg = np.add.reduceat(gathered, offsets, axis=0)
    return agg, flat, offsets


def mlp_forward(
    mlp: MLPParams, x: np.ndarray, keep_cache: bool = False
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]] | None]:
    """Run ``x`` (n, in_dim) through the MLP.

    ReLU follows every layer except the last.  With ``keep_cache`` the
    (input, preactivation) pair of each layer is returned for backprop.
    """
    cache = [] if keep_cache else None
    out = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        pre = out @ w.T + b
        if keep_cache:
            cache.append((out, pre))
        out = pre if k == last else np.maximum(pre, 0.0)
    return out, cache


@dataclass
class QueryForwardCache:
    """Intermediate values of a batched query forward, kept for backprop."""

    agg: np.ndarray                 # (n, agg_dim)
    flat_ids: np.ndarray            # all token ids concatenated
    lengths: np.ndarray             # tokens per sequence
    mlp_caches: list[list[tuple[np.ndarray, np.ndarray]]]  # per head


@dataclass
class ItemForwardCache:
    """Intermediate values of a batched item forward, kept for backprop."""

    flat_ids: np.ndarray
    lengths: np.ndarray
    mlp_cache: list[tuple[np.ndarray, np.ndarray]]
    safe_norms: np.ndarray          # norms with degenerate rows replaced by 1
    degenerate: np.ndarray          # bool mask
    vectors: np.ndarray             # normalized outputs (n, dim)


def query_forward_cached(
    params: QueryTowerParams, seqs: Sequence[Sequence[int]]
) -> tuple[np.ndarray, QueryForwardCache]:
    """Embed query sequences under every head, keeping backprop caches.

    Returns:
        Head vectors (heads, n, dim) and the forward cache.
    """
    agg, flat, offsets = aggregate_batch(params.token_table, seqs)
    lengths = np.diff(np.append(offsets, len(flat)))
    heads = []
    caches = []
    for h in range(params.projections.shape[0]):
        projected = agg @ params.projections[h].T
        out, cache = mlp_forward(params.head_mlps[h], projected, keep_cache=True)
        heads.append(out)
        caches.append(cache)
    return np.stack(heads), QueryForwardCache(agg, flat, lengths, caches)


def query_forward_batch(
    params: QueryTowerParams, seqs: Sequence[Sequence[int]]
) -> np.ndarray:
    """Embed each query sequence under every head.

    Returns:
        Head vectors of shape (heads, n, dim), unnormalized.
    """
    agg, _, _ = aggregate_batch(params.token_table, seqs)
    heads = []
    for h in range(params.projections.shape[0]):
        projected = agg @ params.projections[h].T
        out, _ = mlp_forward(params.head_mlps[h], projected)
        heads.append(out)
    return np.stack(heads)


def query_forward(
    params: QueryTowerParams,
    ids: Sequence[int],
    profile_ids: Sequence[int] = (),
) -> np.ndarray:
    """Embed one query, optionally with user profile token ids appended.

    Args:
        params: Query tower parameters.
        ids: Non-empty query token ids.
        profile_ids: Optional personalization token ids summed into the
            same aggregate.

    Returns:
        (heads, dim) array of head vectors.
    """
    combined = list(ids) + list(profile_ids)
    return query_forward_batch(params, [combined])[:, 0, :]


def item_forward_cached(
    params: ItemTowerParams, seqs: Sequence[Sequence[int]]
) -> tuple[np.ndarray, ItemForwardCache]:
    """Embed item sequences to unit-norm vectors, keeping backprop caches.

    Increments the item forward counter by the number of rows embedded.
    Degenerate rows (pre-normalization norm below 1e-12) are replaced by
    the first standard basis vector and flagged in the cache.
    """
    global _item_rows_embedded
    agg, flat, offsets = aggregate_batch(params.token_table, seqs)
    lengths = np.diff(np.append(offsets, len(flat)))
    raw, cache = mlp_forward(params.mlp, agg, keep_cache=True)
    norms = np.linalg.norm(raw, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    out = raw / safe[:, None]
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    _item_rows_embedded += len(seqs)
    return out, ItemForwardCache(flat, lengths, cache, safe, degenerate, out)


def item_forward_batch(
    params: ItemTowerParams, seqs: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Embed item sequences to unit-norm vectors.

    Increments the item forward counter by the number of rows embedded.

    Returns:
        Tuple of embeddings (n, dim) and a boolean degenerate mask (n,).
        Degenerate rows (norm below 1e-12) are replaced by the first
        standard basis vector.
    """
    vectors, cache = item_forward_cached(params, seqs)
    return vectors, cache.degenerate


def item_forward(params: ItemTowerParams, ids: Sequence[int]) -> ItemEmbedding:
    """Embed one item; see :func:`item_forward_batch`."""
    vectors, degenerate = item_forward_batch(params, [ids])
    return ItemEmbedding(vectors[0], bool(degenerate[0]))


def named_parameters(
    q: QueryTowerParams, s: ItemTowerParams
) -> dict[str, np.ndarray]:
    """Stable name -> live array mapping over every trainable tensor.

    The arrays are the actual parameter buffers, so in-place updates through
    this mapping update the towers.  The same names key checkpoints and
    optimizer state.
    """
    out: dict[str, np.ndarray] = {"q.table": q.token_table, "q.proj": q.projections}
    for h, mlp in enumerate(q.head_mlps):
        for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            out[f"q.head{h}.w{k}"] = w
            out[f"q.head{h}.b{k}"] = b
    out["s.table"] = s.token_table
    for k, (w, b) in enumerate(zip(s.mlp.weights, s.mlp.biases)):
        out[f"s.mlp.w{k}"] = w
        out[f"s.mlp.b{k}"] = b
    return out


def save_checkpoint(
    path: str,
    config: TowerConfig,
    q: QueryTowerParams,
    s: ItemTowerParams,
    meta: dict | None = None,
) -> None:
    """Write both towers to ``path``.

    Layout: magic, version, a length-prefixed JSON header holding the
    config, tensor names/shapes, and caller metadata, then each tensor as
    little-endian float32 in header order.
    """
    tensors = named_parameters(q, s)
    header = {
        "config": config.to_dict(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    for tensor in tensors.values():
        buf.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[TowerConfig, QueryTowerParams, ItemTowerParams, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Tensors come back as float64 working copies.

    Raises:
        CheckpointFormatError: On bad magic, version, truncation, or a
            tensor set that does not match the config shapes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {version} unsupported, expected {CHECKPOINT_VERSION}"
        )
    if len(blob) < 12 + header_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        config = TowerConfig.from_dict(header["config"])
        tensor_specs = header["tensors"]
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header: {exc}") from exc

    offset = 12 + header_len
    loaded: dict[str, np.ndarray] = {}
    for spec in tensor_specs:
        shape = tuple(int(d) for d in spec["shape"])
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointFormatError(f"{path}: truncated tensor {spec['name']!r}")
        loaded[spec["name"]] = (
            np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - offset} trailing bytes")

    q_fresh, s_fresh = init_params(config, seed=0)
    expected = named_parameters(q_fresh, s_fresh)
    if set(expected) != set(loaded):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise CheckpointFormatError(
            f"{path}: tensor names do not match config (missing={missing}, extra={extra})"
        )
    for name, tensor in expected.items():
        if loaded[name].shape != tensor.shape:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {loaded[name].shape}, expected {tensor.shape}"
            )
        tensor[...] = loaded[name]
    return config, q_fresh, s_fresh, meta
