"""Training for the two-tower model: scoring, loss, negatives, and the step loop.

The scoring rule is a temperature-smoothed maximum over query heads: each
head's inner product with the item embedding is weighted by a softmax over
those same inner products at temperature beta.  As beta approaches zero the
score approaches the best head's inner product; large beta averages heads.

Each step embeds the batch positives and one shared pool of random negatives
exactly once, then scores every example against every embedded item it needs
through mask arithmetic.  Per example, a mixing ratio alpha splits the
negative quota between the shared random pool and the other examples'
positives; quotas are sampled without replacement and never backfilled from
the other source when one side runs short.

Gradients are computed analytically in float64 and applied with AdaGrad.
Given a fixed seed the whole loop is bitwise reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .towers import (
    ItemTowerParams,
    QueryTowerParams,
    TowerConfig,
    init_params,
    item_forward,
    item_forward_batch,
    item_forward_cached,
    named_parameters,
    query_forward,
    query_forward_batch,
    query_forward_cached,
    save_checkpoint,
)

ADAGRAD_EPS = 1e-8


@dataclass(frozen=True)
class TrainingPair:
    """One positive example: a query and the item it should retrieve."""

    query_ids: tuple[int, ...]
    item_id: str
    item_token_ids: tuple[int, ...]

    @classmethod
    def of(cls, query_ids: Sequence[int], item_id: str, item_token_ids: Sequence[int]) -> "TrainingPair":
        return cls(tuple(query_ids), item_id, tuple(item_token_ids))


@dataclass(frozen=True)
class PoolItem:
    """An item available as a random negative."""

    item_id: str
    token_ids: tuple[int, ...]

    @classmethod
    def of(cls, item_id: str, token_ids: Sequence[int]) -> "PoolItem":
        return cls(item_id, tuple(token_ids))


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    Attributes:
        batch_size: Examples per step; must be >= 2 when alpha < 1 so batch
            negatives exist.
        n_neg: Negatives scored per example.
        n_rand: Size of the random-negative pool shared by the whole batch.
        alpha: Fraction of the negative quota drawn from the random pool
            (the rest come from other examples' positives).
        beta: Softmax temperature of the head-mixing score.
        margin: Hinge margin between positive and negative scores.
        lr: AdaGrad learning rate.
        max_steps: Optional cap on optimization steps within the single epoch.
        seed: Seed for shuffling and negative sampling.
    """

    batch_size: int = 64
    n_neg: int = 64
    n_rand: int = 64
    alpha: float = 0.5
    beta: float = 1.0
    margin: float = 0.1
    lr: float = 0.01
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha < 1.0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when alpha < 1 (batch negatives)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.margin < 0.0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.n_neg < 1:
            raise ValueError(f"n_neg must be >= 1, got {self.n_neg}")
        if self.n_rand < 1 and self.alpha > 0.0:
            raise ValueError("n_rand must be >= 1 when alpha > 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")


def attention_weights(head_scores: np.ndarray, beta: float) -> np.ndarray:
    """Softmax over head scores at temperature ``beta``, numerically stable.

    Args:
        head_scores: Inner products of each head with one item, shape (m,).
        beta: Temperature > 0.

    Returns:
        Weights summing to 1, shape (m,).
    """
    scaled = np.asarray(head_scores, dtype=np.float64) / beta
    scaled = scaled - scaled.max()
    w = np.exp(scaled)
    return w / w.sum()


def soft_dot_score(heads: np.ndarray, item_vec: np.ndarray, beta: float) -> float:
    """Score one query against one item.

    The score is the attention-weighted sum of per-head inner products,
    where the weights are a softmax over those inner products at
    temperature ``beta``.

    Args:
        heads: Query head vectors, (m, dim).
        item_vec: Unit-norm item embedding, (dim,).
        beta: Temperature > 0.

    Returns:
        Scalar relevance score.
    """
    t = heads @ item_vec
    w = attention_weights(t, beta)
    return float(w @ t)


def hinge_loss(pos_score: float, neg_scores: np.ndarray, margin: float) -> float:
    """Sum of hinge terms ``max(0, margin - pos + neg)`` over the negatives."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    return float(np.maximum(0.0, margin - pos_score + neg_scores).sum())


@dataclass
class Batch:
    """One optimization step's inputs after negative sampling.

    Items are laid out as columns: the first ``b`` columns are the batch
    positives in example order, the remaining ``n_rand`` columns are the
    shared random pool.  ``neg_mask[i, l]`` marks column ``l`` as a sampled
    negative of example ``i``.
    """

    query_seqs: list[tuple[int, ...]]
    item_seqs: list[tuple[int, ...]]
    item_ids: list[str]
    neg_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.query_seqs)


def sample_random_pool(
    pool: Sequence[PoolItem], n_rand: int, rng: np.random.Generator
) -> list[int]:
    """Draw ``n_rand`` pool indices uniformly with replacement."""
    if len(pool) == 0:
        raise ValueError("random-negative pool is empty")
    return rng.integers(0, len(pool), size=n_rand).tolist()


def _choose(cands: np.ndarray, quota: int, rng: np.random.Generator) -> np.ndarray:
    """Sample up to ``quota`` entries of ``cands`` without replacement."""
    take = min(quota, len(cands))
    if take == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(cands, size=take, replace=False)


def prepare_batch(
    pairs: Sequence[TrainingPair],
    pool: Sequence[PoolItem],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Batch:
    """Assemble one batch: shared random pool plus per-example negative masks.

    The random pool is drawn once and shared by every example.  Per example,
    ``round(alpha * n_neg)`` negatives come from the pool and the rest from
    the other examples' positives, both without replacement, both filtered
    so no negative shares the example's positive item id.  Shortfalls are
    not backfilled from the other source.
    """
    b = len(pairs)
    if b == 0:
        raise ValueError("batch is empty")
    rand_idx = sample_random_pool(pool, cfg.n_rand, rng)

    query_seqs = [p.query_ids for p in pairs]
    item_seqs = [p.item_token_ids for p in pairs]
    item_ids = [p.item_id for p in pairs]
    for j in rand_idx:
        item_seqs.append(pool[j].token_ids)
        item_ids.append(pool[j].item_id)

    n_cols = b + len(rand_idx)
    neg_mask = np.zeros((b, n_cols), dtype=bool)
    quota_rand = round(cfg.alpha * cfg.n_neg)
    quota_batch = cfg.n_neg - quota_rand
    ids_arr = np.array(item_ids)

    for i in range(b):
        own = pairs[i].item_id
        rand_cands = np.arange(b, n_cols)[ids_arr[b:] != own]
        batch_cands = np.array(
            [k for k in range(b) if k != i and item_ids[k] != own], dtype=np.int64
        )
        if len(rand_cands) == 0 and len(batch_cands) == 0:
            raise ValueError(f"example {i}: no eligible negatives in batch or pool")
        for col in _choose(rand_cands, quota_rand, rng):
            neg_mask[i, col] = True
        for col in _choose(batch_cands, quota_batch, rng):
            neg_mask[i, col] = True
    return Batch(query_seqs, item_seqs, item_ids, neg_mask)


def _score_matrix(
    heads: np.ndarray, items: np.ndarray, beta: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-head scores, head weights, and mixed scores for a batch.

    Args:
        heads: (m, b, dim) query head vectors.
        items: (L, dim) item embeddings.
        beta: Temperature.

    Returns:
        T (b, m, L) per-head inner products, W (b, m, L) softmax weights
        over the head axis, S (b, L) mixed scores.
    """
    t = np.einsum("mbd,ld->bml", heads, items)
    scaled = t / beta
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    w = np.exp(scaled)
    w /= w.sum(axis=1, keepdims=True)
    s = (w * t).sum(axis=1)
    return t, w, s


def batch_loss(
    q: QueryTowerParams, s: ItemTowerParams, batch: Batch, cfg: TrainConfig
) -> float:
    """Total hinge loss of ``batch`` under the current parameters (no grads)."""
    heads = query_forward_batch(q, batch.query_seqs)
    items, _ = item_forward_batch(s, batch.item_seqs)
    _, _, scores = _score_matrix(heads, items, cfg.beta)
    b = batch.size
    pos = scores[np.arange(b), np.arange(b)]
    margins = cfg.margin - pos[:, None] + scores
    return float(margins[batch.neg_mask & (margins > 0.0)].sum())


def naive_batch_loss(
    q: QueryTowerParams, s: ItemTowerParams, batch: Batch, cfg: TrainConfig
) -> float:
    """Reference loss: materialize every triplet and score it one at a time.

    Deliberately shares no array code with :func:`batch_loss`; used to pin
    the vectorized path.
    """
    total = 0.0
    for i in range(batch.size):
        heads = query_forward(q, batch.query_seqs[i])
        pos = soft_dot_score(heads, item_forward(s, batch.item_seqs[i]).vector, cfg.beta)
        neg_scores = []
        for col in np.flatnonzero(batch.neg_mask[i]):
            g = item_forward(s, batch.item_seqs[col]).vector
            neg_scores.append(soft_dot_score(heads, g, cfg.beta))
        total += hinge_loss(pos, np.array(neg_scores), cfg.margin)
    return total


def _mlp_backward(
    mlp, cache: list[tuple[np.ndarray, np.ndarray]], d_out: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Backprop through an MLP given the forward cache; returns input grads."""
    last = len(mlp.weights) - 1
    grads_w: list[np.ndarray] = [np.empty(0)] * (last + 1)
    grads_b: list[np.ndarray] = [np.empty(0)] * (last + 1)
    d = d_out
    for k in range(last, -1, -1):
        x_in, pre = cache[k]
        d_pre = d if k == last else d * (pre > 0.0)
        grads_w[k] = d_pre.T @ x_in
        grads_b[k] = d_pre.sum(axis=0)
        d = d_pre @ mlp.weights[k]
    return d, grads_w, grads_b


def _scatter_rows(
    table_shape: tuple[int, int],
    d_agg: np.ndarray,
    flat_ids: np.ndarray,
    lengths: np.ndarray,
) -> np.ndarray:
    """Scatter per-sequence aggregate grads back onto token table rows."""
    grad = np.zeros(table_shape)
    expanded = np.repeat(d_agg, lengths, axis=0)
    np.add.at(grad, flat_ids, expanded)
    return grad


def batch_gradients(
    q: QueryTowerParams, s: ItemTowerParams, batch: Batch, cfg: TrainConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradients for every parameter over ``batch``.

    The gradient names match :func:`semsearch.towers.named_parameters`.
    Item embeddings are computed once for the b + n_rand item columns and
    every hinge term routes through them via the mask.
    """
    b = batch.size
    m = q.projections.shape[0]

    heads, q_cache = query_forward_cached(q, batch.query_seqs)
    items, s_cache = item_forward_cached(s, batch.item_seqs)
    degenerate = s_cache.degenerate
    safe = s_cache.safe_norms

    t, w, scores = _score_matrix(heads, items, cfg.beta)
    pos = scores[np.arange(b), np.arange(b)]
    margins = cfg.margin - pos[:, None] + scores
    active = batch.neg_mask & (margins > 0.0)
    loss = float(margins[active].sum())

    # d loss / d mixed score: +1 per active negative column, minus the count
    # of active terms on the diagonal (the positive enters each hinge term
    # with opposite sign).
    r = active.astype(np.float64)
    r[np.arange(b), np.arange(b)] -= active.sum(axis=1)

    # d mixed / d per-head score: w * (1 + (t - s)/beta), the softmax product rule.
    d_t = r[:, None, :] * w * (1.0 + (t - scores[:, None, :]) / cfg.beta)

    d_heads = np.einsum("bml,ld->mbd", d_t, items)
    d_items = np.einsum("bml,mbd->ld", d_t, heads)

    grads: dict[str, np.ndarray] = {}

    # Item tower: through the normalization, the MLP, then the token table.
    inner = (d_items * items).sum(axis=1, keepdims=True)
    d_raw = (d_items - inner * items) / safe[:, None]
    d_raw[degenerate] = 0.0
    d_s_agg, s_gw, s_gb = _mlp_backward(s.mlp, s_cache.mlp_cache, d_raw)
    for k in range(len(s.mlp.weights)):
        grads[f"s.mlp.w{k}"] = s_gw[k]
        grads[f"s.mlp.b{k}"] = s_gb[k]
    grads["s.table"] = _scatter_rows(
        s.token_table.shape, d_s_agg, s_cache.flat_ids, s_cache.lengths
    )

    # Query tower: per head through its MLP and projection, summed at the table.
    d_q_agg = np.zeros_like(q_cache.agg)
    d_proj = np.zeros_like(q.projections)
    for h in range(m):
        d_u, h_gw, h_gb = _mlp_backward(q.head_mlps[h], q_cache.mlp_caches[h], d_heads[h])
        for k in range(len(q.head_mlps[h].weights)):
            grads[f"q.head{h}.w{k}"] = h_gw[k]
            grads[f"q.head{h}.b{k}"] = h_gb[k]
        d_proj[h] = d_u.T @ q_cache.agg
        d_q_agg += d_u @ q.projections[h]
    grads["q.proj"] = d_proj
    grads["q.table"] = _scatter_rows(
        q.token_table.shape, d_q_agg, q_cache.flat_ids, q_cache.lengths
    )
    return loss, grads


class AdaGrad:
    """Per-parameter AdaGrad with accumulator state."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, eps: float = ADAGRAD_EPS):
        self.lr = lr
        self.eps = eps
        self.accum = {name: np.zeros_like(p) for name, p in params.items()}

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update ``p -= lr * g / sqrt(accum + eps)``."""
        for name, g in grads.items():
            acc = self.accum[name]
            acc += g * g
            params[name] -= self.lr * g / np.sqrt(acc + self.eps)


def train_step(
    q: QueryTowerParams,
    s: ItemTowerParams,
    batch: Batch,
    cfg: TrainConfig,
    opt: AdaGrad,
) -> float:
    """One forward/backward/update step; returns the batch loss."""
    loss, grads = batch_gradients(q, s, batch, cfg)
    if not math.isfinite(loss):
        raise RuntimeError(f"non-finite loss: {loss}")
    opt.apply(named_parameters(q, s), grads)
    return loss


ProgressFn = Callable[[int, float, float], None]


def train(
    pairs: Sequence[TrainingPair],
    pool: Sequence[PoolItem],
    tower_cfg: TowerConfig,
    cfg: TrainConfig,
    progress: ProgressFn | None = None,
    progress_every: int = 100,
    checkpoint_path: str | None = None,
    checkpoint_every: int = 0,
    checkpoint_meta: dict | None = None,
) -> tuple[QueryTowerParams, ItemTowerParams]:
    """Run one shuffled epoch of hinge training, capped at ``cfg.max_steps``.

    Args:
        pairs: Positive examples; must be non-empty.
        pool: Items eligible as random negatives; must be non-empty.
        tower_cfg: Model shapes.
        cfg: Optimization hyperparameters.
        progress: Optional callback ``(step, loss, examples_per_sec)``.
        progress_every: Call ``progress`` every this many steps.
        checkpoint_path: Where to write checkpoints, if periodic
            checkpointing is requested or at completion by the caller.
        checkpoint_every: Write a checkpoint every this many steps (0 = off).
        checkpoint_meta: Extra metadata stored in checkpoints.

    Returns:
        The trained query and item tower parameters.

    Raises:
        ValueError: Empty dataset or pool.
        RuntimeError: Non-finite loss, reported with its step number.
    """
    if len(pairs) == 0:
        raise ValueError("training dataset is empty")
    if len(pool) == 0:
        raise ValueError("random-negative pool is empty")
    q, s = init_params(tower_cfg, cfg.seed)
    opt = AdaGrad(named_parameters(q, s), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pairs))

    n_steps = math.ceil(len(pairs) / cfg.batch_size)
    if cfg.max_steps is not None:
        n_steps = min(n_steps, cfg.max_steps)

    started = time.monotonic()
    examples_done = 0
    for step in range(n_steps):
        chunk = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
        batch = prepare_batch([pairs[i] for i in chunk], pool, cfg, rng)
        try:
            loss = train_step(q, s, batch, cfg, opt)
        except RuntimeError as exc:
            raise RuntimeError(f"step {step}: {exc}") from exc
        examples_done += batch.size
        if progress is not None and (step % progress_every == 0 or step == n_steps - 1):
            elapsed = max(time.monotonic() - started, 1e-9)
            progress(step, loss, examples_done / elapsed)
        if checkpoint_every and checkpoint_path and (step + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, tower_cfg, q, s, meta=checkpoint_meta)
    return q, s
