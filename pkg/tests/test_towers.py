"""Tests for the two-tower model: shapes, normalization, checkpoints."""

import numpy as np
import pytest

from semsearch.towers import (
    CheckpointFormatError,
    ItemTowerParams,
    MLPParams,
    TowerConfig,
    aggregate,
    aggregate_batch,
    init_params,
    item_forward,
    item_forward_batch,
    item_forward_count,
    load_checkpoint,
    mlp_forward,
    named_parameters,
    query_forward,
    query_forward_batch,
    reset_item_forward_count,
    save_checkpoint,
)

CFG = TowerConfig(vocab_size=50, dim=8, heads=2, agg_dim=6, hidden=(12,))


def rand_seq(rng, vocab_size, max_len=9):
    n = int(rng.integers(1, max_len))
    return rng.integers(0, vocab_size, size=n).tolist()


class TestInit:
    def test_same_seed_same_params(self):
        q1, s1 = init_params(CFG, seed=7)
        q2, s2 = init_params(CFG, seed=7)
        for name, t in named_parameters(q1, s1).items():
            np.testing.assert_array_equal(t, named_parameters(q2, s2)[name])

    def test_different_seed_differs(self):
        q1, _ = init_params(CFG, seed=7)
        q2, _ = init_params(CFG, seed=8)
        assert not np.array_equal(q1.token_table, q2.token_table)

    def test_shapes(self):
        q, s = init_params(CFG, seed=0)
        assert q.token_table.shape == (50, 6)
        assert q.projections.shape == (2, 6, 6)
        assert [w.shape for w in q.head_mlps[0].weights] == [(12, 6), (8, 12)]
        assert s.token_table.shape == (50, 6)
        assert [b.shape for b in s.mlp.biases] == [(12,), (8,)]

    def test_biases_zero_weights_bounded(self):
        q, s = init_params(CFG, seed=3)
        for mlp in [*q.head_mlps, s.mlp]:
            for b in mlp.biases:
                assert np.all(b == 0.0)
            for w in mlp.weights:
                fan_out, fan_in = w.shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                assert np.abs(w).max() <= limit

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TowerConfig(vocab_size=0)
        with pytest.raises(ValueError):
            TowerConfig(vocab_size=10, heads=0)
        with pytest.raises(ValueError):
            TowerConfig(vocab_size=10, hidden=(0,))


class TestAggregate:
    def test_sum_of_rows(self):
        table = np.arange(20.0).reshape(5, 4)
        np.testing.assert_allclose(aggregate(table, [1, 3]), table[1] + table[3])

    def test_repeated_ids_count_twice(self):
        table = np.arange(20.0).reshape(5, 4)
        np.testing.assert_allclose(aggregate(table, [2, 2]), 2 * table[2])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        table = rng.normal(size=(30, 5))
        seqs = [rand_seq(rng, 30) for _ in range(17)]
        agg, _, _ = aggregate_batch(table, seqs)
        for row, seq in zip(agg, seqs):
            np.testing.assert_allclose(row, aggregate(table, seq))

    def test_empty_sequence_rejected(self):
        table = np.zeros((5, 4))
        with pytest.raises(ValueError, match="empty"):
            aggregate(table, [])
        with pytest.raises(ValueError, match="empty"):
            aggregate_batch(table, [[1], []])

    def test_out_of_range_id_rejected(self):
        table = np.zeros((5, 4))
        with pytest.raises(ValueError, match="out of range"):
            aggregate(table, [5])


class TestForward:
    def test_query_shape_and_batch_consistency(self):
        rng = np.random.default_rng(1)
        q, _ = init_params(CFG, seed=1)
        seqs = [rand_seq(rng, CFG.vocab_size) for _ in range(5)]
        batch = query_forward_batch(q, seqs)
        assert batch.shape == (2, 5, 8)
        for i, seq in enumerate(seqs):
            single = query_forward(q, seq)
            np.testing.assert_allclose(single, batch[:, i, :], rtol=0, atol=1e-12)

    def test_query_heads_not_normalized(self):
        rng = np.random.default_rng(2)
        q, _ = init_params(CFG, seed=2)
        heads = query_forward(q, rand_seq(rng, CFG.vocab_size))
        norms = np.linalg.norm(heads, axis=1)
        assert not np.allclose(norms, 1.0)

    def test_profile_ids_join_the_aggregate(self):
        q, _ = init_params(CFG, seed=4)
        with_profile = query_forward(q, [1, 2], profile_ids=[3])
        same_ids = query_forward(q, [1, 2, 3])
        np.testing.assert_array_equal(with_profile, same_ids)
        assert not np.array_equal(with_profile, query_forward(q, [1, 2]))

    def test_item_unit_norm(self):
        rng = np.random.default_rng(3)
        _, s = init_params(CFG, seed=3)
        vectors, degenerate = item_forward_batch(
            s, [rand_seq(rng, CFG.vocab_size) for _ in range(40)]
        )
        assert not degenerate.any()
        np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-6)

    def test_degenerate_output_flagged_and_unit(self):
        # Zero tables and zero weights force a zero pre-normalization vector.
        mlp = MLPParams(
            [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)]
        )
        s = ItemTowerParams(np.zeros((6, 3)), mlp)
        emb = item_forward(s, [1, 2])
        assert emb.degenerate
        np.testing.assert_array_equal(emb.vector, [1.0, 0.0])

    def test_forward_counter_counts_rows(self):
        _, s = init_params(CFG, seed=5)
        reset_item_forward_count()
        item_forward_batch(s, [[1], [2, 3], [4]])
        item_forward(s, [1])
        assert item_forward_count() == 4
        reset_item_forward_count()
        assert item_forward_count() == 0

    def test_mlp_relu_hidden_linear_out(self):
        mlp = MLPParams(
            [np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([[1.0, 1.0]])],
            [np.zeros(2), np.array([0.5])],
        )
        out, _ = mlp_forward(mlp, np.array([[2.0, 3.0]]))
        # Hidden: relu([2, -3]) = [2, 0]; out: 2 + 0 + 0.5.
        np.testing.assert_allclose(out, [[2.5]])

    def test_float64_pipeline(self):
        rng = np.random.default_rng(6)
        q, s = init_params(CFG, seed=6)
        heads = query_forward(q, rand_seq(rng, CFG.vocab_size))
        emb = item_forward(s, rand_seq(rng, CFG.vocab_size))
        assert heads.dtype == np.float64
        assert emb.vector.dtype == np.float64


class TestCheckpoint:
    def test_round_trip_float32_quantization(self, tmp_path):
        q, s = init_params(CFG, seed=11)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, CFG, q, s, meta={"note": "t"})
        cfg2, q2, s2, meta = load_checkpoint(path)
        assert cfg2 == CFG
        assert meta == {"note": "t"}
        for name, t in named_parameters(q, s).items():
            t2 = named_parameters(q2, s2)[name]
            assert t2.dtype == np.float64
            np.testing.assert_array_equal(t2, t.astype(np.float32).astype(np.float64))

    def test_scores_survive_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        q, s = init_params(CFG, seed=12)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, CFG, q, s)
        _, q2, s2, _ = load_checkpoint(path)
        seq = rand_seq(rng, CFG.vocab_size)
        np.testing.assert_allclose(
            query_forward(q2, seq), query_forward(q, seq), rtol=1e-5, atol=1e-6
        )

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ckpt")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        q, s = init_params(CFG, seed=1)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, CFG, q, s)
        blob = bytearray(open(path, "rb").read())
        blob[4] = 99
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="version 99"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        q, s = init_params(CFG, seed=1)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, CFG, q, s)
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[: len(blob) - 17])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        q, s = init_params(CFG, seed=2)
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(a, CFG, q, s, meta={"k": 1})
        save_checkpoint(b, CFG, q, s, meta={"k": 1})
        assert open(a, "rb").read() == open(b, "rb").read()
