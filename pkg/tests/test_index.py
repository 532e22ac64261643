"""Tests for the embedding index: exactness, graph recall, format, faults."""

import numpy as np
import pytest

from semsearch.index import (
    EmbeddingIndex,
    IndexFormatError,
    IndexParams,
    SearchHit,
    _assign_levels,
    brute_force_search,
    build_index,
    load_index,
    save_index,
    search,
)


def unit_rows(rng, n, d):
    mat = rng.normal(size=(n, d))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def make_ids(n, prefix="it"):
    return [f"{prefix}{i:05d}" for i in range(n)]


GRAPH_PARAMS = IndexParams(degree=8, build_beam=60, search_beam=60, exact_threshold=0)


@pytest.fixture(scope="module")
def graph_fixture():
    rng = np.random.default_rng(7)
    vecs = unit_rows(rng, 2000, 16)
    ids = make_ids(2000)
    return ids, vecs, build_index(ids, vecs, GRAPH_PARAMS)


class TestFlatExactness:
    def test_matches_oracle_bit_identical(self):
        rng = np.random.default_rng(0)
        vecs = unit_rows(rng, 500, 8)
        ids = make_ids(500)
        idx = build_index(ids, vecs, IndexParams())
        assert idx.mode == "flat"
        for q in unit_rows(rng, 40, 8):
            got = search(idx, q, 10)
            want = brute_force_search(ids, vecs, q, 10)
            assert got == want

    def test_boundary_ties_resolved_by_id(self):
        # Three score plateaus; the k cut lands inside the middle plateau.
        base = np.eye(3, 4)
        vecs = np.repeat(base, [2, 4, 3], axis=0)
        ids = ["b1", "a1", "d2", "c2", "b2", "a2", "c3", "a3", "b3"]
        idx = build_index(ids, vecs, IndexParams())
        q = np.array([3.0, 2.0, 1.0, 0.0])
        got = [h.item_id for h in search(idx, q, 4)]
        # Plateau one fully, then the middle plateau in ascending id order.
        assert got == ["a1", "b1", "a2", "b2"]
        assert got == [h.item_id for h in brute_force_search(ids, vecs, q, 4)]

    def test_all_kinds_of_k(self):
        rng = np.random.default_rng(1)
        vecs = unit_rows(rng, 50, 8)
        ids = make_ids(50)
        idx = build_index(ids, vecs, IndexParams())
        q = unit_rows(rng, 1, 8)[0]
        assert len(search(idx, q, 1)) == 1
        assert len(search(idx, q, 50)) == 50
        assert len(search(idx, q, 999)) == 50
        full = search(idx, q, 50)
        assert full == brute_force_search(ids, vecs, q, 50)

    def test_scores_are_float32_inner_products(self):
        rng = np.random.default_rng(2)
        vecs = unit_rows(rng, 20, 8)
        ids = make_ids(20)
        idx = build_index(ids, vecs, IndexParams())
        q = unit_rows(rng, 1, 8)[0]
        expected = vecs.astype(np.float32) @ q.astype(np.float32)
        for hit in search(idx, q, 20):
            row = ids.index(hit.item_id)
            assert hit.score == float(expected[row])


class TestGraphSearch:
    def test_mode_and_structure(self, graph_fixture):
        ids, vecs, idx = graph_fixture
        assert idx.mode == "graph"
        assert idx.entry >= 0
        assert idx.max_level >= 0
        assert idx.neighbors.shape[1] == 2 * GRAPH_PARAMS.degree
        assert int(idx.counts.max()) <= 2 * GRAPH_PARAMS.degree

    def test_recall_floor(self, graph_fixture):
        ids, vecs, idx = graph_fixture
        rng = np.random.default_rng(11)
        hitrate = 0.0
        queries = unit_rows(rng, 50, 16)
        for q in queries:
            got = {h.item_id for h in search(idx, q, 10)}
            want = {h.item_id for h in brute_force_search(ids, vecs, q, 10)}
            hitrate += len(got & want) / 10
        assert hitrate / len(queries) >= 0.95

    def test_hits_sorted_score_desc_id_asc(self, graph_fixture):
        ids, vecs, idx = graph_fixture
        q = unit_rows(np.random.default_rng(12), 1, 16)[0]
        hits = search(idx, q, 25)
        keys = [(-h.score, h.item_id) for h in hits]
        assert keys == sorted(keys)

    def test_k_at_least_count_is_exact(self, graph_fixture):
        ids, vecs, idx = graph_fixture
        q = unit_rows(np.random.default_rng(13), 1, 16)[0]
        got = search(idx, q, len(ids))
        want = brute_force_search(ids, vecs, q, len(ids))
        assert got == want

    def test_duplicate_vectors_tie_break(self):
        rng = np.random.default_rng(3)
        vecs = unit_rows(rng, 400, 8)
        vecs[37] = vecs[250] = vecs[5]
        ids = make_ids(400)
        idx = build_index(ids, vecs, IndexParams(degree=8, build_beam=80,
                                                 search_beam=200, exact_threshold=0))
        hits = search(idx, vecs[5], 10)
        keys = [(-h.score, h.item_id) for h in hits]
        assert keys == sorted(keys)
        top = [h.item_id for h in hits[:3]]
        assert top == sorted([ids[5], ids[37], ids[250]])

    def test_search_method_delegates(self, graph_fixture):
        ids, vecs, idx = graph_fixture
        q = unit_rows(np.random.default_rng(14), 1, 16)[0]
        assert idx.search(q, 5) == search(idx, q, 5)

    def test_progress_callback(self):
        rng = np.random.default_rng(4)
        vecs = unit_rows(rng, 300, 8)
        ids = make_ids(300)
        seen = []
        build_index(ids, vecs, GRAPH_PARAMS,
                    progress=lambda done, total: seen.append((done, total)),
                    progress_every=100)
        assert seen[-1] == (300, 300)
        assert [d for d, _ in seen] == sorted(d for d, _ in seen)


class TestDeterminism:
    def test_rebuild_serializes_identically(self, tmp_path):
        rng = np.random.default_rng(5)
        vecs = unit_rows(rng, 600, 8)
        ids = make_ids(600)
        p1, p2 = tmp_path / "a.dpsx", tmp_path / "b.dpsx"
        save_index(build_index(ids, vecs, GRAPH_PARAMS), str(p1))
        save_index(build_index(ids, vecs.copy(), GRAPH_PARAMS), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_levels_seeded_and_capped(self):
        a = _assign_levels(5000, 8, seed=3)
        b = _assign_levels(5000, 8, seed=3)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 60
        # Geometric decay: P(level >= 1) = 1/degree.
        frac = float((a >= 1).mean())
        assert abs(frac - 1 / 8) < 0.02
        c = _assign_levels(5000, 8, seed=4)
        assert not np.array_equal(a, c)


class TestSerialization:
    def test_roundtrip_search_identical(self, graph_fixture, tmp_path):
        ids, vecs, idx = graph_fixture
        path = tmp_path / "g.dpsx"
        save_index(idx, str(path))
        loaded = load_index(str(path))
        assert loaded.mode == "graph"
        assert loaded.params == idx.params
        rng = np.random.default_rng(21)
        for q in unit_rows(rng, 10, 16):
            assert search(loaded, q, 10) == search(idx, q, 10)

    def test_roundtrip_flat(self, tmp_path):
        rng = np.random.default_rng(6)
        vecs = unit_rows(rng, 100, 8)
        ids = make_ids(100)
        idx = build_index(ids, vecs, IndexParams())
        path = tmp_path / "f.dpsx"
        save_index(idx, str(path))
        loaded = load_index(str(path))
        assert loaded.mode == "flat"
        assert loaded.ids == ids
        q = unit_rows(rng, 1, 8)[0]
        assert search(loaded, q, 7) == search(idx, q, 7)

    def test_resave_bytes_stable(self, graph_fixture, tmp_path):
        _, _, idx = graph_fixture
        p1, p2 = tmp_path / "one.dpsx", tmp_path / "two.dpsx"
        save_index(idx, str(p1))
        save_index(load_index(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.dpsx"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(IndexFormatError):
            load_index(str(path))

    def test_truncated_rejected(self, graph_fixture, tmp_path):
        _, _, idx = graph_fixture
        path = tmp_path / "full.dpsx"
        save_index(idx, str(path))
        blob = path.read_bytes()
        cut = tmp_path / "cut.dpsx"
        cut.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(IndexFormatError):
            load_index(str(cut))

    def test_trailing_bytes_rejected(self, tmp_path):
        rng = np.random.default_rng(8)
        idx = build_index(make_ids(30), unit_rows(rng, 30, 8), IndexParams())
        path = tmp_path / "x.dpsx"
        save_index(idx, str(path))
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(IndexFormatError):
            load_index(str(path))

    def test_wrong_version_rejected(self, tmp_path):
        rng = np.random.default_rng(9)
        idx = build_index(make_ids(30), unit_rows(rng, 30, 8), IndexParams())
        path = tmp_path / "v.dpsx"
        save_index(idx, str(path))
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(IndexFormatError):
            load_index(str(path))


class TestValidation:
    def test_rejects_duplicate_ids(self):
        vecs = unit_rows(np.random.default_rng(0), 3, 4)
        with pytest.raises(ValueError, match="duplicate"):
            build_index(["a", "b", "a"], vecs)

    def test_rejects_empty_and_malformed_ids(self):
        vecs = unit_rows(np.random.default_rng(0), 2, 4)
        with pytest.raises(ValueError, match="empty"):
            build_index(["a", ""], vecs)
        with pytest.raises(ValueError, match="tab or newline"):
            build_index(["a", "b\tc"], vecs)

    def test_rejects_non_unit_vector_naming_offender(self):
        vecs = unit_rows(np.random.default_rng(0), 3, 4)
        vecs[1] *= 1.5
        with pytest.raises(ValueError, match="item1"):
            build_index(["item0", "item1", "item2"], vecs)

    def test_rejects_non_finite(self):
        vecs = unit_rows(np.random.default_rng(0), 2, 4)
        vecs[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            build_index(["a", "b"], vecs)

    def test_rejects_empty_corpus(self):
        with pytest.raises(ValueError, match="zero items"):
            build_index([], np.zeros((0, 4)))

    def test_rejects_shape_mismatch(self):
        vecs = unit_rows(np.random.default_rng(0), 3, 4)
        with pytest.raises(ValueError, match="n_items"):
            build_index(["a", "b"], vecs)

    def test_search_rejects_bad_queries(self, graph_fixture):
        _, _, idx = graph_fixture
        with pytest.raises(ValueError, match="k must be"):
            search(idx, np.zeros(16), 0)
        with pytest.raises(ValueError, match="dim"):
            search(idx, np.zeros(5), 3)
        with pytest.raises(ValueError, match="non-finite"):
            search(idx, np.full(16, np.nan), 3)

    def test_params_validated(self):
        with pytest.raises(ValueError):
            IndexParams(degree=1)
        with pytest.raises(ValueError):
            IndexParams(build_beam=0)
        with pytest.raises(ValueError):
            IndexParams(search_beam=-1)

    def test_params_dict_roundtrip(self):
        p = IndexParams(degree=12, build_beam=77, search_beam=33,
                        exact_threshold=5, seed=9)
        assert IndexParams.from_dict(p.to_dict()) == p
