"""Tests for offline metrics, the latency bench, and embedding export."""

import json

import numpy as np
import pytest

from semsearch.evaluation import (
    BenchReport,
    MetricReport,
    auc,
    export_item_embeddings,
    export_query_embeddings,
    latency_bench,
    mean_retrieved_popularity,
    read_embedding_tsv,
    relevance_ranks,
    soft_scores,
    top_k_rate,
)
from semsearch.index import IndexParams, build_index, save_index
from semsearch.manifest import sha256_file
from semsearch.serving import load_servable, start_server
from semsearch.tokenizer import Vocabulary, encode
from semsearch.towers import (
    MLPParams,
    QueryTowerParams,
    TowerConfig,
    init_params,
    item_forward_batch,
    query_forward,
    save_checkpoint,
)
from semsearch.training import soft_dot_score


def unit_rows(rng, n, d):
    mat = rng.normal(size=(n, d))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def make_query_params(rng, vocab=30, agg=6, dim=6, m=2, hidden=8):
    cfg = TowerConfig(vocab_size=vocab, dim=dim, heads=m, agg_dim=agg,
                      hidden=(hidden,))
    q, _ = init_params(cfg, seed=int(rng.integers(1 << 30)))
    return q


def zero_query_params(vocab=30, agg=6, dim=6, m=2):
    table = np.zeros((vocab, agg))
    projections = np.zeros((m, agg, agg))
    mlps = tuple(
        MLPParams(weights=[np.zeros((agg, dim))], biases=[np.zeros(dim)])
        for _ in range(m)
    )
    return QueryTowerParams(token_table=table, projections=projections,
                            head_mlps=mlps)


class TestSoftScores:
    def test_matches_per_item_oracle(self):
        rng = np.random.default_rng(0)
        heads = rng.normal(size=(3, 8))
        items = unit_rows(rng, 25, 8)
        for beta in (0.05, 1.0, 7.0):
            got = soft_scores(heads, items, beta)
            want = [soft_dot_score(heads, items[i], beta) for i in range(25)]
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            soft_scores(np.ones((1, 4)), np.ones((2, 4)), 0.0)


class TestTopKRate:
    def test_ranks_match_independent_oracle(self):
        rng = np.random.default_rng(1)
        q = make_query_params(rng)
        items = unit_rows(rng, 40, 6)
        queries = [([int(rng.integers(30))], int(rng.integers(40)))
                   for _ in range(25)]
        got = relevance_ranks(q, 0.7, queries, items, 12,
                              np.random.default_rng(99))
        oracle_rng = np.random.default_rng(99)
        for i, (ids, rel) in enumerate(queries):
            draw = oracle_rng.choice(39, size=11, replace=False)
            draw = np.where(draw >= rel, draw + 1, draw)
            heads = query_forward(q, ids)
            rel_score = soft_dot_score(heads, items[rel], 0.7)
            others = [soft_dot_score(heads, items[j], 0.7) for j in draw]
            want = 1 + sum(score >= rel_score for score in others)
            assert got[i] == want

    def test_monotone_in_k_with_same_seed(self):
        rng = np.random.default_rng(2)
        q = make_query_params(rng)
        items = unit_rows(rng, 60, 6)
        queries = [([int(rng.integers(30))], int(rng.integers(60)))
                   for _ in range(40)]
        rates = [
            top_k_rate(q, 1.0, queries, items, k, 20, np.random.default_rng(5))
            for k in (1, 3, 10, 20)
        ]
        assert rates == sorted(rates)
        assert rates[-1] == 1.0

    def test_all_tied_scores_rank_last(self):
        # Zero towers score every item identically; pessimistic ties put the
        # relevant item at rank N, so the rate is exactly 0 whenever N > k.
        rng = np.random.default_rng(3)
        items = unit_rows(rng, 30, 6)
        queries = [([1, 2], i % 30) for i in range(10)]
        q = zero_query_params()
        ranks = relevance_ranks(q, 1.0, queries, items, 16,
                                np.random.default_rng(0))
        assert (ranks == 16).all()
        assert top_k_rate(q, 1.0, queries, items, 10, 16,
                          np.random.default_rng(0)) == 0.0

    def test_random_items_rank_uniformly(self):
        # Items are iid, so the relevant rank is exchangeable with the
        # distractors and the hit rate concentrates near k/N.
        rng = np.random.default_rng(4)
        q = make_query_params(rng)
        items = unit_rows(rng, 500, 6)
        queries = [([int(rng.integers(30)), int(rng.integers(30))],
                    int(rng.integers(500))) for _ in range(400)]
        rate = top_k_rate(q, 1.0, queries, items, 4, 16,
                          np.random.default_rng(6))
        assert abs(rate - 4 / 16) < 0.08

    def test_distractor_budget_validated(self):
        rng = np.random.default_rng(5)
        q = make_query_params(rng)
        items = unit_rows(rng, 10, 6)
        with pytest.raises(ValueError, match="distractors"):
            relevance_ranks(q, 1.0, [([1], 0)], items, 11, rng)
        with pytest.raises(ValueError, match="k must be"):
            top_k_rate(q, 1.0, [([1], 0)], items, 0, 5, rng)
        with pytest.raises(ValueError, match="no evaluation queries"):
            top_k_rate(q, 1.0, [], items, 1, 5, rng)


class TestAUC:
    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0
        assert auc([0.1, 0.2, 0.8], [False, False, True]) == 1.0

    def test_inverted_is_zero(self):
        assert auc([0.1, 0.9], [True, False]) == 0.0

    def test_all_equal_scores_half(self):
        assert auc([0.5] * 6, [True, False, True, False, False, True]) == 0.5

    def test_hand_computed_midranks(self):
        # Sorted scores 1,2,2,3 -> midranks 1, 2.5, 2.5, 4.
        # Positive ranks 4 + 2.5 = 6.5 -> AUC (6.5 - 3) / 4.
        assert auc([3, 1, 2, 2], [True, False, True, False]) == pytest.approx(0.875)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=200)
        labels = rng.random(200) < 0.4
        base = auc(scores, labels)
        assert auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auc(3 * scores + 11, labels) == pytest.approx(base, abs=1e-12)

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(size=10_000)
        labels = rng.random(10_000) < 0.5
        assert abs(auc(scores, labels) - 0.5) < 0.02

    def test_single_class_faults(self):
        with pytest.raises(ValueError, match="both classes"):
            auc([1.0, 2.0], [True, True])
        with pytest.raises(ValueError, match="both classes"):
            auc([1.0, 2.0], [False, False])
        with pytest.raises(ValueError, match="empty"):
            auc([], [])


ITEM_TEXTS = {
    f"it{i:03d}": f"gadget kind{i % 6} tint{i % 4}" for i in range(40)
}


@pytest.fixture(scope="module")
def servable(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_servable")
    vocab = Vocabulary.build(list(ITEM_TEXTS.values()), min_count=1)
    vocab_path = str(root / "vocab.tsv")
    vocab.save(vocab_path)
    cfg = TowerConfig(vocab_size=vocab.size, dim=8, heads=2, agg_dim=8,
                      hidden=(12,))
    q, s = init_params(cfg, seed=3)
    ckpt = str(root / "m.ckpt")
    save_checkpoint(ckpt, cfg, q, s, meta={"vocab_sha256": sha256_file(vocab_path)})
    ids = sorted(ITEM_TEXTS)
    vecs, _ = item_forward_batch(s, [encode(vocab, ITEM_TEXTS[i]) for i in ids])
    ipath = str(root / "i.dpsx")
    save_index(build_index(ids, vecs, IndexParams()), ipath)
    return load_servable(ckpt, ipath, vocab_path)


class TestMeanRetrievedPopularity:
    def test_uniform_popularity_is_constant(self, servable):
        pop = {i: 7.0 for i in ITEM_TEXTS}
        got = mean_retrieved_popularity(servable, ["gadget kind1"], pop, k=10)
        assert got == 7.0

    def test_full_corpus_k_gives_corpus_mean(self, servable):
        rng = np.random.default_rng(9)
        pop = {i: float(rng.integers(0, 100)) for i in sorted(ITEM_TEXTS)}
        queries = ["gadget kind2", "gadget tint3", "gadget"]
        got = mean_retrieved_popularity(servable, queries, pop, k=len(ITEM_TEXTS))
        assert got == pytest.approx(np.mean(list(pop.values())))

    def test_permutation_invariant(self, servable):
        rng = np.random.default_rng(10)
        pop = {i: float(rng.integers(0, 50)) for i in sorted(ITEM_TEXTS)}
        queries = [f"gadget kind{i}" for i in range(6)]
        a = mean_retrieved_popularity(servable, queries, pop, k=5)
        b = mean_retrieved_popularity(servable, queries[::-1], pop, k=5)
        assert a == pytest.approx(b)

    def test_missing_popularity_faults(self, servable):
        pop = {i: 1.0 for i in list(sorted(ITEM_TEXTS))[:3]}
        with pytest.raises(ValueError, match="no popularity"):
            mean_retrieved_popularity(servable, ["gadget"], pop, k=10)


class TestLatencyBench:
    def test_replays_and_reports(self, servable):
        server = start_server(servable)
        try:
            url = f"http://127.0.0.1:{server.server_address[1]}"
            bodies = [{"query": f"gadget kind{i % 6}", "k": 5} for i in range(10)]
            report = latency_bench(url, bodies, concurrency=4, total_requests=40)
            assert report.requests == 40
            assert report.errors == 0
            assert report.p50_ms > 0
            assert report.p99_ms >= report.p50_ms
            assert report.qps > 0
            assert report.concurrency == 4
            assert set(report.to_dict()) == {
                "requests", "errors", "duration_s", "concurrency",
                "qps", "p50_ms", "p99_ms"}
        finally:
            server.drain(timeout=2.0)

    def test_unhealthy_endpoint_aborts(self):
        with pytest.raises(RuntimeError, match="unhealthy"):
            latency_bench("http://127.0.0.1:9", [{"query": "x"}],
                          concurrency=1, total_requests=1)

    def test_all_errors_reported(self, servable):
        server = start_server(servable)
        try:
            url = f"http://127.0.0.1:{server.server_address[1]}"
            with pytest.raises(RuntimeError, match="zero successes"):
                latency_bench(url, [{"query": "gadget", "k": 0}],
                              concurrency=2, total_requests=6)
        finally:
            server.drain(timeout=2.0)

    def test_argument_validation(self):
        with pytest.raises(ValueError, match="concurrency"):
            latency_bench("http://x", [{"query": "a"}], 0, total_requests=1)
        with pytest.raises(ValueError, match="exactly one"):
            latency_bench("http://x", [{"query": "a"}], 1)
        with pytest.raises(ValueError, match="no requests"):
            latency_bench("http://x", [], 1, total_requests=1)


class TestExport:
    def test_item_export_roundtrip_rescues_scores(self, servable, tmp_path):
        path = str(tmp_path / "items.tsv")
        export_item_embeddings(path, servable.index.ids, servable.index.vectors)
        names, heads, mat = read_embedding_tsv(path)
        assert names == servable.index.ids
        assert heads is None
        norms = np.linalg.norm(mat, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-4)
        q = query_forward(servable.query_params,
                          encode(servable.vocab, "gadget kind3"))[0]
        original = servable.index.vectors.astype(np.float64) @ q
        reloaded = mat @ q
        assert np.abs(original - reloaded).max() <= 1e-4

    def test_query_export_one_row_per_head(self, servable, tmp_path):
        path = str(tmp_path / "queries.tsv")
        queries = [("q0", encode(servable.vocab, "gadget kind0")),
                   ("q1", encode(servable.vocab, "gadget tint1"))]
        export_query_embeddings(path, queries, servable.query_params)
        names, heads, mat = read_embedding_tsv(path, with_head=True)
        assert names == ["q0", "q0", "q1", "q1"]
        assert heads.tolist() == [0, 1, 0, 1]
        want = query_forward(servable.query_params, queries[0][1])
        np.testing.assert_allclose(mat[:2], want, rtol=1e-5, atol=1e-5)

    def test_export_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="ids"):
            export_item_embeddings(str(tmp_path / "x.tsv"), ["a"],
                                   np.zeros((2, 3)))

    def test_malformed_reload_faults(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("onlyid\n")
        with pytest.raises(ValueError, match="too few columns"):
            read_embedding_tsv(str(bad))


class TestMetricReport:
    def test_json_and_tsv(self):
        report = MetricReport(top1=0.5, top10=0.9, auc=0.95,
                              mean_popularity=12.5, p50_ms=3.1, p99_ms=9.9,
                              qps=800.0)
        payload = json.loads(report.to_json())
        assert payload["top10"] == 0.9
        line = report.to_tsv_line()
        assert line.split("\t")[0] == "0.5"
        assert len(line.split("\t")) == len(MetricReport.tsv_header().split("\t"))

    def test_none_fields_marked_na(self):
        line = MetricReport(top1=0.25).to_tsv_line()
        cells = line.split("\t")
        assert cells[0] == "0.25"
        assert cells[1] == "NA"

    def test_rates_validated(self):
        with pytest.raises(ValueError, match="top1"):
            MetricReport(top1=1.5)
        with pytest.raises(ValueError, match="auc"):
            MetricReport(auc=-0.1)
