#include "fastslow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"

using namespace fastslow;

namespace {

const Dataset& pipeline_dataset() {
    static Dataset ds = [] {
        DatasetConfig cfg;
        cfg.train_scenes = 30;
        cfg.val_scenes = 5;
        cfg.test_scenes = 15;
        cfg.raster = 16;
        return generate_dataset(cfg, 77);
    }();
    return ds;
}

SlowParams tiny_slow(const Dataset& ds, uint64_t seed) {
    DecoderConfig dec;
    dec.vocab_size = ds.vocab.size();
    dec.dm = 16;
    dec.heads = 2;
    dec.layers = 1;
    dec.max_positions = 16;
    dec.feature_dim = 8;
    Rng rng(seed);
    return init_slow(ImageEncoderConfig{16, 3, {4, 4, 8}}, dec, 4, rng);
}

DualEncoderParams tiny_fast(const Dataset& ds, uint64_t seed) {
    Rng rng(seed);
    return init_dual_encoder(ImageEncoderConfig{16, 3, {4, 4, 8}}, ds.vocab.size(), 8, rng);
}

const CorpusEmbeddings& test_corpus() {
    static CorpusEmbeddings emb =
        embed_corpus(pipeline_dataset(), Split::test, tiny_fast(pipeline_dataset(), 11));
    return emb;
}

RetrievalPipeline standard_pipeline(int64_t k, double beta, bool precompute = true) {
    const Dataset& ds = pipeline_dataset();
    SlowParams slow = tiny_slow(ds, 21);
    PipelineConfig cfg;
    cfg.k = k;
    cfg.beta = beta;
    cfg.precompute = precompute;
    return build_pipeline(tiny_fast(ds, 11), slow, build_exact(test_corpus()),
                          dataset_features(ds, slow), cfg);
}

SlowParams zeroed_slow(const Dataset& ds) {
    SlowParams p = tiny_slow(ds, 21);
    visit_slow(p, [](const std::string&, Tensor& t) { t = Tensor::zeros(t.shape); });
    return p;
}

std::vector<int64_t> ids_of(const std::vector<Candidate>& items) {
    std::vector<int64_t> ids;
    for (const auto& c : items) ids.push_back(c.scene_id);
    return ids;
}

std::vector<int64_t> ids_of(const RankedList& items) {
    std::vector<int64_t> ids;
    for (const auto& s : items) ids.push_back(s.scene_id);
    return ids;
}

RankedList shuffled_ranking(const std::vector<int64_t>& ids, Rng& rng) {
    std::vector<int64_t> order = ids;
    for (size_t i = order.size() - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(i + 1));
        std::swap(order[i], order[j]);
    }
    RankedList out;
    for (int64_t id : order) out.push_back({id, 0.0});
    return out;
}

}  // namespace

TEST_CASE("five item fusion order matches direct arithmetic") {
    const Dataset& ds = pipeline_dataset();
    const CorpusEmbeddings& full = test_corpus();
    CorpusEmbeddings sub;
    sub.dim = full.dim;
    for (int64_t i = 0; i < 5; ++i) {
        sub.scene_ids.push_back(full.scene_ids[static_cast<size_t>(2 * i)]);
        for (int64_t d = 0; d < full.dim; ++d)
            sub.rows.push_back(full.rows[static_cast<size_t>(2 * i * full.dim + d)]);
    }
    SlowParams slow = tiny_slow(ds, 21);
    FeatureProvider provider = dataset_features(ds, slow);
    PipelineConfig cfg;
    cfg.k = 5;
    cfg.beta = 0.5;
    ExactIndex idx = build_exact(sub);
    RetrievalPipeline pipe =
        build_pipeline(tiny_fast(ds, 11), slow, idx, provider, cfg);

    const std::vector<int64_t>& q = ds.caption(sub.scene_ids[0], 0).tokens;
    RankedList fast_order = topk_exact(idx, embed_text(q, pipe.fast), 5);
    struct Row {
        int64_t id;
        double fast, slow, combined;
    };
    std::vector<Row> expect;
    for (const auto& s : fast_order) {
        double h = caption_score(provider(s.scene_id), with_sentinels(q), slow).value();
        expect.push_back({s.scene_id, s.score, h, h + 0.5 * s.score});
    }
    std::sort(expect.begin(), expect.end(), [](const Row& a, const Row& b) {
        if (a.combined != b.combined) return a.combined > b.combined;
        return a.id < b.id;
    });

    QueryResult r = run_query(pipe, q);
    REQUIRE(r.items.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(r.items[i].scene_id == expect[i].id);
        CHECK(r.items[i].fast_score == expect[i].fast);
        CHECK(r.items[i].slow_score == expect[i].slow);
        CHECK(r.items[i].combined == expect[i].combined);
        CHECK(r.items[i].stage == Stage::reranked);
    }
}

TEST_CASE("rerank block of one keeps the fast leader") {
    RetrievalPipeline pipe = standard_pipeline(1, 0.0);
    const Dataset& ds = pipeline_dataset();
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[3], 0).tokens;
    RankedList fast_order = topk_exact(pipe.exact, embed_text(q, pipe.fast), 15);
    for (double beta : {0.0, 7.5, -3.25}) {
        QueryResult r = run_query(pipe, q, 1, beta);
        REQUIRE(r.items.size() == 15);
        CHECK(r.items[0].scene_id == fast_order[0].scene_id);
        CHECK(r.items[0].stage == Stage::reranked);
        for (size_t i = 1; i < r.items.size(); ++i) {
            CHECK(r.items[i].stage == Stage::fast);
            CHECK(r.items[i].scene_id == fast_order[i].scene_id);
        }
    }
}

TEST_CASE("full budget with zero mixing equals exhaustive slow scoring") {
    RetrievalPipeline pipe = standard_pipeline(15, 0.0);
    const Dataset& ds = pipeline_dataset();
    FeatureProvider provider = dataset_features(ds, pipe.slow);
    for (int64_t pick : {0, 4, 9}) {
        const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[pick], 0).tokens;
        RankedList oracle =
            exhaustive_slow_ranking(pipe.corpus_ids(), provider, pipe.slow, q);
        QueryResult r = run_query(pipe, q);
        REQUIRE(ids_of(r.items) == ids_of(oracle));
        for (size_t i = 0; i < oracle.size(); ++i) {
            CHECK(r.items[i].slow_score == oracle[i].score);
            CHECK(r.items[i].combined == oracle[i].score);
        }
    }
}

TEST_CASE("ties fall back to ascending ids under a constant scorer") {
    const Dataset& ds = pipeline_dataset();
    SlowParams flat = zeroed_slow(ds);
    PipelineConfig cfg;
    cfg.k = 15;
    cfg.beta = 0.0;
    RetrievalPipeline pipe = build_pipeline(tiny_fast(ds, 11), flat, build_exact(test_corpus()),
                                            dataset_features(ds, flat), cfg);
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[0], 0).tokens;
    QueryResult r = run_query(pipe, q);
    RankedList oracle =
        exhaustive_slow_ranking(pipe.corpus_ids(), dataset_features(ds, flat), flat, q);
    std::vector<int64_t> ascending = pipe.corpus_ids();
    std::sort(ascending.begin(), ascending.end());
    CHECK(ids_of(r.items) == ascending);
    CHECK(ids_of(oracle) == ascending);
    for (size_t i = 1; i < r.items.size(); ++i)
        CHECK(r.items[i].slow_score == r.items[0].slow_score);
}

TEST_CASE("huge mixing weight reproduces the fast order") {
    RetrievalPipeline pipe = standard_pipeline(15, 1e12);
    const Dataset& ds = pipeline_dataset();
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[7], 0).tokens;
    RankedList fast_order = topk_exact(pipe.exact, embed_text(q, pipe.fast), 15);
    QueryResult r = run_query(pipe, q);
    CHECK(ids_of(r.items) == ids_of(fast_order));
}

TEST_CASE("the tail beyond the block keeps fast positions") {
    RetrievalPipeline pipe = standard_pipeline(5, 0.25);
    const Dataset& ds = pipeline_dataset();
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[2], 0).tokens;
    RankedList fast_order = topk_exact(pipe.exact, embed_text(q, pipe.fast), 15);
    QueryResult r = run_query(pipe, q);
    REQUIRE(r.items.size() == 15);
    std::vector<int64_t> block_ids, fast_top;
    for (size_t i = 0; i < 5; ++i) {
        CHECK(r.items[i].stage == Stage::reranked);
        block_ids.push_back(r.items[i].scene_id);
        fast_top.push_back(fast_order[i].scene_id);
    }
    std::sort(block_ids.begin(), block_ids.end());
    std::sort(fast_top.begin(), fast_top.end());
    CHECK(block_ids == fast_top);
    for (size_t i = 5; i < 15; ++i) {
        CHECK(r.items[i].stage == Stage::fast);
        CHECK(r.items[i].scene_id == fast_order[i].scene_id);
        CHECK(r.items[i].fast_score == fast_order[i].score);
    }
    for (size_t i = 1; i < 5; ++i) {
        bool ordered = r.items[i - 1].combined > r.items[i].combined ||
                       (r.items[i - 1].combined == r.items[i].combined &&
                        r.items[i - 1].scene_id < r.items[i].scene_id);
        CHECK(ordered);
    }
}

TEST_CASE("slow call budget is exactly the block size") {
    RetrievalPipeline pipe = standard_pipeline(10, 0.0);
    const Dataset& ds = pipeline_dataset();
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[1], 0).tokens;
    for (int64_t k : {int64_t{0}, int64_t{1}, int64_t{5}, int64_t{15}, int64_t{50}}) {
        QueryResult r = run_query(pipe, q, k, 0.0);
        CHECK(r.stats.slow_invocations == std::min<int64_t>(k, 15));
        CHECK(r.stats.index_ms >= 0.0);
        CHECK(r.stats.rerank_ms >= 0.0);
        CHECK(r.stats.total_ms + 1e-9 >= r.stats.index_ms + r.stats.rerank_ms);
    }
}

TEST_CASE("recall depth semantics") {
    std::vector<Candidate> items;
    for (int64_t id : {10, 20, 30, 40}) items.push_back(Candidate{id, 0, 0, 0, Stage::fast});
    CHECK(recall_at_k(items, 10, 1) == 1);
    CHECK(recall_at_k(items, 30, 1) == 0);
    CHECK(recall_at_k(items, 30, 2) == 0);
    CHECK(recall_at_k(items, 30, 3) == 1);
    CHECK(recall_at_k(items, 30, 17) == 1);
    CHECK(recall_at_k(items, 99, 4) == 0);
    CHECK_THROWS_AS(recall_at_k(items, 10, 0), UsageError);
    RankedList ranked = {{10, 0.0}, {20, 0.0}, {30, 0.0}};
    CHECK(recall_at_k(ranked, 30, 2) == 0);
    CHECK(recall_at_k(ranked, 30, 3) == 1);
    int prev = 0;
    for (int64_t k = 1; k <= 4; ++k) {
        int hit = recall_at_k(items, 40, k);
        CHECK(hit >= prev);
        prev = hit;
    }
}

TEST_CASE("random rankings hit at one over n") {
    std::vector<int64_t> ids(20);
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int64_t>(i);
    Rng rng(123);
    int hits = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        RankedList ranking = shuffled_ranking(ids, rng);
        hits += recall_at_k(ranking, 7, 1);
    }
    double mean = static_cast<double>(hits) / trials;
    // binomial 3 sigma around 1/20 at 10k trials
    CHECK(std::abs(mean - 0.05) <= 0.00654);
}

TEST_CASE("curve rows carry references and exact call counts") {
    RetrievalPipeline pipe = standard_pipeline(10, 0.0);
    std::vector<QuerySpec> queries = gold_queries(pipeline_dataset(), Split::test);
    REQUIRE(queries.size() == 15);
    CurveResult curve = rerank_curve(pipe, queries, {1, 3, 15}, {0.0, 0.5});
    REQUIRE(curve.rows.size() == 8);
    CHECK(curve.rows.front().k == 0);
    CHECK(curve.rows.front().beta == 0.0);
    CHECK(curve.rows.back().k == 15);
    CHECK(curve.rows.back().beta == 0.0);
    std::vector<std::pair<int64_t, double>> grid;
    for (size_t i = 1; i + 1 < curve.rows.size(); ++i)
        grid.push_back({curve.rows[i].k, curve.rows[i].beta});
    std::vector<std::pair<int64_t, double>> want = {{1, 0.0}, {1, 0.5}, {3, 0.0},
                                                    {3, 0.5}, {15, 0.0}, {15, 0.5}};
    CHECK(grid == want);
    for (const auto& row : curve.rows) {
        CHECK(row.mean_slow_calls == static_cast<double>(row.k));
        CHECK(row.r5 >= row.r1);
        CHECK(row.r1 >= 0.0);
        CHECK(row.r5 <= 1.0);
    }
    const CurveRow& degenerate = curve.rows[5];  // k=15, beta=0 grid row
    CHECK(degenerate.k == 15);
    CHECK(degenerate.r1 == curve.rows.back().r1);
    CHECK(degenerate.r5 == curve.rows.back().r5);

    int fast_hits1 = 0;
    for (const auto& qs : queries) {
        RankedList fast_order = topk_exact(pipe.exact, embed_text(qs.tokens, pipe.fast), 15);
        fast_hits1 += recall_at_k(fast_order, qs.gold_id, 1);
    }
    CHECK(curve.rows.front().r1 == static_cast<double>(fast_hits1) / 15.0);

    CsvLog csv = curve.csv();
    std::string dump = csv.dump();
    CHECK(dump.rfind("K,beta,R1,R5,mean_slow_calls,mean_wall_ms\n", 0) == 0);
    CHECK(std::count(dump.begin(), dump.end(), '\n') == 9);
    CHECK(dump.find("\n0,0,") != std::string::npos);

    CHECK_THROWS_AS(rerank_curve(pipe, queries, {0}, {0.0}), UsageError);
    CHECK_THROWS_AS(rerank_curve(pipe, queries, {16}, {0.0}), UsageError);
    CHECK_THROWS_AS(rerank_curve(pipe, {}, {1}, {0.0}), UsageError);
    double bad = std::nan("");
    CHECK_THROWS_AS(rerank_curve(pipe, queries, {1}, {bad}), UsageError);
}

TEST_CASE("precomputed and on-demand features agree") {
    RetrievalPipeline cached = standard_pipeline(7, 0.3, true);
    RetrievalPipeline lazy = standard_pipeline(7, 0.3, false);
    CHECK(cached.feature_maps.size() == 15);
    CHECK(lazy.feature_maps.empty());
    const Dataset& ds = pipeline_dataset();
    for (int64_t pick : {0, 6, 14}) {
        const std::vector<int64_t>& q = ds.caption(cached.corpus_ids()[pick], 0).tokens;
        QueryResult a = run_query(cached, q);
        QueryResult b = run_query(lazy, q);
        REQUIRE(ids_of(a.items) == ids_of(b.items));
        for (size_t i = 0; i < a.items.size(); ++i) {
            CHECK(a.items[i].fast_score == b.items[i].fast_score);
            CHECK(a.items[i].slow_score == b.items[i].slow_score);
            CHECK(a.items[i].combined == b.items[i].combined);
        }
    }
}

TEST_CASE("quantized pipeline reranks on approximate fast scores") {
    const Dataset& ds = pipeline_dataset();
    PQCodebooks books = train_pq(test_corpus(), 2, 8, 10, 1);
    PQIndex idx = build_pq(test_corpus(), books);
    SlowParams slow = tiny_slow(ds, 21);
    PipelineConfig cfg;
    cfg.k = 15;
    cfg.beta = 0.0;
    RetrievalPipeline pipe =
        build_pipeline(tiny_fast(ds, 11), slow, idx, dataset_features(ds, slow), cfg);
    CHECK(pipe.kind == IndexKind::pq);
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[5], 0).tokens;

    RankedList adc = topk_pq(idx, embed_text(q, pipe.fast), 15);
    QueryResult shallow = run_query(pipe, q, 0, 0.0);
    REQUIRE(ids_of(shallow.items) == ids_of(adc));
    for (size_t i = 0; i < adc.size(); ++i)
        CHECK(shallow.items[i].fast_score == adc[i].score);

    RankedList oracle =
        exhaustive_slow_ranking(pipe.corpus_ids(), dataset_features(ds, slow), slow, q);
    QueryResult deep = run_query(pipe, q);
    CHECK(ids_of(deep.items) == ids_of(oracle));
}

TEST_CASE("identical pipelines give identical rankings") {
    RetrievalPipeline a = standard_pipeline(6, 0.4);
    RetrievalPipeline b = standard_pipeline(6, 0.4);
    const Dataset& ds = pipeline_dataset();
    const std::vector<int64_t>& q = ds.caption(a.corpus_ids()[8], 0).tokens;
    QueryResult ra = run_query(a, q);
    QueryResult rb = run_query(b, q);
    REQUIRE(ids_of(ra.items) == ids_of(rb.items));
    for (size_t i = 0; i < ra.items.size(); ++i) {
        CHECK(ra.items[i].fast_score == rb.items[i].fast_score);
        CHECK(ra.items[i].combined == rb.items[i].combined);
    }
}

TEST_CASE("thread cap reshapes nothing but the worker count") {
    unsetenv("FASTSLOW_THREADS");
    CHECK(query_threads() == 1);
    setenv("FASTSLOW_THREADS", "3", 1);
    CHECK(query_threads() == 3);
    RetrievalPipeline pipe = standard_pipeline(4, 0.1);
    std::vector<QuerySpec> queries = gold_queries(pipeline_dataset(), Split::test);
    CurveResult threaded = rerank_curve(pipe, queries, {2, 4}, {0.0, 0.1});
    unsetenv("FASTSLOW_THREADS");
    CurveResult serial = rerank_curve(pipe, queries, {2, 4}, {0.0, 0.1});
    REQUIRE(threaded.rows.size() == serial.rows.size());
    for (size_t i = 0; i < serial.rows.size(); ++i) {
        CHECK(threaded.rows[i].k == serial.rows[i].k);
        CHECK(threaded.rows[i].beta == serial.rows[i].beta);
        CHECK(threaded.rows[i].r1 == serial.rows[i].r1);
        CHECK(threaded.rows[i].r5 == serial.rows[i].r5);
        CHECK(threaded.rows[i].mean_slow_calls == serial.rows[i].mean_slow_calls);
    }
    double serial_rate = recall_rate(pipe, queries, 1, 4, 0.1);
    setenv("FASTSLOW_THREADS", "3", 1);
    CHECK(recall_rate(pipe, queries, 1, 4, 0.1) == serial_rate);
    setenv("FASTSLOW_THREADS", "abc", 1);
    CHECK_THROWS_AS(query_threads(), UsageError);
    setenv("FASTSLOW_THREADS", "0", 1);
    CHECK_THROWS_AS(query_threads(), UsageError);
    setenv("FASTSLOW_THREADS", "-2", 1);
    CHECK_THROWS_AS(query_threads(), UsageError);
    unsetenv("FASTSLOW_THREADS");
}

TEST_CASE("provider failures surface from queries") {
    const Dataset& ds = pipeline_dataset();
    SlowParams slow = tiny_slow(ds, 21);
    FeatureProvider broken = [](int64_t id) -> Tensor {
        throw DataError("feature store lost scene " + std::to_string(id));
    };
    PipelineConfig cfg;
    cfg.k = 3;
    cfg.precompute = false;
    RetrievalPipeline pipe =
        build_pipeline(tiny_fast(ds, 11), slow, build_exact(test_corpus()), broken, cfg);
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[0], 0).tokens;
    CHECK_THROWS_AS(run_query(pipe, q), DataError);
    QueryResult fast_only = run_query(pipe, q, 0, 0.0);  // never touches the provider
    CHECK(fast_only.items.size() == 15);
    setenv("FASTSLOW_THREADS", "3", 1);
    std::vector<QuerySpec> queries = gold_queries(ds, Split::test);
    CHECK_THROWS_AS(rerank_curve(pipe, queries, {3}, {0.0}), DataError);
    unsetenv("FASTSLOW_THREADS");
}

TEST_CASE("malformed pipelines and queries are rejected") {
    const Dataset& ds = pipeline_dataset();
    SlowParams slow = tiny_slow(ds, 21);
    FeatureProvider provider = dataset_features(ds, slow);
    PipelineConfig cfg;

    cfg.k = 0;
    CHECK_THROWS_AS(build_pipeline(tiny_fast(ds, 11), slow, build_exact(test_corpus()),
                                   provider, cfg),
                    UsageError);
    cfg.k = 3;
    cfg.beta = std::nan("");
    CHECK_THROWS_AS(build_pipeline(tiny_fast(ds, 11), slow, build_exact(test_corpus()),
                                   provider, cfg),
                    UsageError);
    cfg.beta = 0.0;
    CHECK_THROWS_AS(build_pipeline(tiny_fast(ds, 11), slow, build_exact(test_corpus()),
                                   FeatureProvider{}, cfg),
                    UsageError);
    CHECK_THROWS_AS(build_pipeline(tiny_fast(ds, 11), slow, ExactIndex{}, provider, cfg),
                    UsageError);

    cfg.k = 50;  // clamped to the corpus with a warning
    RetrievalPipeline clamped =
        build_pipeline(tiny_fast(ds, 11), slow, build_exact(test_corpus()), provider, cfg);
    CHECK(clamped.k == 15);

    RetrievalPipeline pipe = standard_pipeline(3, 0.0);
    CHECK_THROWS_WITH_AS(run_query(pipe, {}), doctest::Contains("empty"), UsageError);
    const std::vector<int64_t>& q = ds.caption(pipe.corpus_ids()[0], 0).tokens;
    CHECK_THROWS_AS(run_query(pipe, q, -1, 0.0), UsageError);
    CHECK_THROWS_AS(run_query(pipe, q, 3, std::nan("")), UsageError);

    // unknown words embed through the reserved row and still rank
    QueryResult unk = run_query(pipe, {Vocabulary::unk_id, q[0]});
    CHECK(unk.items.size() == 15);
    QueryResult all_unk = run_query(pipe, {Vocabulary::unk_id, Vocabulary::unk_id});
    CHECK(all_unk.items.size() == 15);

    FeatureProvider ds_provider = dataset_features(ds, slow);
    CHECK_THROWS_AS(ds_provider(999), DataError);
}

TEST_CASE("gold queries mirror the split") {
    const Dataset& ds = pipeline_dataset();
    std::vector<QuerySpec> queries = gold_queries(ds, Split::test);
    std::vector<int64_t> ids = ds.split_scene_ids(Split::test);
    REQUIRE(queries.size() == ids.size());
    for (size_t i = 0; i < queries.size(); ++i) {
        CHECK(queries[i].gold_id == ids[i]);
        CHECK(queries[i].tokens == ds.caption(ids[i], 0).tokens);
        if (i > 0) CHECK(queries[i].gold_id > queries[i - 1].gold_id);
    }
}

TEST_CASE("synthetic corpus pieces are deterministic") {
    CorpusEmbeddings a = synthetic_embeddings(50, 8, 9);
    CorpusEmbeddings b = synthetic_embeddings(50, 8, 9);
    REQUIRE(a.count() == 50);
    CHECK(a.dim == 8);
    for (int64_t i = 0; i < 50; ++i) CHECK(a.scene_ids[static_cast<size_t>(i)] == i);
    CHECK(std::memcmp(a.rows.data(), b.rows.data(), a.rows.size() * sizeof(float)) == 0);
    for (float v : a.rows) CHECK(std::isfinite(v));

    FeatureProvider feats = synthetic_features(4, 8, 9);
    Tensor f3 = feats(3);
    Tensor f3_again = feats(3);
    Tensor f4 = feats(4);
    CHECK(f3.shape == Shape{4, 4, 8});
    CHECK(std::memcmp(f3.data.data(), f3_again.data.data(),
                      f3.data.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(f3.data.data(), f4.data.data(), f3.data.size() * sizeof(double)) != 0);

    std::vector<QuerySpec> qs = synthetic_queries(10, 30, 5, 4);
    REQUIRE(qs.size() == 10);
    for (const auto& s : qs) {
        REQUIRE(s.tokens.size() == 5);
        for (int64_t t : s.tokens) {
            CHECK(t >= 4);
            CHECK(t < 30);
        }
    }
    std::vector<QuerySpec> qs2 = synthetic_queries(10, 30, 5, 4);
    for (size_t i = 0; i < qs.size(); ++i) CHECK(qs[i].tokens == qs2[i].tokens);

    CHECK_THROWS_AS(synthetic_embeddings(0, 8, 9), UsageError);
    CHECK_THROWS_AS(synthetic_embeddings(5, 0, 9), UsageError);
    CHECK_THROWS_AS(synthetic_features(0, 8, 9), UsageError);
    CHECK_THROWS_AS(synthetic_queries(3, 4, 5, 9), UsageError);
    CHECK_THROWS_AS(synthetic_queries(3, 30, 0, 9), UsageError);
}

TEST_CASE("line fit recovers exact and known fits") {
    LineFit exact = fit_line({1.0, 2.0, 3.0, 4.0}, {4.0, 7.0, 10.0, 13.0});
    CHECK(exact.slope == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(exact.intercept == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(exact.r2 == doctest::Approx(1.0).epsilon(1e-12));

    // hand calculation: slope 1/2, intercept 1/6, residual 1/6, total 2/3
    LineFit known = fit_line({0.0, 1.0, 2.0}, {0.0, 1.0, 1.0});
    CHECK(known.slope == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(known.intercept == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(known.r2 == doctest::Approx(0.75).epsilon(1e-12));

    LineFit flat = fit_line({0.0, 1.0, 2.0}, {2.0, 2.0, 2.0});
    CHECK(flat.slope == doctest::Approx(0.0));
    CHECK(flat.r2 == 1.0);

    CHECK_THROWS_AS(fit_line({1.0}, {1.0}), UsageError);
    CHECK_THROWS_AS(fit_line({1.0, 2.0}, {1.0}), UsageError);
    CHECK_THROWS_AS(fit_line({2.0, 2.0}, {1.0, 3.0}), UsageError);
}

TEST_CASE("benchmark arms and speedups") {
    RetrievalPipeline pipe = standard_pipeline(10, 0.0);
    std::vector<QuerySpec> queries = gold_queries(pipeline_dataset(), Split::test);
    queries.resize(4);
    BenchOptions opts;
    opts.warmups = 1;
    opts.ks = {3};
    opts.slow_query_cap = 2;
    BenchReport rep = run_benchmark(pipe, queries, opts);
    CHECK(rep.corpus == 15);
    CHECK(rep.warmups == 1);
    REQUIRE(rep.arms.size() == 3);
    CHECK(rep.arms[0].label == "fast");
    CHECK(rep.arms[0].k == 0);
    CHECK(rep.arms[0].queries == 4);
    CHECK(rep.arms[1].label == "fast&slow k=3");
    CHECK(rep.arms[1].k == 3);
    CHECK(rep.arms[2].label == "slow");
    CHECK(rep.arms[2].k == 15);
    CHECK(rep.arms[2].queries == 2);
    for (const auto& arm : rep.arms) {
        CHECK(arm.median_ms >= 0.0);
        CHECK(arm.p95_ms >= arm.median_ms);
        CHECK(std::isfinite(arm.p95_ms));
        CHECK(arm.median_rerank_ms <= arm.median_ms + 1e-9);
    }
    REQUIRE(rep.speedups.size() == 1);
    CHECK(rep.speedups[0] > 0.0);
    std::string table = rep.table();
    CHECK(table.find("fast&slow k=3") != std::string::npos);
    CHECK(table.find("speedup") != std::string::npos);

    BenchOptions no_slow = opts;
    no_slow.include_slow = false;
    BenchReport partial = run_benchmark(pipe, queries, no_slow);
    CHECK(partial.arms.size() == 2);
    CHECK(partial.speedups.empty());

    BenchOptions bad = opts;
    bad.warmups = -1;
    CHECK_THROWS_AS(run_benchmark(pipe, queries, bad), UsageError);
    bad = opts;
    bad.ks = {0};
    CHECK_THROWS_AS(run_benchmark(pipe, queries, bad), UsageError);
    CHECK_THROWS_AS(run_benchmark(pipe, {}, opts), UsageError);
}
