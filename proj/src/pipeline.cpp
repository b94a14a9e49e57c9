#include "fastslow/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace fastslow {

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
}

bool combined_before(const Candidate& a, const Candidate& b) {
    if (a.combined != b.combined) return a.combined > b.combined;
    return a.scene_id < b.scene_id;
}

bool scored_before(const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.scene_id < b.scene_id;
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// nearest-rank 95th percentile
double p95_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t idx = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(v.size()))) - 1;
    return v[idx];
}

// Runs fn(0..n-1), spread over query_threads() workers. Results must be
// written to caller-owned slots indexed by i so the outcome is identical at
// any worker count; the first exception is rethrown after the join.
void for_each_query(int64_t n, const std::function<void(int64_t)>& fn) {
    int64_t workers = std::min<int64_t>(query_threads(), n);
    if (workers <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto drain = [&] {
        for (;;) {
            int64_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int64_t w = 0; w < workers; ++w) pool.emplace_back(drain);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// Slow score of one corpus item, through the cache when the pipeline holds
// one and through the provider otherwise. framed carries BOS/EOS already.
double slow_score_of(const RetrievalPipeline& pipe, int64_t scene_id,
                     const std::vector<int64_t>& framed) {
    if (pipe.precompute) {
        auto it = pipe.slots.find(scene_id);
        if (it == pipe.slots.end())
            throw DataError("pipeline cache is missing scene " + std::to_string(scene_id));
        size_t s = static_cast<size_t>(it->second);
        return caption_score(pipe.feature_maps[s], framed, pipe.slow, &pipe.fwd_caches[s],
                             &pipe.bwd_caches[s])
            .value();
    }
    Tensor features = pipe.features(scene_id);
    return caption_score(features, framed, pipe.slow).value();
}

void finish_build(RetrievalPipeline& pipe, const PipelineConfig& cfg) {
    const int64_t n = pipe.corpus_size();
    if (n < 1) throw UsageError("pipeline requires a non-empty index");
    if (!pipe.features) throw UsageError("pipeline requires a feature provider");
    if (cfg.k < 1) throw UsageError("rerank budget must be at least 1");
    if (!std::isfinite(cfg.beta)) throw UsageError("beta must be finite");
    pipe.k = cfg.k;
    pipe.beta = cfg.beta;
    pipe.precompute = cfg.precompute;
    if (pipe.k > n) {
        std::fprintf(stderr,
                     "warning: rerank budget %lld exceeds corpus size %lld, clamping\n",
                     static_cast<long long>(pipe.k), static_cast<long long>(n));
        pipe.k = n;
    }
    if (!pipe.precompute) return;
    const std::vector<int64_t>& ids = pipe.corpus_ids();
    pipe.feature_maps.reserve(ids.size());
    pipe.fwd_caches.reserve(ids.size());
    pipe.bwd_caches.reserve(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        Tensor features = pipe.features(ids[i]);
        pipe.fwd_caches.push_back(make_feature_cache(features, pipe.slow.fwd));
        pipe.bwd_caches.push_back(make_feature_cache(features, pipe.slow.bwd));
        pipe.feature_maps.push_back(std::move(features));
        pipe.slots.emplace(ids[i], static_cast<int64_t>(i));
    }
}

}  // namespace

FeatureProvider dataset_features(const Dataset& ds, const SlowParams& slow) {
    ImageEncoderParams image = slow.image;
    int resolution = slow.target_resolution;
    return [ds, image, resolution](int64_t id) -> Tensor {
        if (id < 0 || id >= static_cast<int64_t>(ds.scenes.size()))
            throw DataError("feature provider has no scene " + std::to_string(id));
        Tensor render = render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg);
        return encode_image(render, image, resolution);
    };
}

CorpusEmbeddings synthetic_embeddings(int64_t count, int64_t dim, uint64_t seed) {
    if (count < 1) throw UsageError("synthetic corpus needs at least one item");
    if (dim < 1) throw UsageError("synthetic corpus needs a positive dimension");
    CorpusEmbeddings emb;
    emb.dim = dim;
    emb.scene_ids.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) emb.scene_ids[static_cast<size_t>(i)] = i;
    emb.rows.resize(static_cast<size_t>(count * dim));
    Rng rng(seed);
    for (float& v : emb.rows) v = static_cast<float>(rng.normal());
    return emb;
}

FeatureProvider synthetic_features(int resolution, int width, uint64_t seed) {
    if (resolution < 1 || width < 1)
        throw UsageError("synthetic features need a positive resolution and width");
    return [resolution, width, seed](int64_t id) -> Tensor {
        Rng rng = Rng(seed).child(static_cast<uint64_t>(id));
        return Tensor::uniform({resolution, resolution, width}, rng, -1.0, 1.0);
    };
}

std::vector<QuerySpec> synthetic_queries(int64_t count, int64_t vocab, int length,
                                         uint64_t seed) {
    if (vocab <= 4) throw UsageError("vocabulary must extend beyond the reserved ids");
    if (length < 1) throw UsageError("synthetic queries need a positive length");
    Rng rng(seed);
    std::vector<QuerySpec> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        QuerySpec q;
        q.gold_id = i;
        q.tokens.reserve(static_cast<size_t>(length));
        for (int j = 0; j < length; ++j)
            q.tokens.push_back(4 + static_cast<int64_t>(
                                       rng.uniform_int(static_cast<uint64_t>(vocab - 4))));
        out.push_back(std::move(q));
    }
    return out;
}

int64_t RetrievalPipeline::corpus_size() const {
    return kind == IndexKind::exact ? exact.count() : pq.count();
}

const std::vector<int64_t>& RetrievalPipeline::corpus_ids() const {
    return kind == IndexKind::exact ? exact.scene_ids : pq.scene_ids;
}

RetrievalPipeline build_pipeline(DualEncoderParams fast, SlowParams slow, ExactIndex index,
                                 FeatureProvider features, const PipelineConfig& cfg) {
    RetrievalPipeline pipe;
    pipe.fast = std::move(fast);
    pipe.slow = std::move(slow);
    pipe.kind = IndexKind::exact;
    pipe.exact = std::move(index);
    pipe.features = std::move(features);
    finish_build(pipe, cfg);
    return pipe;
}

RetrievalPipeline build_pipeline(DualEncoderParams fast, SlowParams slow, PQIndex index,
                                 FeatureProvider features, const PipelineConfig& cfg) {
    RetrievalPipeline pipe;
    pipe.fast = std::move(fast);
    pipe.slow = std::move(slow);
    pipe.kind = IndexKind::pq;
    pipe.pq = std::move(index);
    pipe.features = std::move(features);
    finish_build(pipe, cfg);
    return pipe;
}

QueryResult run_query(const RetrievalPipeline& pipe, const std::vector<int64_t>& tokens,
                      int64_t k, double beta) {
    if (tokens.empty()) throw UsageError("query caption is empty");
    if (!std::isfinite(beta)) throw UsageError("beta must be finite");
    if (k < 0) throw UsageError("rerank budget must be non-negative");
    const int64_t n = pipe.corpus_size();
    if (k > n) {
        std::fprintf(stderr,
                     "warning: rerank budget %lld exceeds corpus size %lld, clamping\n",
                     static_cast<long long>(k), static_cast<long long>(n));
        k = n;
    }

    auto t0 = Clock::now();
    Tensor g = embed_text(tokens, pipe.fast);
    auto t1 = Clock::now();
    RankedList order = pipe.kind == IndexKind::exact ? topk_exact(pipe.exact, g, n)
                                                     : topk_pq(pipe.pq, g, n);
    auto t2 = Clock::now();

    QueryResult res;
    res.items.resize(static_cast<size_t>(n));
    std::vector<int64_t> framed = with_sentinels(tokens);
    int64_t calls = 0;
    for (int64_t i = 0; i < k; ++i) {
        const ScoredItem& s = order[static_cast<size_t>(i)];
        double h = slow_score_of(pipe, s.scene_id, framed);
        ++calls;
        res.items[static_cast<size_t>(i)] =
            Candidate{s.scene_id, s.score, h, h + beta * s.score, Stage::reranked};
    }
    std::sort(res.items.begin(), res.items.begin() + k, combined_before);
    for (int64_t i = k; i < n; ++i) {
        const ScoredItem& s = order[static_cast<size_t>(i)];
        res.items[static_cast<size_t>(i)] = Candidate{s.scene_id, s.score, 0.0, 0.0, Stage::fast};
    }
    auto t3 = Clock::now();

    res.stats.slow_invocations = calls;
    res.stats.index_ms = ms_between(t1, t2);
    res.stats.rerank_ms = ms_between(t2, t3);
    res.stats.total_ms = ms_between(t0, t3);
    return res;
}

QueryResult run_query(const RetrievalPipeline& pipe, const std::vector<int64_t>& tokens) {
    return run_query(pipe, tokens, pipe.k, pipe.beta);
}

RankedList exhaustive_slow_ranking(const std::vector<int64_t>& scene_ids,
                                   const FeatureProvider& features, const SlowParams& slow,
                                   const std::vector<int64_t>& tokens) {
    if (tokens.empty()) throw UsageError("query caption is empty");
    if (!features) throw UsageError("exhaustive ranking requires a feature provider");
    std::vector<int64_t> framed = with_sentinels(tokens);
    RankedList out;
    out.reserve(scene_ids.size());
    for (int64_t id : scene_ids) {
        Tensor f = features(id);
        out.push_back({id, caption_score(f, framed, slow).value()});
    }
    std::sort(out.begin(), out.end(), scored_before);
    return out;
}

int recall_at_k(const std::vector<Candidate>& items, int64_t gold_id, int64_t k) {
    if (k < 1) throw UsageError("recall depth must be at least 1");
    int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(items.size()));
    for (int64_t i = 0; i < depth; ++i)
        if (items[static_cast<size_t>(i)].scene_id == gold_id) return 1;
    return 0;
}

int recall_at_k(const RankedList& items, int64_t gold_id, int64_t k) {
    if (k < 1) throw UsageError("recall depth must be at least 1");
    int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(items.size()));
    for (int64_t i = 0; i < depth; ++i)
        if (items[static_cast<size_t>(i)].scene_id == gold_id) return 1;
    return 0;
}

std::vector<QuerySpec> gold_queries(const Dataset& ds, Split split) {
    std::vector<QuerySpec> out;
    for (int64_t id : ds.split_scene_ids(split)) out.push_back({ds.caption(id, 0).tokens, id});
    return out;
}

double recall_rate(const RetrievalPipeline& pipe, const std::vector<QuerySpec>& queries,
                   int64_t depth, int64_t k, double beta) {
    if (queries.empty()) throw UsageError("recall needs at least one query");
    if (depth < 1) throw UsageError("recall depth must be at least 1");
    std::vector<int> hits(queries.size(), 0);
    for_each_query(static_cast<int64_t>(queries.size()), [&](int64_t i) {
        size_t s = static_cast<size_t>(i);
        QueryResult r = run_query(pipe, queries[s].tokens, k, beta);
        hits[s] = recall_at_k(r.items, queries[s].gold_id, depth);
    });
    int total = 0;
    for (int h : hits) total += h;
    return static_cast<double>(total) / static_cast<double>(queries.size());
}

CsvLog CurveResult::csv() const {
    CsvLog log({"K", "beta", "R1", "R5", "mean_slow_calls", "mean_wall_ms"});
    for (const CurveRow& r : rows)
        log.add_row({std::to_string(r.k), format_double(r.beta), format_double(r.r1),
                     format_double(r.r5), format_double(r.mean_slow_calls),
                     format_double(r.mean_wall_ms)});
    return log;
}

CurveResult rerank_curve(const RetrievalPipeline& pipe, const std::vector<QuerySpec>& queries,
                         const std::vector<int64_t>& ks, const std::vector<double>& betas) {
    const int64_t n = pipe.corpus_size();
    if (queries.empty()) throw UsageError("rerank curve needs at least one query");
    if (ks.empty() || betas.empty())
        throw UsageError("rerank curve needs at least one budget and one mixing weight");
    for (int64_t k : ks)
        if (k < 1 || k > n)
            throw UsageError("rerank budget " + std::to_string(k) + " outside [1, " +
                             std::to_string(n) + "]");
    for (double b : betas)
        if (!std::isfinite(b)) throw UsageError("beta must be finite");

    auto eval_row = [&](int64_t k, double beta) -> CurveRow {
        const int64_t nq = static_cast<int64_t>(queries.size());
        std::vector<int> r1(queries.size(), 0), r5(queries.size(), 0);
        std::vector<int64_t> calls(queries.size(), 0);
        std::vector<double> wall(queries.size(), 0.0);
        for_each_query(nq, [&](int64_t i) {
            size_t s = static_cast<size_t>(i);
            QueryResult r = run_query(pipe, queries[s].tokens, k, beta);
            r1[s] = recall_at_k(r.items, queries[s].gold_id, 1);
            r5[s] = recall_at_k(r.items, queries[s].gold_id, 5);
            calls[s] = r.stats.slow_invocations;
            wall[s] = r.stats.total_ms;
        });
        int64_t hits1 = 0, hits5 = 0, total_calls = 0;
        double total_wall = 0.0;
        for (size_t i = 0; i < queries.size(); ++i) {
            hits1 += r1[i];
            hits5 += r5[i];
            total_calls += calls[i];
            total_wall += wall[i];
        }
        double dq = static_cast<double>(nq);
        return CurveRow{k,
                        beta,
                        static_cast<double>(hits1) / dq,
                        static_cast<double>(hits5) / dq,
                        static_cast<double>(total_calls) / dq,
                        total_wall / dq};
    };

    CurveResult out;
    out.rows.push_back(eval_row(0, 0.0));  // fast-only reference
    for (int64_t k : ks)
        for (double b : betas) out.rows.push_back(eval_row(k, b));
    out.rows.push_back(eval_row(n, 0.0));  // slow-only reference
    return out;
}

BenchReport run_benchmark(const RetrievalPipeline& pipe, const std::vector<QuerySpec>& queries,
                          const BenchOptions& opts) {
    const int64_t n = pipe.corpus_size();
    const int64_t nq = static_cast<int64_t>(queries.size());
    if (nq < 1) throw UsageError("benchmark needs at least one query");
    if (opts.warmups < 0) throw UsageError("warmup count must be non-negative");
    for (int64_t k : opts.ks)
        if (k < 1 || k > n)
            throw UsageError("rerank budget " + std::to_string(k) + " outside [1, " +
                             std::to_string(n) + "]");

    auto time_arm = [&](const std::string& label, int64_t k, double beta,
                        int64_t cap) -> BenchArm {
        for (int w = 0; w < opts.warmups; ++w)
            run_query(pipe, queries[static_cast<size_t>(w % nq)].tokens, k, beta);
        int64_t measured = cap > 0 ? std::min(cap, nq) : nq;
        std::vector<double> totals, reranks;
        totals.reserve(static_cast<size_t>(measured));
        reranks.reserve(static_cast<size_t>(measured));
        for (int64_t i = 0; i < measured; ++i) {
            QueryResult r = run_query(pipe, queries[static_cast<size_t>(i)].tokens, k, beta);
            totals.push_back(r.stats.total_ms);
            reranks.push_back(r.stats.rerank_ms);
        }
        return BenchArm{label,          k, measured, median_of(totals), p95_of(totals),
                        median_of(reranks)};
    };

    BenchReport rep;
    rep.corpus = n;
    rep.warmups = opts.warmups;
    if (opts.include_fast) rep.arms.push_back(time_arm("fast", 0, 0.0, 0));
    size_t first_mixed = rep.arms.size();
    for (int64_t k : opts.ks)
        rep.arms.push_back(time_arm("fast&slow k=" + std::to_string(k), k, pipe.beta, 0));
    if (opts.include_slow) {
        rep.arms.push_back(time_arm("slow", n, 0.0, opts.slow_query_cap));
        double slow_median = rep.arms.back().median_ms;
        for (size_t i = 0; i < opts.ks.size(); ++i)
            rep.speedups.push_back(slow_median / rep.arms[first_mixed + i].median_ms);
    }
    return rep;
}

std::string BenchReport::table() const {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "corpus %lld items, warmups %d\n",
                  static_cast<long long>(corpus), warmups);
    out += buf;
    std::snprintf(buf, sizeof buf, "%-16s %8s %8s %12s %12s %12s\n", "arm", "k", "queries",
                  "median_ms", "p95_ms", "rerank_ms");
    out += buf;
    for (const BenchArm& a : arms) {
        std::snprintf(buf, sizeof buf, "%-16s %8lld %8lld %12.3f %12.3f %12.3f\n",
                      a.label.c_str(), static_cast<long long>(a.k),
                      static_cast<long long>(a.queries), a.median_ms, a.p95_ms,
                      a.median_rerank_ms);
        out += buf;
    }
    size_t si = 0;
    for (const BenchArm& a : arms) {
        if (a.label.rfind("fast&slow", 0) != 0 || si >= speedups.size()) continue;
        std::snprintf(buf, sizeof buf, "speedup slow / %s: %.1fx\n", a.label.c_str(),
                      speedups[si++]);
        out += buf;
    }
    return out;
}

LineFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw UsageError("line fit needs matching sample counts");
    if (xs.size() < 2) throw UsageError("line fit needs at least two points");
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(xs.size());
    my /= static_cast<double>(xs.size());
    double sxx = 0.0, sxy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx == 0.0) throw UsageError("line fit needs varying x values");
    LineFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ssr = 0.0, sst = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        double e = ys[i] - (fit.intercept + fit.slope * xs[i]);
        ssr += e * e;
        sst += (ys[i] - my) * (ys[i] - my);
    }
    fit.r2 = sst == 0.0 ? (ssr == 0.0 ? 1.0 : 0.0) : 1.0 - ssr / sst;
    return fit;
}

int query_threads() {
    const char* env = std::getenv("FASTSLOW_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
        throw UsageError("FASTSLOW_THREADS must be a positive integer");
    return static_cast<int>(std::min<long>(v, 256));
}

}  // namespace fastslow
