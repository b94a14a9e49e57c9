#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fastslow/dataset.hpp"
#include "fastslow/encoders.hpp"
#include "fastslow/index.hpp"
#include "fastslow/slow_model.hpp"
#include "fastslow/trainer.hpp"

namespace fastslow {

// Supplies the visual features the slow stage reads for one corpus item.
// Must be pure: the same id always yields the same features. Builders wire
// this to dataset renders or to synthetic maps in benchmarks.
using FeatureProvider = std::function<Tensor(int64_t scene_id)>;

// Provider that renders a scene and encodes it at the resolution the scorer
// consumes. Owns a copy of the dataset, so it outlives the caller's handle.
FeatureProvider dataset_features(const Dataset& ds, const SlowParams& slow);

// Synthetic corpus pieces for scaling benchmarks: unit-gaussian embedding
// rows with ids 0..count-1, per-id deterministic feature maps, and random
// content-token queries (gold ids are placeholders).
CorpusEmbeddings synthetic_embeddings(int64_t count, int64_t dim, uint64_t seed);
FeatureProvider synthetic_features(int resolution, int width, uint64_t seed);

enum class Stage : uint8_t { reranked = 0, fast = 1 };

// One row of a final ranking. The slow and combined scores are meaningful
// only for rows the slow stage visited (stage == reranked).
struct Candidate {
    int64_t scene_id = 0;
    double fast_score = 0.0;  // index score; quantized under a pq index
    double slow_score = 0.0;  // valid iff stage == reranked
    double combined = 0.0;    // slow + beta * fast; valid iff stage == reranked
    Stage stage = Stage::fast;
};

struct QueryStats {
    int64_t slow_invocations = 0;
    double index_ms = 0.0;   // ranking every item by the fast score
    double rerank_ms = 0.0;  // scoring and reordering the top block
    double total_ms = 0.0;
};

struct QueryResult {
    std::vector<Candidate> items;  // every corpus item, final order
    QueryStats stats;
};

struct PipelineConfig {
    int64_t k = 10;          // re-rank budget
    double beta = 0.0;       // weight on the fast score inside the block
    bool precompute = true;  // encode and cache corpus features at build
};

// Two-stage scorer. The index ranks the whole corpus by the fast score, the
// slow model re-orders the top block by slow + beta * fast with ties toward
// the smaller id, and the tail keeps its fast order so recall is defined at
// every depth. Immutable after build; queries are const and deterministic.
struct RetrievalPipeline {
    DualEncoderParams fast;
    SlowParams slow;
    IndexKind kind = IndexKind::exact;
    ExactIndex exact;  // active iff kind == exact
    PQIndex pq;        // active iff kind == pq
    int64_t k = 10;
    double beta = 0.0;
    bool precompute = true;
    FeatureProvider features;

    // Build-time caches, parallel to corpus order; empty when !precompute.
    std::vector<Tensor> feature_maps;
    std::vector<FeatureCache> fwd_caches;
    std::vector<FeatureCache> bwd_caches;
    std::unordered_map<int64_t, int64_t> slots;  // scene id -> cache row

    int64_t corpus_size() const;
    const std::vector<int64_t>& corpus_ids() const;
};

RetrievalPipeline build_pipeline(DualEncoderParams fast, SlowParams slow, ExactIndex index,
                                 FeatureProvider features, const PipelineConfig& cfg);
RetrievalPipeline build_pipeline(DualEncoderParams fast, SlowParams slow, PQIndex index,
                                 FeatureProvider features, const PipelineConfig& cfg);

// Runs one query at an explicit operating point. k = 0 skips the slow stage
// entirely (pure fast ranking); k beyond the corpus size is clamped with a
// warning. An empty caption is an error.
QueryResult run_query(const RetrievalPipeline& pipe, const std::vector<int64_t>& tokens,
                      int64_t k, double beta);
// The pipeline's configured operating point.
QueryResult run_query(const RetrievalPipeline& pipe, const std::vector<int64_t>& tokens);

// Reference ranking for tests and the slow-only arm: every item scored by
// the slow model alone, no index and no caches, sorted by score descending
// with ties toward the smaller id.
RankedList exhaustive_slow_ranking(const std::vector<int64_t>& scene_ids,
                                   const FeatureProvider& features, const SlowParams& slow,
                                   const std::vector<int64_t>& tokens);

// 1 if gold_id sits within the first k rows, else 0. k < 1 is an error.
int recall_at_k(const std::vector<Candidate>& items, int64_t gold_id, int64_t k);
int recall_at_k(const RankedList& items, int64_t gold_id, int64_t k);

struct QuerySpec {
    std::vector<int64_t> tokens;  // content ids, no sentinels
    int64_t gold_id = 0;
};

// Gold captions of one split as queries, ascending scene id.
std::vector<QuerySpec> gold_queries(const Dataset& ds, Split split);
std::vector<QuerySpec> synthetic_queries(int64_t count, int64_t vocab, int length,
                                         uint64_t seed);

// Mean recall@depth over a query set at one (k, beta) operating point.
double recall_rate(const RetrievalPipeline& pipe, const std::vector<QuerySpec>& queries,
                   int64_t depth, int64_t k, double beta);

struct CurveRow {
    int64_t k = 0;
    double beta = 0.0;
    double r1 = 0.0;
    double r5 = 0.0;
    double mean_slow_calls = 0.0;
    double mean_wall_ms = 0.0;
};

struct CurveResult {
    std::vector<CurveRow> rows;
    CsvLog csv() const;  // columns K,beta,R1,R5,mean_slow_calls,mean_wall_ms
};

// Sweeps the re-rank budget and mixing weight over one query set. The first
// row is the fast-only reference (k = 0), the last the slow-only reference
// (k = corpus size, beta = 0); grid rows keep caller order, budget-major.
CurveResult rerank_curve(const RetrievalPipeline& pipe, const std::vector<QuerySpec>& queries,
                         const std::vector<int64_t>& ks, const std::vector<double>& betas);

struct BenchArm {
    std::string label;
    int64_t k = 0;  // re-rank budget the arm ran at; 0 = fast only
    int64_t queries = 0;
    double median_ms = 0.0;
    double p95_ms = 0.0;
    double median_rerank_ms = 0.0;  // slow-stage share of the median path
};

struct BenchOptions {
    int warmups = 3;                 // unmeasured queries before each arm
    std::vector<int64_t> ks = {10};  // fast&slow arms to time
    bool include_fast = true;
    bool include_slow = true;
    int64_t slow_query_cap = 0;  // 0 = measure every query in the slow arm
};

struct BenchReport {
    int64_t corpus = 0;
    int warmups = 0;
    std::vector<BenchArm> arms;    // fast, fast&slow per k, slow last
    std::vector<double> speedups;  // slow median / fast&slow median, per k
    std::string table() const;     // aligned human-readable rendering
};

BenchReport run_benchmark(const RetrievalPipeline& pipe, const std::vector<QuerySpec>& queries,
                          const BenchOptions& opts);

// Least-squares line with the coefficient of determination.
struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};
LineFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys);

// Worker count for query sweeps, from FASTSLOW_THREADS (default 1). Sweep
// results are index-addressed and reduced sequentially, so the outcome is
// identical at any thread count.
int query_threads();

}  // namespace fastslow
