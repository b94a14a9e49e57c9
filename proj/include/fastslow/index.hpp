#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastslow/fast_model.hpp"
#include "fastslow/tensor.hpp"

namespace fastslow {

struct ScoredItem {
    int64_t scene_id = 0;
    double score = 0.0;
};
using RankedList = std::vector<ScoredItem>;

// Flat inner-product index: float32 rows, scores accumulated in float32 and
// compared as float64, ties broken toward the smaller scene id. Immutable
// once built.
struct ExactIndex {
    int64_t dim = 0;
    std::vector<int64_t> scene_ids;
    std::vector<float> rows;  // count x dim

    int64_t count() const { return static_cast<int64_t>(scene_ids.size()); }
};

ExactIndex build_exact(const CorpusEmbeddings& emb);
RankedList topk_exact(const ExactIndex& idx, const Tensor& query, int64_t k);

// Per-sub-space k-means codebooks plus the quantization-error trace that
// produced them (mean squared reconstruction error per Lloyd iteration).
struct PQCodebooks {
    int64_t m = 0, kc = 0, dsub = 0;
    std::vector<float> centroids;                     // m x kc x dsub
    std::vector<double> mean_error;                   // per sub-space, final
    std::vector<std::vector<double>> error_per_iter;  // [sub-space][iteration]
};

// Seeds each sub-space with distance-weighted picks from its own rng stream
// and runs exactly `iters` Lloyd iterations. Deterministic; the error trace
// never increases between iterations.
PQCodebooks train_pq(const CorpusEmbeddings& emb, int m, int kc, int iters, uint64_t seed);

struct PQIndex {
    int64_t dim = 0, m = 0, kc = 0, dsub = 0;
    std::vector<int64_t> scene_ids;
    std::vector<float> centroids;  // m x kc x dsub
    std::vector<uint8_t> codes;    // count x m

    int64_t count() const { return static_cast<int64_t>(scene_ids.size()); }
};

PQIndex build_pq(const CorpusEmbeddings& emb, const PQCodebooks& books);

// Instrumentation for the asymmetric scoring path: table_dots counts
// query-centroid inner products (m * kc), code_lookups counts per-item table
// adds (count * m).
struct PQQueryStats {
    int64_t table_dots = 0;
    int64_t code_lookups = 0;
};

RankedList topk_pq(const PQIndex& idx, const Tensor& query, int64_t k,
                   PQQueryStats* stats = nullptr);

// The codebook vector an item decodes to.
std::vector<float> reconstruct_pq(const PQIndex& idx, int64_t item);

// Binary container: magic FSIDX1, a kind byte, parameters/ids/payload, and a
// trailing checksum over everything after the magic. One file holds one kind.
enum class IndexKind : uint8_t { exact = 0, pq = 1 };

void save_exact_index(const ExactIndex& idx, const std::string& path);
void save_pq_index(const PQIndex& idx, const std::string& path);
IndexKind peek_index_kind(const std::string& path);
ExactIndex load_exact_index(const std::string& path);
PQIndex load_pq_index(const std::string& path);

}  // namespace fastslow
