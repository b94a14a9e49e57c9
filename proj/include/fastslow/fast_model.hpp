#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastslow/dataset.hpp"
#include "fastslow/encoders.hpp"
#include "fastslow/tensor.hpp"
#include "fastslow/trainer.hpp"

namespace fastslow {

// Noise-contrastive loss over a batch of matched (image, text) embedding
// pairs. For pair i the candidates are its own score plus every in-batch
// cross pairing (x_j, y_i) and (x_i, y_j), j != i; the loss sums
// -log softmax(candidates)[positive] over pairs. Computed max-subtracted.
// A batch of one pair has no negatives and scores exactly zero.
Tensor nce_loss(const std::vector<Tensor>& image_embeds,
                const std::vector<Tensor>& text_embeds);

struct TrainFastConfig {
    ImageEncoderConfig enc;
    int embed_dim = 64;
    int steps = 2000;
    int batch = 8;
    OptimConfig optim{.lr = 1e-3, .warmup_steps = 100, .total_steps = 0};
    uint64_t seed = 0;
    std::string csv_path;  // per-step loss log; empty skips
    std::string ckpt_path;  // final checkpoint; empty skips
};

// Trains the dual encoder with in-batch negatives. Batches draw distinct
// scenes so no negative duplicates a positive. Deterministic per seed;
// logs step,loss,lr,seconds; aborts with step/batch context on non-finite.
DualEncoderParams train_fast(const Dataset& ds, const TrainFastConfig& cfg);

// Image embeddings of one dataset split, rows in ascending scene id,
// narrowed to float32 for storage and indexing.
struct CorpusEmbeddings {
    int64_t dim = 0;
    std::vector<int64_t> scene_ids;  // ascending
    std::vector<float> rows;         // scene_ids.size() x dim

    int64_t count() const { return static_cast<int64_t>(scene_ids.size()); }
};

CorpusEmbeddings embed_corpus(const Dataset& ds, Split split,
                              const DualEncoderParams& params);

// Binary container: magic FSEMB1, u64 count, u64 dim, i64 ids, f32 rows,
// trailing 64-bit checksum of the row bytes. Writes atomically.
void save_embeddings(const CorpusEmbeddings& emb, const std::string& path);
CorpusEmbeddings load_embeddings(const std::string& path);

}  // namespace fastslow
