#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastslow/dataset.hpp"
#include "fastslow/distill.hpp"
#include "fastslow/fast_model.hpp"
#include "fastslow/slow_model.hpp"
#include "fastslow/trainer.hpp"

namespace fastslow {

// One training section of the run file: schedule plus optimizer.
struct TrainSection {
    int steps = 2000;
    int batch = 8;
    OptimConfig optim;

    bool operator==(const TrainSection&) const = default;
};

// The whole declarative run description. Parsed from an ini-style text file
// of `[section]` headers and `key = value` lines; unknown sections, unknown
// keys, duplicate keys, and malformed values are all rejected with the line
// number. Serialization is canonical, so a resolved config re-parses to the
// same value.
struct RunConfig {
    // [run]
    uint64_t seed = 0;
    std::string out_dir = "run";

    // [dataset]
    DatasetConfig dataset;

    // [model]
    int embed_dim = 64;
    std::vector<int> widths = {16, 32, 64};
    int dm = 64;
    int heads = 4;
    int layers = 2;
    int max_positions = 16;
    int target_resolution = 8;
    bool share_token_table = false;

    // [train_fast] / [train_slow] / [distill]
    TrainSection train_fast{2000, 8, OptimConfig{.lr = 1e-3, .warmup_steps = 100}};
    TrainSection train_slow{2000, 8, OptimConfig{.lr = 3e-4, .warmup_steps = 100}};
    TrainSection distill{2000, 8, OptimConfig{.lr = 1e-3, .warmup_steps = 100}};
    double tau = 10.0;
    double alpha_over_tau2 = 0.001;

    // [index]
    std::string index_kind = "exact";  // exact | pq
    int index_m = 8;
    int index_kc = 64;
    int index_iters = 15;

    // [pipeline]
    int64_t k = 10;
    double beta = 0.0;
    bool precompute = true;
    std::vector<int64_t> curve_ks = {1, 2, 5, 10, 20, 50};
    std::vector<double> curve_betas = {0.0, 0.5, 1.0};

    // [bench]
    int bench_warmups = 3;
    std::vector<int64_t> bench_ks = {10};
    int64_t bench_queries = 20;       // queries timed per arm
    int64_t bench_slow_queries = 3;   // cap on the exhaustive arm; 0 = all
    std::vector<int64_t> synthetic_items;  // non-empty: bench synthetic corpora
    int64_t synthetic_vocab = 32;
    int synthetic_query_len = 6;

    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// Artifact locations inside cfg.out_dir, one name per producing command.
struct RunPaths {
    std::string dir;
    std::string resolved;     // resolved.ini, written by every command
    std::string dataset;      // dataset.jsonl
    std::string slow_ckpt;    // slow.ckpt
    std::string slow_csv;     // slow_train.csv
    std::string fast_ckpt;    // fast.ckpt
    std::string fast_csv;     // fast_train.csv
    std::string distilled_ckpt;  // distilled.ckpt
    std::string distill_csv;     // distill_train.csv
    std::string embeddings;   // corpus.fsemb
    std::string index;        // corpus.fsidx
    std::string curve_csv;    // rerank_curve.csv
    std::string sweep_csv;    // sweep.csv
    std::string bench_txt;    // bench.txt
    std::string attention_csv;  // attention.csv
};
RunPaths run_paths(const RunConfig& cfg);

// Module configurations derived from the run description, output paths
// filled in.
ImageEncoderConfig encoder_config(const RunConfig& cfg);
DecoderConfig decoder_config(const RunConfig& cfg);  // vocab filled at train time
TrainFastConfig fast_train_config(const RunConfig& cfg);
TrainSlowConfig slow_train_config(const RunConfig& cfg);
TrainDistillConfig distill_train_config(const RunConfig& cfg);

}  // namespace fastslow
