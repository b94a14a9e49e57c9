#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fastslow/checkpoint.hpp"
#include "fastslow/dataset.hpp"
#include "fastslow/encoders.hpp"
#include "fastslow/tensor.hpp"
#include "fastslow/trainer.hpp"

namespace fastslow {

struct AttentionParams {
    Tensor wq, bq;  // dm x dm, dm
    Tensor wk, bk;  // kv_dim x dm, dm
    Tensor wv, bv;  // kv_dim x dm, dm
    Tensor wo, bo;  // dm x dm, dm
};

struct DecoderLayerParams {
    Tensor ln1_g, ln1_b;
    AttentionParams self_attn;
    Tensor ln2_g, ln2_b;
    AttentionParams cross_attn;  // keys/values from the flattened feature map
    Tensor ln3_g, ln3_b;
    Tensor ff_w1, ff_b1;  // dm x 4dm
    Tensor ff_w2, ff_b2;  // 4dm x dm
};

struct DecoderConfig {
    int64_t vocab_size = 0;
    int dm = 64;
    int heads = 4;
    int layers = 2;
    int max_positions = 16;
    int feature_dim = 64;  // width of the visual rows cross-attention reads

    bool operator==(const DecoderConfig&) const = default;
};

// One text decoder: token/positional embeddings, pre-norm residual layers
// (masked self-attention, cross-attention over visual rows, feed-forward),
// final norm, projection to vocabulary logits.
struct DecoderParams {
    DecoderConfig cfg;
    Tensor token_table;  // V x dm
    Tensor pos_table;    // max_positions x dm
    std::vector<DecoderLayerParams> layers;
    Tensor final_g, final_b;
    Tensor out_w, out_b;  // dm x V, V
};

// The full cross-attention scorer: a visual encoder plus two independent
// decoders, one reading captions forward and one reading them reversed.
struct SlowParams {
    ImageEncoderParams image;
    int target_resolution = 0;  // feature-map resolution the decoders consume
    DecoderParams fwd;
    DecoderParams bwd;
};

// Cross-attention weights captured during one forward pass.
struct AttentionRecord {
    // [layer][head]: text positions x visual positions
    std::vector<std::vector<Tensor>> scores;   // pre-softmax
    std::vector<std::vector<Tensor>> weights;  // post-softmax rows, sum 1
    // [layer][text position]: head with the highest mean pre-softmax score
    std::vector<std::vector<int>> best_head;
};

DecoderParams init_decoder(const DecoderConfig& cfg, Rng& rng);
SlowParams init_slow(const ImageEncoderConfig& enc_cfg, const DecoderConfig& dec_cfg,
                     int target_resolution, Rng& rng);

// Caption framing helpers: scoring consumes [BOS, content..., EOS]; the
// reversal keeps BOS first and EOS last and flips only the content.
std::vector<int64_t> with_sentinels(const std::vector<int64_t>& content);
std::vector<int64_t> reverse_caption(const std::vector<int64_t>& y);

// Precomputed cross-attention keys/values of one feature map under one
// decoder; lets repeated scoring against the same image skip the projections.
struct FeatureCache {
    std::vector<Tensor> k, v;  // [layer]: (H*H) x dm
};
FeatureCache make_feature_cache(const Tensor& features, const DecoderParams& dec);

// Runs the decoder over input tokens (BOS-led prefix). Row l of the result
// holds the logits for position l+1 given positions <= l; causality is
// exact. Optionally captures cross-attention and/or reuses a feature cache.
Tensor decoder_logits(const Tensor& features, const std::vector<int64_t>& tokens,
                      const DecoderParams& dec, const FeatureCache* cache = nullptr,
                      AttentionRecord* record = nullptr);

// Sum of per-position log-likelihoods of the content tokens plus EOS,
// conditioned on the true prefix. y must carry BOS/EOS sentinels.
Tensor caption_score_fwd(const Tensor& features, const std::vector<int64_t>& y,
                         const DecoderParams& dec, const FeatureCache* cache = nullptr);

// h = forward score + backward score of the reversed caption.
Tensor caption_score(const Tensor& features, const std::vector<int64_t>& y,
                     const SlowParams& slow, const FeatureCache* cache_fwd = nullptr,
                     const FeatureCache* cache_bwd = nullptr);

AttentionRecord attention_maps(const Tensor& features, const std::vector<int64_t>& y,
                               const DecoderParams& dec);

void visit_decoder(DecoderParams& p, const std::string& prefix,
                   const std::function<void(const std::string&, Tensor&)>& f);
void visit_slow(SlowParams& p,
                const std::function<void(const std::string&, Tensor&)>& f);
ParamStore slow_to_store(const SlowParams& p);
void slow_from_store(SlowParams& p, const ParamStore& store);

struct TrainSlowConfig {
    ImageEncoderConfig enc;
    DecoderConfig dec;          // vocab_size filled from the dataset when 0
    int target_resolution = 8;  // default: mid resolution of a 32-pixel raster
    int steps = 2000;
    int batch = 8;
    OptimConfig optim{.lr = 3e-4, .warmup_steps = 100, .total_steps = 0};
    uint64_t seed = 0;
    bool share_token_table = false;  // tie fwd/bwd token embeddings
    std::string csv_path;            // per-step loss log; empty skips
    std::string ckpt_path;           // final checkpoint; empty skips
};

// Trains the scorer with the caption log-likelihood objective. Deterministic
// per seed. Logs step,loss,lr,seconds; aborts with step and batch ids if the
// loss turns non-finite; warns (stderr) when 500-step loss windows fail to
// decrease.
SlowParams train_slow(const Dataset& ds, const TrainSlowConfig& cfg);

}  // namespace fastslow
