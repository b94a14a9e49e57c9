#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fastslow/checkpoint.hpp"
#include "fastslow/tensor.hpp"

namespace fastslow {

// One backbone stage: 3x3 stride-2 convolution, per-channel normalization
// with learned affine, relu. The norm's beta plays the role of a bias.
struct ConvStage {
    Tensor w;      // 3x3 x c_in x c_out
    Tensor gamma;  // c_out
    Tensor beta;   // c_out
};

// Upsampling fusion block. The weighted average of the 2x-upsampled deep map
// and the laterally projected earlier map is divided by the rectified weight
// sum plus eps_fuse, then refined by a separable conv (depthwise 3x3 +
// pointwise 1x1) with per-channel normalization and relu.
struct FuseBlock {
    Tensor lateral_w;  // 1x1 x c_stage x d projection of the earlier map
    Tensor lateral_b;  // d
    Tensor w1;         // scalar weight on the upsampled deep map
    Tensor w2;         // scalar weight on the earlier high-res map
    Tensor dw_kernel;  // 3x3 x d depthwise
    Tensor pw_weight;  // 1x1 x d x d pointwise
    Tensor gamma;      // d
    Tensor beta;       // d
    double eps_fuse = 1e-4;
    double eps_norm = 1e-5;
};

struct ImageEncoderConfig {
    int raster = 32;
    int channels = 3;
    std::vector<int> widths = {16, 32, 64};  // stage widths; back() is d

    int feature_dim() const { return widths.back(); }
    bool operator==(const ImageEncoderConfig&) const = default;
};

struct ImageEncoderParams {
    ImageEncoderConfig cfg;
    std::vector<ConvStage> stages;  // exactly 3, halving resolution each
    std::vector<FuseBlock> fuses;   // fuses[0]: G'/8 -> G'/4; fuses[1]: -> G'/2
};

// Fast-scorer parameters: f(x) pools the deepest feature map through a
// linear head; g(y) averages text-embedding rows (bag of words).
struct DualEncoderParams {
    ImageEncoderParams image;
    Tensor pool_w;     // d x e
    Tensor pool_b;     // e
    Tensor text_table;  // V x e
};

ImageEncoderParams init_image_encoder(const ImageEncoderConfig& cfg, Rng& rng);
DualEncoderParams init_dual_encoder(const ImageEncoderConfig& cfg, int64_t vocab_size,
                                    int embed_dim, Rng& rng);

// The pre-conv normalized weighted average:
//   (relu(w1) * upsample(p_in) + relu(w2) * p_prev) / (relu(w1)+relu(w2)+eps)
// p_prev must already be at 2x the resolution of p_in and width d.
// Both weights rectifying to zero with eps == 0 raises NumericError.
Tensor fuse_weighted_average(const Tensor& p_in, const Tensor& p_prev, const Tensor& w1,
                             const Tensor& w2, double eps);

// Full fusion: weighted average above, then separable conv + norm + relu.
// Increments *fuse_calls when provided (instrumentation for tests).
Tensor fuse(const Tensor& p_in, const Tensor& p_prev, const FuseBlock& block,
            int* fuse_calls = nullptr);

// Runs the backbone and as many fusion blocks as needed to reach
// target_resolution (one of raster/8, raster/4, raster/2; anything else is
// an error listing the reachable set). Returns an HxHxd feature map.
Tensor encode_image(const Tensor& render, const ImageEncoderParams& params,
                    int target_resolution, int* fuse_calls = nullptr);

// f(x): linear head over the globally averaged deepest feature map.
Tensor embed_image(const Tensor& render, const DualEncoderParams& params);

// g(y): mean of embedding rows over content tokens. Captions with no
// content tokens (only pad/bos/eos) are an error.
Tensor embed_text(const std::vector<int64_t>& tokens, const DualEncoderParams& params);

// Parameter traversal in a fixed order shared by checkpoints, watching, and
// optimizer slots.
void visit_image_encoder(ImageEncoderParams& p, const std::string& prefix,
                         const std::function<void(const std::string&, Tensor&)>& f);
void visit_dual_encoder(DualEncoderParams& p,
                        const std::function<void(const std::string&, Tensor&)>& f);

ParamStore dual_encoder_to_store(const DualEncoderParams& p);
void dual_encoder_from_store(DualEncoderParams& p, const ParamStore& store);

}  // namespace fastslow
