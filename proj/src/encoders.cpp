#include "fastslow/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "fastslow/dataset.hpp"
#include "fastslow/errors.hpp"

namespace fastslow {

namespace {

void validate_encoder_config(const ImageEncoderConfig& cfg) {
    if (cfg.widths.size() != 3)
        throw UsageError("image encoder needs exactly 3 stage widths, got " +
                         std::to_string(cfg.widths.size()));
    for (int w : cfg.widths)
        if (w < 1) throw UsageError("stage widths must be positive");
    if (cfg.raster < 8 || cfg.raster % 8 != 0)
        throw UsageError("raster must be a positive multiple of 8, got " +
                         std::to_string(cfg.raster));
    if (cfg.channels < 1) throw UsageError("channels must be positive");
}

Tensor glorot_conv(int kh, int kw, int ci, int co, Rng& rng) {
    // fan counts follow the conv receptive field
    int64_t fan_in = static_cast<int64_t>(kh) * kw * ci;
    int64_t fan_out = static_cast<int64_t>(kh) * kw * co;
    return Tensor::glorot({kh, kw, ci, co}, rng, fan_in, fan_out);
}

Tensor run_stage(const Tensor& x, const ConvStage& st) {
    Tensor c = conv2d(x, st.w, nullptr, 2, 1);
    return relu(channel_norm(c, st.gamma, st.beta, 1e-5));
}

}  // namespace

ImageEncoderParams init_image_encoder(const ImageEncoderConfig& cfg, Rng& rng) {
    validate_encoder_config(cfg);
    ImageEncoderParams p;
    p.cfg = cfg;
    int ci = cfg.channels;
    for (int s = 0; s < 3; ++s) {
        int co = cfg.widths[static_cast<size_t>(s)];
        ConvStage st;
        st.w = glorot_conv(3, 3, ci, co, rng);
        st.gamma = Tensor::full({co}, 1.0);
        st.beta = Tensor::zeros({co});
        p.stages.push_back(std::move(st));
        ci = co;
    }
    int d = cfg.feature_dim();
    // fuses[0] consumes stage 2's map (width widths[1]); fuses[1] stage 1's
    int lateral_ci[2] = {cfg.widths[1], cfg.widths[0]};
    for (int i = 0; i < 2; ++i) {
        FuseBlock fb;
        fb.lateral_w = glorot_conv(1, 1, lateral_ci[i], d, rng);
        fb.lateral_b = Tensor::zeros({d});
        fb.w1 = Tensor::full({1}, 1.0);
        fb.w2 = Tensor::full({1}, 1.0);
        fb.dw_kernel = Tensor::glorot({3, 3, d}, rng, 9, 9);
        fb.pw_weight = glorot_conv(1, 1, d, d, rng);
        fb.gamma = Tensor::full({d}, 1.0);
        fb.beta = Tensor::zeros({d});
        p.fuses.push_back(std::move(fb));
    }
    return p;
}

DualEncoderParams init_dual_encoder(const ImageEncoderConfig& cfg, int64_t vocab_size,
                                    int embed_dim, Rng& rng) {
    if (vocab_size < 1) throw UsageError("vocabulary must be non-empty");
    if (embed_dim < 1) throw UsageError("embedding dimension must be positive");
    DualEncoderParams p;
    p.image = init_image_encoder(cfg, rng);
    int d = cfg.feature_dim();
    p.pool_w = Tensor::glorot({d, embed_dim}, rng, d, embed_dim);
    p.pool_b = Tensor::zeros({embed_dim});
    p.text_table = Tensor::glorot({vocab_size, embed_dim}, rng, vocab_size, embed_dim);
    return p;
}

Tensor fuse_weighted_average(const Tensor& p_in, const Tensor& p_prev, const Tensor& w1,
                             const Tensor& w2, double eps) {
    if (p_in.shape.size() != 3 || p_prev.shape.size() != 3)
        throw UsageError("fuse expects HxWxC feature maps");
    if (w1.numel() != 1 || w2.numel() != 1)
        throw UsageError("fusion weights must be scalars");
    Tensor resized = upsample2x_nn(p_in);
    if (resized.shape != p_prev.shape)
        throw UsageError(
            "fuse resolution mismatch: earlier map must be exactly 2x the deep map, got " +
            shape_str(p_prev.shape) + " vs upsampled " + shape_str(resized.shape));
    Tensor r1 = relu(w1);
    Tensor r2 = relu(w2);
    Tensor num = add(mul_scalar_t(resized, r1), mul_scalar_t(p_prev, r2));
    Tensor den = add(add(r1, r2), Tensor::full({1}, eps));
    return mul_scalar_t(num, recip(den));
}

Tensor fuse(const Tensor& p_in, const Tensor& p_prev, const FuseBlock& block,
            int* fuse_calls) {
    Tensor pre = fuse_weighted_average(p_in, p_prev, block.w1, block.w2, block.eps_fuse);
    Tensor dw = depthwise_conv3x3(pre, block.dw_kernel);
    Tensor pw = conv2d(dw, block.pw_weight, nullptr, 1, 0);
    Tensor out = relu(channel_norm(pw, block.gamma, block.beta, block.eps_norm));
    if (fuse_calls) ++*fuse_calls;
    return out;
}

Tensor encode_image(const Tensor& render, const ImageEncoderParams& params,
                    int target_resolution, int* fuse_calls) {
    const ImageEncoderConfig& cfg = params.cfg;
    Shape want = {cfg.raster, cfg.raster, cfg.channels};
    if (render.shape != want)
        throw UsageError("encode_image expects a " + shape_str(want) + " render, got " +
                         shape_str(render.shape));
    int deepest = cfg.raster / 8;
    if (target_resolution != deepest && target_resolution != deepest * 2 &&
        target_resolution != deepest * 4)
        throw UsageError("unreachable target resolution " + std::to_string(target_resolution) +
                         "; reachable: " + std::to_string(deepest) + ", " +
                         std::to_string(deepest * 2) + ", " + std::to_string(deepest * 4));
    Tensor s1 = run_stage(render, params.stages[0]);
    Tensor s2 = run_stage(s1, params.stages[1]);
    Tensor s3 = run_stage(s2, params.stages[2]);
    Tensor phi = s3;
    if (target_resolution >= deepest * 2) {
        const FuseBlock& fb = params.fuses[0];
        Tensor prev = conv2d(s2, fb.lateral_w, &fb.lateral_b, 1, 0);
        phi = fuse(phi, prev, fb, fuse_calls);
    }
    if (target_resolution == deepest * 4) {
        const FuseBlock& fb = params.fuses[1];
        Tensor prev = conv2d(s1, fb.lateral_w, &fb.lateral_b, 1, 0);
        phi = fuse(phi, prev, fb, fuse_calls);
    }
    return phi;
}

Tensor embed_image(const Tensor& render, const DualEncoderParams& params) {
    int deepest = params.image.cfg.raster / 8;
    Tensor phi = encode_image(render, params.image, deepest);
    int d = params.image.cfg.feature_dim();
    Tensor flat = reshape(phi, {phi.shape[0] * phi.shape[1], d});
    Tensor pooled = reshape(mean_axis(flat, 0), {1, d});
    Tensor emb = add_rowvec(matmul(pooled, params.pool_w), params.pool_b);
    return reshape(emb, {params.pool_b.shape[0]});
}

Tensor embed_text(const std::vector<int64_t>& tokens, const DualEncoderParams& params) {
    std::vector<int64_t> content;
    for (int64_t t : tokens)
        if (t != Vocabulary::pad_id && t != Vocabulary::bos_id && t != Vocabulary::eos_id)
            content.push_back(t);
    if (content.empty())
        throw DataError("cannot embed a caption with no content tokens");
    // canonical order makes the bag-of-words mean exactly order-invariant
    std::sort(content.begin(), content.end());
    Tensor rows = embedding_lookup(params.text_table, content);
    return mean_axis(rows, 0);
}

void visit_image_encoder(ImageEncoderParams& p, const std::string& prefix,
                         const std::function<void(const std::string&, Tensor&)>& f) {
    for (size_t s = 0; s < p.stages.size(); ++s) {
        std::string base = prefix + "stage" + std::to_string(s) + ".";
        f(base + "w", p.stages[s].w);
        f(base + "gamma", p.stages[s].gamma);
        f(base + "beta", p.stages[s].beta);
    }
    for (size_t i = 0; i < p.fuses.size(); ++i) {
        std::string base = prefix + "fuse" + std::to_string(i) + ".";
        FuseBlock& fb = p.fuses[i];
        f(base + "lateral_w", fb.lateral_w);
        f(base + "lateral_b", fb.lateral_b);
        f(base + "w1", fb.w1);
        f(base + "w2", fb.w2);
        f(base + "dw_kernel", fb.dw_kernel);
        f(base + "pw_weight", fb.pw_weight);
        f(base + "gamma", fb.gamma);
        f(base + "beta", fb.beta);
    }
}

void visit_dual_encoder(DualEncoderParams& p,
                        const std::function<void(const std::string&, Tensor&)>& f) {
    visit_image_encoder(p.image, "image.", f);
    f("pool_w", p.pool_w);
    f("pool_b", p.pool_b);
    f("text_table", p.text_table);
}

ParamStore dual_encoder_to_store(const DualEncoderParams& p) {
    ParamStore store;
    DualEncoderParams copy = p;
    visit_dual_encoder(copy, [&](const std::string& name, Tensor& t) { store.add(name, t); });
    return store;
}

void dual_encoder_from_store(DualEncoderParams& p, const ParamStore& store) {
    size_t used = 0;
    visit_dual_encoder(p, [&](const std::string& name, Tensor& t) {
        const Tensor& src = store.at(name);
        if (src.shape != t.shape)
            throw DataError("checkpoint tensor '" + name + "' has shape " +
                            shape_str(src.shape) + ", expected " + shape_str(t.shape));
        t = src;
        ++used;
    });
    if (used != store.items().size())
        throw DataError("checkpoint holds " + std::to_string(store.items().size()) +
                        " tensors, model expects " + std::to_string(used));
}

}  // namespace fastslow
