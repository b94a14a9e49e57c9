#include "fastslow/slow_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "fastslow/errors.hpp"

namespace fastslow {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskValue = -1e30;

void validate_decoder_config(const DecoderConfig& cfg) {
    if (cfg.vocab_size < 4) throw UsageError("decoder vocabulary must cover the special ids");
    if (cfg.dm < 1 || cfg.heads < 1 || cfg.layers < 1)
        throw UsageError("decoder dimensions must be positive");
    if (cfg.dm % cfg.heads != 0)
        throw UsageError("model width " + std::to_string(cfg.dm) + " not divisible by " +
                         std::to_string(cfg.heads) + " heads");
    if (cfg.max_positions < 2) throw UsageError("decoder needs at least two positions");
    if (cfg.feature_dim < 1) throw UsageError("feature width must be positive");
}

AttentionParams init_attention(int kv_dim, int dm, Rng& rng) {
    AttentionParams a;
    a.wq = Tensor::glorot({dm, dm}, rng, dm, dm);
    a.bq = Tensor::zeros({dm});
    a.wk = Tensor::glorot({kv_dim, dm}, rng, kv_dim, dm);
    a.bk = Tensor::zeros({dm});
    a.wv = Tensor::glorot({kv_dim, dm}, rng, kv_dim, dm);
    a.bv = Tensor::zeros({dm});
    a.wo = Tensor::glorot({dm, dm}, rng, dm, dm);
    a.bo = Tensor::zeros({dm});
    return a;
}

Tensor causal_mask(int64_t n) {
    Tensor m = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) m.data[static_cast<size_t>(i * n + j)] = 1.0;
    return m;
}

Tensor detach_copy(const Tensor& t) {
    Tensor c = t;
    c.tape = nullptr;
    c.node = -1;
    return c;
}

// Multi-head attention core over precomputed q/k/v projections (rows of
// width dm). Applies the causal mask when given; captures per-head
// cross-attention matrices when record_layer is set.
Tensor attention_mix(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                     const Tensor* mask, std::vector<Tensor>* rec_scores,
                     std::vector<Tensor>* rec_weights) {
    int64_t dm = q.shape[1];
    int64_t dh = dm / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> ctx;
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * dh, dh);
        Tensor kh = slice(k, 1, h * dh, dh);
        Tensor vh = slice(v, 1, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt);
        if (rec_scores) rec_scores->push_back(detach_copy(scores));
        if (mask) scores = masked_fill(scores, *mask, kMaskValue);
        Tensor w = softmax(scores, 1);
        if (rec_weights) rec_weights->push_back(detach_copy(w));
        ctx.push_back(matmul(w, vh));
    }
    return heads == 1 ? ctx[0] : concat(ctx, 1);
}

Tensor project_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

void validate_scored_caption(const std::vector<int64_t>& y, int64_t vocab) {
    if (y.size() < 2) throw DataError("caption must carry BOS and EOS sentinels");
    if (y.front() != Vocabulary::bos_id || y.back() != Vocabulary::eos_id)
        throw DataError("caption must start with BOS and end with EOS");
    for (size_t i = 1; i + 1 < y.size(); ++i) {
        int64_t t = y[i];
        if (t == Vocabulary::bos_id || t == Vocabulary::eos_id || t == Vocabulary::pad_id)
            throw DataError("caption content contains a reserved special token");
        if (t < 0 || t >= vocab)
            throw DataError("token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
}

}  // namespace

DecoderParams init_decoder(const DecoderConfig& cfg, Rng& rng) {
    validate_decoder_config(cfg);
    DecoderParams p;
    p.cfg = cfg;
    int dm = cfg.dm;
    p.token_table = Tensor::glorot({cfg.vocab_size, dm}, rng, cfg.vocab_size, dm);
    p.pos_table = Tensor::glorot({cfg.max_positions, dm}, rng, cfg.max_positions, dm);
    for (int l = 0; l < cfg.layers; ++l) {
        DecoderLayerParams lay;
        lay.ln1_g = Tensor::full({dm}, 1.0);
        lay.ln1_b = Tensor::zeros({dm});
        lay.self_attn = init_attention(dm, dm, rng);
        lay.ln2_g = Tensor::full({dm}, 1.0);
        lay.ln2_b = Tensor::zeros({dm});
        lay.cross_attn = init_attention(cfg.feature_dim, dm, rng);
        lay.ln3_g = Tensor::full({dm}, 1.0);
        lay.ln3_b = Tensor::zeros({dm});
        int ff = 4 * dm;
        lay.ff_w1 = Tensor::glorot({dm, ff}, rng, dm, ff);
        lay.ff_b1 = Tensor::zeros({ff});
        lay.ff_w2 = Tensor::glorot({ff, dm}, rng, ff, dm);
        lay.ff_b2 = Tensor::zeros({dm});
        p.layers.push_back(std::move(lay));
    }
    p.final_g = Tensor::full({dm}, 1.0);
    p.final_b = Tensor::zeros({dm});
    p.out_w = Tensor::glorot({dm, cfg.vocab_size}, rng, dm, cfg.vocab_size);
    p.out_b = Tensor::zeros({cfg.vocab_size});
    return p;
}

SlowParams init_slow(const ImageEncoderConfig& enc_cfg, const DecoderConfig& dec_cfg,
                     int target_resolution, Rng& rng) {
    int deepest = enc_cfg.raster / 8;
    if (target_resolution != deepest && target_resolution != deepest * 2 &&
        target_resolution != deepest * 4)
        throw UsageError("target resolution " + std::to_string(target_resolution) +
                         " unreachable from raster " + std::to_string(enc_cfg.raster));
    if (dec_cfg.feature_dim != enc_cfg.feature_dim())
        throw UsageError("decoder expects visual width " + std::to_string(dec_cfg.feature_dim) +
                         " but the encoder produces " + std::to_string(enc_cfg.feature_dim()));
    SlowParams p;
    p.image = init_image_encoder(enc_cfg, rng);
    p.target_resolution = target_resolution;
    p.fwd = init_decoder(dec_cfg, rng);
    p.bwd = init_decoder(dec_cfg, rng);
    return p;
}

std::vector<int64_t> with_sentinels(const std::vector<int64_t>& content) {
    std::vector<int64_t> y;
    y.reserve(content.size() + 2);
    y.push_back(Vocabulary::bos_id);
    y.insert(y.end(), content.begin(), content.end());
    y.push_back(Vocabulary::eos_id);
    return y;
}

std::vector<int64_t> reverse_caption(const std::vector<int64_t>& y) {
    if (y.size() < 2 || y.front() != Vocabulary::bos_id || y.back() != Vocabulary::eos_id)
        throw DataError("reverse_caption expects BOS ... EOS framing");
    std::vector<int64_t> r = y;
    std::reverse(r.begin() + 1, r.end() - 1);
    return r;
}

FeatureCache make_feature_cache(const Tensor& features, const DecoderParams& dec) {
    if (features.rank() != 3 || features.shape[2] != dec.cfg.feature_dim)
        throw UsageError("feature map shape " + shape_str(features.shape) +
                         " does not match decoder width " +
                         std::to_string(dec.cfg.feature_dim));
    Tensor flat = reshape(features, {features.shape[0] * features.shape[1],
                                     features.shape[2]});
    FeatureCache cache;
    for (const DecoderLayerParams& lay : dec.layers) {
        cache.k.push_back(project_rows(flat, lay.cross_attn.wk, lay.cross_attn.bk));
        cache.v.push_back(project_rows(flat, lay.cross_attn.wv, lay.cross_attn.bv));
    }
    return cache;
}

Tensor decoder_logits(const Tensor& features, const std::vector<int64_t>& tokens,
                      const DecoderParams& dec, const FeatureCache* cache,
                      AttentionRecord* record) {
    const DecoderConfig& cfg = dec.cfg;
    int64_t n = static_cast<int64_t>(tokens.size());
    if (n < 1) throw DataError("decoder needs at least one input token");
    if (n > cfg.max_positions)
        throw DataError("sequence of " + std::to_string(n) + " tokens exceeds the maximum of " +
                        std::to_string(cfg.max_positions) + " positions");
    for (int64_t t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw DataError("token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
    if (features.rank() != 3 || features.shape[2] != cfg.feature_dim)
        throw UsageError("feature map shape " + shape_str(features.shape) +
                         " does not match decoder width " + std::to_string(cfg.feature_dim));
    if (cache && cache->k.size() != dec.layers.size())
        throw UsageError("feature cache layer count mismatch");

    Tensor flat;
    if (!cache)
        flat = reshape(features, {features.shape[0] * features.shape[1], features.shape[2]});

    Tensor x = add(embedding_lookup(dec.token_table, tokens),
                   slice(dec.pos_table, 0, 0, n));
    Tensor mask = causal_mask(n);
    if (record) {
        record->scores.clear();
        record->weights.clear();
        record->best_head.clear();
    }
    for (size_t li = 0; li < dec.layers.size(); ++li) {
        const DecoderLayerParams& lay = dec.layers[li];
        {
            Tensor a = layer_norm(x, lay.ln1_g, lay.ln1_b, kLnEps);
            Tensor q = project_rows(a, lay.self_attn.wq, lay.self_attn.bq);
            Tensor k = project_rows(a, lay.self_attn.wk, lay.self_attn.bk);
            Tensor v = project_rows(a, lay.self_attn.wv, lay.self_attn.bv);
            Tensor mixed = attention_mix(q, k, v, cfg.heads, &mask, nullptr, nullptr);
            x = add(x, project_rows(mixed, lay.self_attn.wo, lay.self_attn.bo));
        }
        {
            Tensor c = layer_norm(x, lay.ln2_g, lay.ln2_b, kLnEps);
            Tensor q = project_rows(c, lay.cross_attn.wq, lay.cross_attn.bq);
            Tensor k = cache ? cache->k[li]
                             : project_rows(flat, lay.cross_attn.wk, lay.cross_attn.bk);
            Tensor v = cache ? cache->v[li]
                             : project_rows(flat, lay.cross_attn.wv, lay.cross_attn.bv);
            std::vector<Tensor> rec_s, rec_w;
            Tensor mixed = attention_mix(q, k, v, cfg.heads, nullptr,
                                         record ? &rec_s : nullptr,
                                         record ? &rec_w : nullptr);
            if (record) {
                record->scores.push_back(std::move(rec_s));
                record->weights.push_back(std::move(rec_w));
            }
            x = add(x, project_rows(mixed, lay.cross_attn.wo, lay.cross_attn.bo));
        }
        {
            Tensor fz = layer_norm(x, lay.ln3_g, lay.ln3_b, kLnEps);
            Tensor h1 = gelu(add_rowvec(matmul(fz, lay.ff_w1), lay.ff_b1));
            x = add(x, add_rowvec(matmul(h1, lay.ff_w2), lay.ff_b2));
        }
    }
    Tensor final = layer_norm(x, dec.final_g, dec.final_b, kLnEps);
    Tensor logits = add_rowvec(matmul(final, dec.out_w), dec.out_b);

    if (record) {
        // per layer and text position, flag the head with the highest mean
        // pre-softmax score over the visual grid (first head wins ties)
        for (const std::vector<Tensor>& layer_scores : record->scores) {
            std::vector<int> best(static_cast<size_t>(n), 0);
            std::vector<double> best_mean(static_cast<size_t>(n),
                                          -std::numeric_limits<double>::infinity());
            for (size_t h = 0; h < layer_scores.size(); ++h) {
                const Tensor& s = layer_scores[h];
                int64_t cols = s.shape[1];
                for (int64_t row = 0; row < n; ++row) {
                    double mean = 0.0;
                    for (int64_t j = 0; j < cols; ++j)
                        mean += s.data[static_cast<size_t>(row * cols + j)];
                    mean /= static_cast<double>(cols);
                    if (mean > best_mean[static_cast<size_t>(row)]) {
                        best_mean[static_cast<size_t>(row)] = mean;
                        best[static_cast<size_t>(row)] = static_cast<int>(h);
                    }
                }
            }
            record->best_head.push_back(std::move(best));
        }
    }
    return logits;
}

Tensor caption_score_fwd(const Tensor& features, const std::vector<int64_t>& y,
                         const DecoderParams& dec, const FeatureCache* cache) {
    validate_scored_caption(y, dec.cfg.vocab_size);
    std::vector<int64_t> input(y.begin(), y.end() - 1);
    Tensor logits = decoder_logits(features, input, dec, cache);
    Tensor lp = log_softmax(logits, 1);
    int64_t v = dec.cfg.vocab_size;
    Tensor total = Tensor::scalar(0.0);
    for (size_t l = 0; l + 1 < y.size(); ++l)
        total = add(total, select_index(lp, static_cast<int64_t>(l) * v + y[l + 1]));
    return total;
}

Tensor caption_score(const Tensor& features, const std::vector<int64_t>& y,
                     const SlowParams& slow, const FeatureCache* cache_fwd,
                     const FeatureCache* cache_bwd) {
    Tensor hf = caption_score_fwd(features, y, slow.fwd, cache_fwd);
    Tensor hb = caption_score_fwd(features, reverse_caption(y), slow.bwd, cache_bwd);
    return add(hf, hb);
}

AttentionRecord attention_maps(const Tensor& features, const std::vector<int64_t>& y,
                               const DecoderParams& dec) {
    validate_scored_caption(y, dec.cfg.vocab_size);
    std::vector<int64_t> input(y.begin(), y.end() - 1);
    AttentionRecord rec;
    decoder_logits(features, input, dec, nullptr, &rec);
    return rec;
}

void visit_decoder(DecoderParams& p, const std::string& prefix,
                   const std::function<void(const std::string&, Tensor&)>& f) {
    f(prefix + "token_table", p.token_table);
    f(prefix + "pos_table", p.pos_table);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        std::string base = prefix + "layer" + std::to_string(l) + ".";
        DecoderLayerParams& lay = p.layers[l];
        f(base + "ln1_g", lay.ln1_g);
        f(base + "ln1_b", lay.ln1_b);
        auto visit_attn = [&](const std::string& tag, AttentionParams& a) {
            f(base + tag + ".wq", a.wq);
            f(base + tag + ".bq", a.bq);
            f(base + tag + ".wk", a.wk);
            f(base + tag + ".bk", a.bk);
            f(base + tag + ".wv", a.wv);
            f(base + tag + ".bv", a.bv);
            f(base + tag + ".wo", a.wo);
            f(base + tag + ".bo", a.bo);
        };
        visit_attn("self", lay.self_attn);
        f(base + "ln2_g", lay.ln2_g);
        f(base + "ln2_b", lay.ln2_b);
        visit_attn("cross", lay.cross_attn);
        f(base + "ln3_g", lay.ln3_g);
        f(base + "ln3_b", lay.ln3_b);
        f(base + "ff_w1", lay.ff_w1);
        f(base + "ff_b1", lay.ff_b1);
        f(base + "ff_w2", lay.ff_w2);
        f(base + "ff_b2", lay.ff_b2);
    }
    f(prefix + "final_g", p.final_g);
    f(prefix + "final_b", p.final_b);
    f(prefix + "out_w", p.out_w);
    f(prefix + "out_b", p.out_b);
}

void visit_slow(SlowParams& p,
                const std::function<void(const std::string&, Tensor&)>& f) {
    visit_image_encoder(p.image, "image.", f);
    visit_decoder(p.fwd, "fwd.", f);
    visit_decoder(p.bwd, "bwd.", f);
}

ParamStore slow_to_store(const SlowParams& p) {
    ParamStore store;
    SlowParams copy = p;
    visit_slow(copy, [&](const std::string& name, Tensor& t) { store.add(name, t); });
    return store;
}

void slow_from_store(SlowParams& p, const ParamStore& store) {
    size_t used = 0;
    visit_slow(p, [&](const std::string& name, Tensor& t) {
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

SlowParams train_slow(const Dataset& ds, const TrainSlowConfig& cfg) {
    if (cfg.steps < 0) throw UsageError("negative step count");
    if (cfg.batch < 1) throw UsageError("batch size must be at least 1");
    DecoderConfig dec_cfg = cfg.dec;
    if (dec_cfg.vocab_size == 0)
        dec_cfg.vocab_size = static_cast<int64_t>(ds.vocab.size());

    Rng rng(cfg.seed);
    Rng init_rng = rng.child(1);
    Rng batch_rng = rng.child(2);
    SlowParams params = init_slow(cfg.enc, dec_cfg, cfg.target_resolution, init_rng);
    if (cfg.share_token_table) params.bwd.token_table = params.fwd.token_table;

    std::vector<int64_t> train_ids = ds.split_scene_ids(Split::train);
    if (train_ids.empty()) throw DataError("training split is empty");
    std::vector<Tensor> renders;
    renders.reserve(train_ids.size());
    for (int64_t id : train_ids)
        renders.push_back(render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg));

    OptimConfig optim = cfg.optim;
    if (optim.total_steps == 0) optim.total_steps = cfg.steps;
    Adam adam;
    CsvLog log({"step", "loss", "lr", "seconds"});
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(cfg.steps));

    for (int step = 0; step < cfg.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<int64_t> batch_scene_ids;
        std::vector<size_t> batch_render_idx;
        std::vector<int> batch_caption_idx;
        for (int b = 0; b < cfg.batch; ++b) {
            size_t pick = static_cast<size_t>(batch_rng.uniform_int(train_ids.size()));
            batch_render_idx.push_back(pick);
            batch_scene_ids.push_back(train_ids[pick]);
            batch_caption_idx.push_back(static_cast<int>(batch_rng.uniform_int(
                static_cast<uint64_t>(ds.cfg.captions_per_scene))));
        }

        double loss_value = 0.0;
        try {
            Tape tape;
            SlowParams watched = params;
            visit_slow(watched, [&](const std::string&, Tensor& t) { t = tape.watch(t); });
            if (cfg.share_token_table) watched.bwd.token_table = watched.fwd.token_table;

            Tensor total = Tensor::scalar(0.0);
            for (int b = 0; b < cfg.batch; ++b) {
                const Caption& cap = ds.caption(batch_scene_ids[static_cast<size_t>(b)],
                                                batch_caption_idx[static_cast<size_t>(b)]);
                Tensor phi = encode_image(renders[batch_render_idx[static_cast<size_t>(b)]],
                                          watched.image, cfg.target_resolution);
                total = add(total, caption_score(phi, with_sentinels(cap.tokens), watched));
            }
            Tensor loss = scale(total, -1.0 / cfg.batch);
            loss_value = loss.value();
            if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");

            Gradients grads = tape.backward(loss);
            std::vector<Tensor*> ps;
            visit_slow(params, [&](const std::string& name, Tensor& t) {
                if (cfg.share_token_table && name == "bwd.token_table") return;
                ps.push_back(&t);
            });
            std::vector<const Tensor*> gps;
            visit_slow(watched, [&](const std::string& name, Tensor& t) {
                if (cfg.share_token_table && name == "bwd.token_table") return;
                gps.push_back(&grads.of(t));
            });
            adam.step(ps, gps, optim, step);
            if (cfg.share_token_table) params.bwd.token_table = params.fwd.token_table;
        } catch (const NumericError& e) {
            std::string ids;
            for (size_t i = 0; i < batch_scene_ids.size(); ++i) {
                if (i) ids += ",";
                ids += std::to_string(batch_scene_ids[i]);
            }
            throw NumericError("training aborted at step " + std::to_string(step) +
                               " (batch scenes " + ids + "): " + e.what());
        }

        losses.push_back(loss_value);
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                          .count();
        log.add_row({std::to_string(step), format_double(loss_value),
                     format_double(lr_at_step(optim, step)), format_double(secs)});
    }

    std::vector<int> bad = non_decreasing_windows(losses, 500);
    for (int w : bad)
        std::fprintf(stderr,
                     "warning: mean loss over steps [%d,%d) did not decrease\n",
                     w * 500, (w + 1) * 500);

    if (!cfg.csv_path.empty()) log.write(cfg.csv_path);
    if (!cfg.ckpt_path.empty()) save_checkpoint(slow_to_store(params), cfg.ckpt_path);
    return params;
}

}  // namespace fastslow
