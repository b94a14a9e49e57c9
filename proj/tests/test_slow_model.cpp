#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fastslow/dataset.hpp"
#include "fastslow/fileio.hpp"
#include "fastslow/slow_model.hpp"
#include "fastslow/tensor.hpp"

using namespace fastslow;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

// drops the trailing wall-time cell of every line; timings are real
// measurements and legitimately differ between runs
std::string strip_seconds_column(const std::string& csv) {
    std::string out;
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t eol = csv.find('\n', pos);
        if (eol == std::string::npos) eol = csv.size();
        std::string line = csv.substr(pos, eol - pos);
        size_t comma = line.rfind(',');
        out += line.substr(0, comma);
        out += '\n';
        pos = eol + 1;
    }
    return out;
}

DecoderConfig tiny_cfg() {
    DecoderConfig cfg;
    cfg.vocab_size = 5;
    cfg.dm = 8;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.max_positions = 8;
    cfg.feature_dim = 3;
    return cfg;
}

void zero_decoder(DecoderParams& dec) {
    visit_decoder(dec, "", [](const std::string&, Tensor& t) {
        std::fill(t.data.begin(), t.data.end(), 0.0);
    });
}

// ---- straight-line reference decoder (plain loops, no shared code) ----------

using Mat = std::vector<std::vector<double>>;

Mat ref_proj(const Mat& x, const Tensor& w, const Tensor& b, int in_dim, int out_dim) {
    Mat y(x.size(), std::vector<double>(static_cast<size_t>(out_dim)));
    for (size_t i = 0; i < x.size(); ++i)
        for (int c = 0; c < out_dim; ++c) {
            double acc = b.data[static_cast<size_t>(c)];
            for (int j = 0; j < in_dim; ++j)
                acc += x[i][static_cast<size_t>(j)] *
                       w.data[static_cast<size_t>(j * out_dim + c)];
            y[i][static_cast<size_t>(c)] = acc;
        }
    return y;
}

void ref_layer_norm(Mat& x, const Tensor& g, const Tensor& b) {
    for (auto& row : x) {
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(row.size());
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(row.size());
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (size_t j = 0; j < row.size(); ++j)
            row[j] = (row[j] - mu) * inv * g.data[j] + b.data[j];
    }
}

// attends q rows over k/v rows, per head; keys limited to <= query index
// when causal
Mat ref_attention(const Mat& q, const Mat& k, const Mat& v, int heads, bool causal) {
    size_t nq = q.size(), nk = k.size();
    int dm = static_cast<int>(q[0].size());
    int dh = dm / heads;
    Mat ctx(nq, std::vector<double>(static_cast<size_t>(dm), 0.0));
    for (int h = 0; h < heads; ++h) {
        int off = h * dh;
        for (size_t i = 0; i < nq; ++i) {
            size_t limit = causal ? i + 1 : nk;
            std::vector<double> s(limit);
            for (size_t j = 0; j < limit; ++j) {
                double acc = 0.0;
                for (int c = 0; c < dh; ++c)
                    acc += q[i][static_cast<size_t>(off + c)] *
                           k[j][static_cast<size_t>(off + c)];
                s[j] = acc / std::sqrt(static_cast<double>(dh));
            }
            double m = *std::max_element(s.begin(), s.end());
            double z = 0.0;
            for (double& e : s) {
                e = std::exp(e - m);
                z += e;
            }
            for (size_t j = 0; j < limit; ++j)
                for (int c = 0; c < dh; ++c)
                    ctx[i][static_cast<size_t>(off + c)] +=
                        (s[j] / z) * v[j][static_cast<size_t>(off + c)];
        }
    }
    return ctx;
}

Mat ref_decoder_logits(const Tensor& features, const std::vector<int64_t>& tokens,
                       const DecoderParams& dec) {
    const DecoderConfig& cfg = dec.cfg;
    int dm = cfg.dm;
    size_t n = tokens.size();
    Mat x(n, std::vector<double>(static_cast<size_t>(dm)));
    for (size_t i = 0; i < n; ++i)
        for (int j = 0; j < dm; ++j)
            x[i][static_cast<size_t>(j)] =
                dec.token_table.data[static_cast<size_t>(tokens[i] * dm + j)] +
                dec.pos_table.data[static_cast<size_t>(static_cast<int64_t>(i) * dm + j)];

    size_t hh = static_cast<size_t>(features.shape[0] * features.shape[1]);
    int d = static_cast<int>(features.shape[2]);
    Mat flat(hh, std::vector<double>(static_cast<size_t>(d)));
    for (size_t r = 0; r < hh; ++r)
        for (int c = 0; c < d; ++c)
            flat[r][static_cast<size_t>(c)] =
                features.data[r * static_cast<size_t>(d) + static_cast<size_t>(c)];

    for (const DecoderLayerParams& lay : dec.layers) {
        Mat a = x;
        ref_layer_norm(a, lay.ln1_g, lay.ln1_b);
        Mat q = ref_proj(a, lay.self_attn.wq, lay.self_attn.bq, dm, dm);
        Mat k = ref_proj(a, lay.self_attn.wk, lay.self_attn.bk, dm, dm);
        Mat v = ref_proj(a, lay.self_attn.wv, lay.self_attn.bv, dm, dm);
        Mat mixed = ref_attention(q, k, v, cfg.heads, true);
        Mat so = ref_proj(mixed, lay.self_attn.wo, lay.self_attn.bo, dm, dm);
        for (size_t i = 0; i < n; ++i)
            for (int j = 0; j < dm; ++j) x[i][static_cast<size_t>(j)] += so[i][static_cast<size_t>(j)];

        Mat c2 = x;
        ref_layer_norm(c2, lay.ln2_g, lay.ln2_b);
        Mat q2 = ref_proj(c2, lay.cross_attn.wq, lay.cross_attn.bq, dm, dm);
        Mat kf = ref_proj(flat, lay.cross_attn.wk, lay.cross_attn.bk, d, dm);
        Mat vf = ref_proj(flat, lay.cross_attn.wv, lay.cross_attn.bv, d, dm);
        Mat mixed2 = ref_attention(q2, kf, vf, cfg.heads, false);
        Mat co = ref_proj(mixed2, lay.cross_attn.wo, lay.cross_attn.bo, dm, dm);
        for (size_t i = 0; i < n; ++i)
            for (int j = 0; j < dm; ++j) x[i][static_cast<size_t>(j)] += co[i][static_cast<size_t>(j)];

        Mat f3 = x;
        ref_layer_norm(f3, lay.ln3_g, lay.ln3_b);
        Mat h1 = ref_proj(f3, lay.ff_w1, lay.ff_b1, dm, 4 * dm);
        for (auto& row : h1)
            for (double& e : row) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
        Mat h2 = ref_proj(h1, lay.ff_w2, lay.ff_b2, 4 * dm, dm);
        for (size_t i = 0; i < n; ++i)
            for (int j = 0; j < dm; ++j) x[i][static_cast<size_t>(j)] += h2[i][static_cast<size_t>(j)];
    }
    ref_layer_norm(x, dec.final_g, dec.final_b);
    return ref_proj(x, dec.out_w, dec.out_b, dm, static_cast<int>(cfg.vocab_size));
}

double ref_log_softmax_pick(const Tensor& logits, int64_t row, int64_t col) {
    int64_t vcount = logits.shape[1];
    double m = -1e308;
    for (int64_t j = 0; j < vcount; ++j)
        m = std::max(m, logits.data[static_cast<size_t>(row * vcount + j)]);
    double z = 0.0;
    for (int64_t j = 0; j < vcount; ++j)
        z += std::exp(logits.data[static_cast<size_t>(row * vcount + j)] - m);
    return logits.data[static_cast<size_t>(row * vcount + col)] - m - std::log(z);
}

}  // namespace

TEST_CASE("decoder logits match a straight-line reference on the tiny config") {
    Rng rng(31);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);
    std::vector<int64_t> input = {Vocabulary::bos_id, 3, 4, 3};  // BOS + 3 content tokens

    Tensor got = decoder_logits(feat, input, dec);
    Mat want = ref_decoder_logits(feat, input, dec);
    REQUIRE(got.shape == Shape{4, 5});
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 5; ++j) CHECK(std::abs(got.data[i * 5 + j] - want[i][j]) <= 1e-10);

    // two layers and a different geometry, same oracle
    DecoderConfig two = tiny_cfg();
    two.layers = 2;
    two.dm = 12;
    two.heads = 3;
    DecoderParams dec2 = init_decoder(two, rng);
    Tensor feat2 = Tensor::uniform({4, 4, 3}, rng, -1.0, 1.0);
    Tensor got2 = decoder_logits(feat2, input, dec2);
    Mat want2 = ref_decoder_logits(feat2, input, dec2);
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 5; ++j) CHECK(std::abs(got2.data[i * 5 + j] - want2[i][j]) <= 1e-10);
}

TEST_CASE("zero parameters give constant logits and the uniform score") {
    Rng rng(32);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    zero_decoder(dec);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);

    Tensor logits = decoder_logits(feat, {Vocabulary::bos_id, 3, 4}, dec);
    for (double v : logits.data) CHECK(v == 0.0);

    // uniform likelihood: -(L+1) log V per direction
    std::vector<int64_t> y = with_sentinels({3, 4, 3});
    double expect = -4.0 * std::log(5.0);
    Tensor h_fwd = caption_score_fwd(feat, y, dec);
    CHECK(std::abs(h_fwd.value() - expect) <= 1e-12);

    SlowParams slow;
    slow.image = init_image_encoder(ImageEncoderConfig{16, 3, {2, 2, 3}}, rng);
    slow.target_resolution = 4;
    slow.fwd = dec;
    slow.bwd = dec;
    Tensor h = caption_score(feat, y, slow);
    CHECK(std::abs(h.value() - 2.0 * expect) <= 1e-12);
}

TEST_CASE("causality is exact: suffix edits leave earlier rows untouched") {
    Rng rng(33);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);

    std::vector<int64_t> input = {Vocabulary::bos_id, 3, 4, 3};
    Tensor full = decoder_logits(feat, input, dec);

    // flip the last token: rows before it must be bit-identical
    std::vector<int64_t> flipped = input;
    flipped[3] = 4;
    Tensor alt = decoder_logits(feat, flipped, dec);
    for (size_t i = 0; i < 3 * 5; ++i) CHECK(full.data[i] == alt.data[i]);
    // and the final row moves
    bool last_differs = false;
    for (size_t j = 0; j < 5; ++j)
        if (full.data[3 * 5 + j] != alt.data[3 * 5 + j]) last_differs = true;
    CHECK(last_differs);

    // every prefix reproduces the matching rows of the full run exactly
    for (size_t m = 1; m < input.size(); ++m) {
        std::vector<int64_t> prefix(input.begin(), input.begin() + static_cast<long>(m));
        Tensor part = decoder_logits(feat, prefix, dec);
        for (size_t i = 0; i < m * 5; ++i) CHECK(part.data[i] == full.data[i]);
    }
}

TEST_CASE("caption scores match direct enumeration of log-likelihoods") {
    Rng rng(34);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);
    std::vector<int64_t> y = with_sentinels({3, 4, 3});

    // library score vs indexing the true tokens in one logits pass
    std::vector<int64_t> input(y.begin(), y.end() - 1);
    Tensor logits = decoder_logits(feat, input, dec);
    double want = 0.0;
    for (size_t l = 0; l + 1 < y.size(); ++l)
        want += ref_log_softmax_pick(logits, static_cast<int64_t>(l), y[l + 1]);
    Tensor got = caption_score_fwd(feat, y, dec);
    CHECK(std::abs(got.value() - want) <= 1e-10);
    CHECK(got.value() <= 0.0);

    // the bidirectional score is exactly the sum of the two directions
    Rng rng2(35);
    SlowParams slow;
    slow.image = init_image_encoder(ImageEncoderConfig{16, 3, {2, 2, 3}}, rng2);
    slow.target_resolution = 4;
    slow.fwd = dec;
    slow.bwd = init_decoder(tiny_cfg(), rng2);
    Tensor h = caption_score(feat, y, slow);
    Tensor hf = caption_score_fwd(feat, y, slow.fwd);
    Tensor hb = caption_score_fwd(feat, reverse_caption(y), slow.bwd);
    CHECK(h.value() == hf.value() + hb.value());

    // identical decoders + palindromic content: h = 2 h_fwd exactly
    slow.bwd = slow.fwd;
    std::vector<int64_t> pal = with_sentinels({3, 4, 3});
    CHECK(caption_score(feat, pal, slow).value() ==
          2.0 * caption_score_fwd(feat, pal, slow.fwd).value());
}

TEST_CASE("per-position terms are nonpositive so longer checks only sink the score") {
    Rng rng(36);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);

    std::vector<int64_t> y = with_sentinels({3, 4, 3});
    std::vector<int64_t> input(y.begin(), y.end() - 1);
    Tensor logits = decoder_logits(feat, input, dec);
    double partial = 0.0;
    for (size_t l = 0; l + 1 < y.size(); ++l) {
        double term = ref_log_softmax_pick(logits, static_cast<int64_t>(l), y[l + 1]);
        CHECK(term <= 0.0);
        partial += term;
        CHECK(partial <= 0.0);
    }

    // appending a token to a near-uniform decoder lowers the score
    double h3 = caption_score_fwd(feat, with_sentinels({3, 4, 3}), dec).value();
    double h4 = caption_score_fwd(feat, with_sentinels({3, 4, 3, 4}), dec).value();
    CHECK(h4 < h3);
}

TEST_CASE("reversal keeps the sentinels and flips only the content") {
    std::vector<int64_t> y = with_sentinels({4, 5, 6, 7});
    std::vector<int64_t> r = reverse_caption(y);
    CHECK(r == std::vector<int64_t>{Vocabulary::bos_id, 7, 6, 5, 4, Vocabulary::eos_id});
    CHECK(reverse_caption(r) == y);
    CHECK_THROWS_AS(reverse_caption({3, 4}), DataError);
}

TEST_CASE("scoring validates its caption") {
    Rng rng(37);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);
    CHECK_THROWS_AS(caption_score_fwd(feat, {3, 4}, dec), DataError);  // no sentinels
    CHECK_THROWS_AS(caption_score_fwd(feat, with_sentinels({3, 9}), dec), DataError);  // id >= V
    CHECK_THROWS_AS(caption_score_fwd(feat, with_sentinels({3, Vocabulary::pad_id}), dec),
                    DataError);
    std::vector<int64_t> toolong(12, 4);
    CHECK_THROWS_WITH_AS(caption_score_fwd(feat, with_sentinels(toolong), dec),
                         doctest::Contains("8"), DataError);
    // wrong feature width
    Tensor bad_feat = Tensor::uniform({2, 2, 5}, rng, -1.0, 1.0);
    CHECK_THROWS_AS(caption_score_fwd(bad_feat, with_sentinels({3}), dec), UsageError);
}

TEST_CASE("ranking by caption score ignores constant logit shifts") {
    Rng rng(38);
    DecoderParams dec = init_decoder(tiny_cfg(), rng);
    std::vector<int64_t> y = with_sentinels({3, 4});

    std::vector<Tensor> items;
    for (int i = 0; i < 12; ++i) items.push_back(Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0));
    auto ranking = [&](const DecoderParams& d) {
        std::vector<std::pair<double, int>> scored;
        for (size_t i = 0; i < items.size(); ++i)
            scored.emplace_back(-caption_score_fwd(items[i], y, d).value(),
                                static_cast<int>(i));
        std::sort(scored.begin(), scored.end());
        std::vector<int> order;
        for (auto& [s, i] : scored) order.push_back(i);
        return order;
    };

    std::vector<int> base = ranking(dec);
    DecoderParams shifted = dec;
    for (double& v : shifted.out_b.data) v += 0.37;  // shifts every logits row
    CHECK(ranking(shifted) == base);

    double h0 = caption_score_fwd(items[0], y, dec).value();
    double h0s = caption_score_fwd(items[0], y, shifted).value();
    CHECK(h0 == doctest::Approx(h0s).epsilon(1e-9));
}

TEST_CASE("feature caches reproduce the uncached scores bit for bit") {
    Rng rng(39);
    DecoderConfig cfg = tiny_cfg();
    cfg.layers = 2;
    DecoderParams dec = init_decoder(cfg, rng);
    Tensor feat = Tensor::uniform({4, 4, 3}, rng, -1.0, 1.0);
    std::vector<int64_t> y = with_sentinels({3, 4, 3});

    FeatureCache cache = make_feature_cache(feat, dec);
    CHECK(same_bits(decoder_logits(feat, {1, 3, 4}, dec),
                    decoder_logits(feat, {1, 3, 4}, dec, &cache)));
    CHECK(caption_score_fwd(feat, y, dec).value() ==
          caption_score_fwd(feat, y, dec, &cache).value());

    FeatureCache wrong;
    wrong.k = {cache.k[0]};
    wrong.v = {cache.v[0]};
    CHECK_THROWS_AS(decoder_logits(feat, {1, 3}, dec, &wrong), UsageError);
}

TEST_CASE("attention records normalize, flag heads, and match recomputation") {
    Rng rng(40);
    DecoderConfig cfg = tiny_cfg();
    cfg.layers = 2;
    cfg.heads = 2;
    DecoderParams dec = init_decoder(cfg, rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);
    std::vector<int64_t> y = with_sentinels({3, 4, 3});

    AttentionRecord rec = attention_maps(feat, y, dec);
    REQUIRE(rec.weights.size() == 2);
    REQUIRE(rec.scores.size() == 2);
    REQUIRE(rec.best_head.size() == 2);
    for (size_t layer = 0; layer < 2; ++layer) {
        REQUIRE(rec.weights[layer].size() == 2);
        for (const Tensor& w : rec.weights[layer]) {
            REQUIRE(w.shape == Shape{4, 4});  // 4 text positions x 2x2 grid
            for (int64_t i = 0; i < 4; ++i) {
                double sum = 0.0;
                for (int64_t j = 0; j < 4; ++j) sum += w.data[static_cast<size_t>(i * 4 + j)];
                CHECK(std::abs(sum - 1.0) <= 1e-9);
            }
        }
        // flagged head equals an independent recomputation of mean scores
        REQUIRE(rec.best_head[layer].size() == 4);
        for (int64_t row = 0; row < 4; ++row) {
            int want = 0;
            double best = -1e308;
            for (size_t h = 0; h < rec.scores[layer].size(); ++h) {
                const Tensor& s = rec.scores[layer][h];
                double mean = 0.0;
                for (int64_t j = 0; j < 4; ++j) mean += s.data[static_cast<size_t>(row * 4 + j)];
                mean /= 4.0;
                if (mean > best) {
                    best = mean;
                    want = static_cast<int>(h);
                }
            }
            CHECK(rec.best_head[layer][static_cast<size_t>(row)] == want);
        }
    }

    // single-head model: the flagged head is head 0 everywhere
    DecoderConfig one = tiny_cfg();
    one.heads = 1;
    DecoderParams dec1 = init_decoder(one, rng);
    AttentionRecord rec1 = attention_maps(feat, y, dec1);
    for (const auto& layer : rec1.best_head)
        for (int h : layer) CHECK(h == 0);
}

TEST_CASE("caption likelihood gradients pass the finite-difference check") {
    Rng rng(41);
    DecoderConfig cfg;
    cfg.vocab_size = 5;
    cfg.dm = 4;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.max_positions = 6;
    cfg.feature_dim = 3;
    DecoderParams dec = init_decoder(cfg, rng);
    Tensor feat = Tensor::uniform({2, 2, 3}, rng, -1.0, 1.0);
    std::vector<int64_t> y = with_sentinels({3, 4});

    std::vector<std::pair<std::string, Tensor>> params;
    DecoderParams probe = dec;
    visit_decoder(probe, "", [&](const std::string& name, Tensor& t) {
        params.emplace_back(name, t);
    });

    auto objective = [&](Tape*, std::vector<Tensor>& vals) {
        DecoderParams local = dec;
        size_t idx = 0;
        visit_decoder(local, "", [&](const std::string&, Tensor& t) { t = vals[idx++]; });
        return scale(caption_score_fwd(feat, y, local), -1.0);
    };

    GradCheckResult res = grad_check(objective, params, 1e-5, 1e-4);
    INFO("worst rel err ", res.worst_rel_err);
    CHECK(res.pass);
}

TEST_CASE("slow parameters survive a checkpoint cycle") {
    Rng rng(42);
    ImageEncoderConfig enc{16, 3, {2, 2, 3}};
    SlowParams a = init_slow(enc, tiny_cfg(), 4, rng);
    std::string path = (std::filesystem::temp_directory_path() / "slow_ckpt.bin").string();
    save_checkpoint(slow_to_store(a), path);

    Rng rng2(43);
    SlowParams b = init_slow(enc, tiny_cfg(), 4, rng2);
    slow_from_store(b, load_checkpoint(path));

    Tensor render = Tensor::uniform({16, 16, 3}, rng, 0.0, 1.0);
    Tensor phi_a = encode_image(render, a.image, 4);
    Tensor phi_b = encode_image(render, b.image, 4);
    CHECK(same_bits(phi_a, phi_b));
    std::vector<int64_t> y = with_sentinels({3, 4});
    CHECK(caption_score(phi_a, y, a).value() == caption_score(phi_b, y, b).value());
}


namespace {

const Dataset& train_test_dataset() {
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

TrainSlowConfig small_train_cfg() {
    TrainSlowConfig cfg;
    cfg.enc = ImageEncoderConfig{16, 3, {4, 4, 8}};
    cfg.dec.vocab_size = 0;  // filled from the dataset
    cfg.dec.dm = 16;
    cfg.dec.heads = 2;
    cfg.dec.layers = 1;
    cfg.dec.max_positions = 16;
    cfg.dec.feature_dim = 8;
    cfg.target_resolution = 4;
    cfg.steps = 2;
    cfg.batch = 2;
    cfg.optim.lr = 1e-3;
    cfg.optim.warmup_steps = 0;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("zero training steps return the seeded initialization") {
    const Dataset& ds = train_test_dataset();
    TrainSlowConfig cfg = small_train_cfg();
    cfg.steps = 0;
    SlowParams got = train_slow(ds, cfg);

    Rng rng(cfg.seed);
    Rng init_rng = rng.child(1);
    DecoderConfig dec_cfg = cfg.dec;
    dec_cfg.vocab_size = ds.vocab.size();
    SlowParams want = init_slow(cfg.enc, dec_cfg, cfg.target_resolution, init_rng);

    bool all_equal = true;
    visit_slow(got, [&](const std::string& name, Tensor& t) {
        Tensor* other = nullptr;
        visit_slow(want, [&](const std::string& name2, Tensor& t2) {
            if (name2 == name) other = &t2;
        });
        REQUIRE(other != nullptr);
        if (!same_bits(t, *other)) all_equal = false;
    });
    CHECK(all_equal);
}

TEST_CASE("training is bit-deterministic in the seed and logs its schedule") {
    const Dataset& ds = train_test_dataset();
    TrainSlowConfig cfg = small_train_cfg();
    std::string csv = (std::filesystem::temp_directory_path() / "slow_train.csv").string();
    std::string ckpt = (std::filesystem::temp_directory_path() / "slow_train.ckpt").string();
    cfg.csv_path = csv;
    cfg.ckpt_path = ckpt;

    SlowParams a = train_slow(ds, cfg);
    std::string csv_a = read_text(csv);
    SlowParams b = train_slow(ds, cfg);
    std::string csv_b = read_text(csv);

    bool equal = true;
    std::vector<std::pair<std::string, const Tensor*>> b_items;
    visit_slow(b, [&](const std::string& n, Tensor& t) { b_items.emplace_back(n, &t); });
    size_t idx = 0;
    visit_slow(a, [&](const std::string&, Tensor& t) {
        if (!same_bits(t, *b_items[idx++].second)) equal = false;
    });
    CHECK(equal);
    CHECK(strip_seconds_column(csv_a) == strip_seconds_column(csv_b));

    // log structure: header plus one row per step, lr column from the schedule
    REQUIRE(csv_a.substr(0, 21) == "step,loss,lr,seconds\n");
    size_t lines = static_cast<size_t>(std::count(csv_a.begin(), csv_a.end(), '\n'));
    CHECK(lines == static_cast<size_t>(cfg.steps) + 1);
    OptimConfig sched = cfg.optim;
    sched.total_steps = cfg.steps;
    std::string row0 = csv_a.substr(21, csv_a.find('\n', 21) - 21);
    CHECK(row0.substr(0, 2) == "0,");
    CHECK(row0.find("," + format_double(lr_at_step(sched, 0)) + ",") != std::string::npos);

    // checkpoint restores scoring behavior exactly
    Rng rng(123);
    SlowParams c = train_slow(ds, [&] {
        TrainSlowConfig alt = cfg;
        alt.seed = 99;  // different init to overwrite
        alt.steps = 0;
        alt.csv_path.clear();
        alt.ckpt_path.clear();
        return alt;
    }());
    slow_from_store(c, load_checkpoint(ckpt));
    Tensor render = render_scene(ds.scenes[0], ds.cfg);
    Tensor phi_a = encode_image(render, a.image, cfg.target_resolution);
    Tensor phi_c = encode_image(render, c.image, cfg.target_resolution);
    std::vector<int64_t> y = with_sentinels(ds.captions[0].tokens);
    CHECK(caption_score(phi_a, y, a).value() == caption_score(phi_c, y, c).value());

    // a different seed trains to different parameters
    TrainSlowConfig other = cfg;
    other.seed = 6;
    other.csv_path.clear();
    other.ckpt_path.clear();
    SlowParams d = train_slow(ds, other);
    CHECK_FALSE(same_bits(a.fwd.token_table, d.fwd.token_table));
}

TEST_CASE("tying the token tables keeps both directions identical") {
    const Dataset& ds = train_test_dataset();
    TrainSlowConfig cfg = small_train_cfg();
    cfg.steps = 2;
    cfg.share_token_table = true;
    SlowParams tied = train_slow(ds, cfg);
    CHECK(same_bits(tied.fwd.token_table, tied.bwd.token_table));

    cfg.share_token_table = false;
    SlowParams split = train_slow(ds, cfg);
    CHECK_FALSE(same_bits(split.fwd.token_table, split.bwd.token_table));
}

TEST_CASE("a diverging run aborts with the step and batch context") {
    const Dataset& ds = train_test_dataset();
    TrainSlowConfig cfg = small_train_cfg();
    cfg.steps = 4;
    cfg.batch = 1;
    cfg.optim.lr = 1e308;
    CHECK_THROWS_WITH_AS(train_slow(ds, cfg), doctest::Contains("step"), NumericError);
}

TEST_CASE("short training lifts gold-caption retrieval above chance on seen scenes") {
    const Dataset& ds = train_test_dataset();
    TrainSlowConfig cfg = small_train_cfg();
    cfg.steps = 400;
    cfg.batch = 4;
    cfg.optim.lr = 3e-3;
    cfg.optim.warmup_steps = 20;

    SlowParams model = train_slow(ds, cfg);

    // rank every train scene for each train query (gold caption 0)
    std::vector<int64_t> ids = ds.split_scene_ids(Split::train);
    std::vector<Tensor> feats;
    std::vector<FeatureCache> cf, cb;
    for (int64_t id : ids) {
        Tensor phi = encode_image(render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg),
                                  model.image, cfg.target_resolution);
        cf.push_back(make_feature_cache(phi, model.fwd));
        cb.push_back(make_feature_cache(phi, model.bwd));
        feats.push_back(phi);
    }
    int hits = 0;
    for (size_t qi = 0; qi < ids.size(); ++qi) {
        std::vector<int64_t> y = with_sentinels(ds.caption(ids[qi], 0).tokens);
        double best = -1e308;
        size_t best_idx = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            double h = caption_score(feats[i], y, model, &cf[i], &cb[i]).value();
            if (h > best) {
                best = h;
                best_idx = i;
            }
        }
        if (best_idx == qi) ++hits;
    }
    double r1 = static_cast<double>(hits) / static_cast<double>(ids.size());
    double chance = 1.0 / static_cast<double>(ids.size());
    INFO("train R@1 ", r1, " vs chance ", chance);
    CHECK(r1 >= 3.0 * chance);
}
