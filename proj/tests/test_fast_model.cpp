#include "fastslow/fast_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "fastslow/checkpoint.hpp"
#include "fastslow/fileio.hpp"

using namespace fastslow;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

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

std::vector<Tensor> random_embeds(int n, int64_t e, Rng& rng) {
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) out.push_back(Tensor::uniform({e}, rng, -1.0, 1.0));
    return out;
}

// plain-loop reference: per pair, log-sum-exp over the positive plus both
// cross pairings, minus the positive score
double ref_nce(const std::vector<Tensor>& f, const std::vector<Tensor>& g) {
    size_t B = f.size();
    auto dot = [&](size_t i, size_t j) {
        double s = 0.0;
        for (size_t k = 0; k < f[i].data.size(); ++k) s += f[i].data[k] * g[j].data[k];
        return s;
    };
    double total = 0.0;
    for (size_t i = 0; i < B; ++i) {
        std::vector<double> cand{dot(i, i)};
        for (size_t j = 0; j < B; ++j)
            if (j != i) cand.push_back(dot(j, i));
        for (size_t j = 0; j < B; ++j)
            if (j != i) cand.push_back(dot(i, j));
        double m = *std::max_element(cand.begin(), cand.end());
        double s = 0.0;
        for (double c : cand) s += std::exp(c - m);
        total += m + std::log(s) - cand[0];
    }
    return total;
}

const Dataset& fast_dataset() {
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

TrainFastConfig small_fast_cfg() {
    TrainFastConfig cfg;
    cfg.enc = ImageEncoderConfig{16, 3, {4, 4, 8}};
    cfg.embed_dim = 8;
    cfg.steps = 2;
    cfg.batch = 2;
    cfg.optim.lr = 1e-3;
    cfg.optim.warmup_steps = 0;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("a single pair has no negatives and scores exactly zero") {
    Rng rng(11);
    std::vector<Tensor> f = random_embeds(1, 6, rng);
    std::vector<Tensor> g = random_embeds(1, 6, rng);
    CHECK(nce_loss(f, g).value() == 0.0);
}

TEST_CASE("an equal-scoring sole live negative costs exactly log 2 per pair") {
    // scores: both positives 0; one cross score 0 (the live negative for
    // both pairs), the other -1000 so its exp underflows to zero
    std::vector<Tensor> f{Tensor::from_data({2}, {1.0, 0.0}),
                          Tensor::from_data({2}, {0.0, 0.0})};
    std::vector<Tensor> g{Tensor::from_data({2}, {0.0, 1.0}),
                          Tensor::from_data({2}, {-1000.0, 7.0})};
    CHECK(nce_loss(f, g).value() == 2.0 * std::log(2.0));
}

TEST_CASE("a batch where every score ties costs log(2B-1) per pair") {
    for (int B : {2, 3, 5}) {
        std::vector<Tensor> f(static_cast<size_t>(B), Tensor::from_data({3}, {0.5, -0.25, 2.0}));
        std::vector<Tensor> g(static_cast<size_t>(B), Tensor::from_data({3}, {1.0, 4.0, -0.125}));
        double want = B * std::log(2.0 * B - 1.0);
        CHECK(std::abs(nce_loss(f, g).value() - want) <= 1e-12);
    }
}

TEST_CASE("a batch of three matches a straight-line recomputation") {
    Rng rng(21);
    std::vector<Tensor> f = random_embeds(3, 4, rng);
    std::vector<Tensor> g = random_embeds(3, 4, rng);
    CHECK(std::abs(nce_loss(f, g).value() - ref_nce(f, g)) <= 1e-12);
}

TEST_CASE("the loss does not depend on the order of pairs in the batch") {
    Rng rng(22);
    std::vector<Tensor> f = random_embeds(4, 5, rng);
    std::vector<Tensor> g = random_embeds(4, 5, rng);
    double base = nce_loss(f, g).value();
    std::vector<size_t> perm{2, 0, 3, 1};
    std::vector<Tensor> fp, gp;
    for (size_t p : perm) {
        fp.push_back(f[p]);
        gp.push_back(g[p]);
    }
    CHECK(std::abs(nce_loss(fp, gp).value() - base) <= 1e-12);
}

TEST_CASE("any finite batch with negatives costs a positive loss") {
    for (uint64_t seed : {31, 32, 33, 34}) {
        Rng rng(seed);
        int B = 2 + static_cast<int>(rng.uniform_int(4));
        std::vector<Tensor> f = random_embeds(B, 3, rng);
        std::vector<Tensor> g = random_embeds(B, 3, rng);
        CHECK(nce_loss(f, g).value() > 0.0);
    }
}

TEST_CASE("malformed contrastive batches are rejected") {
    Rng rng(41);
    std::vector<Tensor> f = random_embeds(2, 3, rng);
    std::vector<Tensor> g = random_embeds(2, 3, rng);
    CHECK_THROWS_AS(nce_loss({}, {}), UsageError);
    CHECK_THROWS_AS(nce_loss(f, {g[0]}), UsageError);
    std::vector<Tensor> g_bad{g[0], Tensor::uniform({4}, rng, -1.0, 1.0)};
    CHECK_THROWS_AS(nce_loss(f, g_bad), UsageError);
    std::vector<Tensor> f_bad{f[0], Tensor::uniform({1, 3}, rng, -1.0, 1.0)};
    CHECK_THROWS_AS(nce_loss(f_bad, g), UsageError);
}

TEST_CASE("contrastive gradients match central differences") {
    Rng rng(51);
    std::vector<std::pair<std::string, Tensor>> params;
    for (int i = 0; i < 3; ++i)
        params.emplace_back("f" + std::to_string(i), Tensor::uniform({2}, rng, -1.0, 1.0));
    for (int i = 0; i < 3; ++i)
        params.emplace_back("g" + std::to_string(i), Tensor::uniform({2}, rng, -1.0, 1.0));

    auto objective = [](Tape*, std::vector<Tensor>& vals) {
        std::vector<Tensor> f(vals.begin(), vals.begin() + 3);
        std::vector<Tensor> g(vals.begin() + 3, vals.end());
        return nce_loss(f, g);
    };
    GradCheckResult res = grad_check(objective, params, 1e-5, 1e-4);
    INFO("worst rel err ", res.worst_rel_err);
    CHECK(res.pass);
}

TEST_CASE("contrastive gradients flow through both encoders") {
    Rng rng(52);
    ImageEncoderConfig enc{16, 3, {2, 2, 3}};
    DualEncoderParams model = init_dual_encoder(enc, 8, 2, rng);
    std::vector<Tensor> renders{Tensor::uniform({16, 16, 3}, rng, 0.0, 1.0),
                                Tensor::uniform({16, 16, 3}, rng, 0.0, 1.0)};
    std::vector<std::vector<int64_t>> tokens{{4, 6}, {5}};

    std::vector<std::pair<std::string, Tensor>> params;
    visit_dual_encoder(model, [&](const std::string& name, Tensor& t) {
        params.emplace_back(name, t);
    });
    auto objective = [&](Tape*, std::vector<Tensor>& vals) {
        DualEncoderParams local = model;
        size_t idx = 0;
        visit_dual_encoder(local, [&](const std::string&, Tensor& t) { t = vals[idx++]; });
        std::vector<Tensor> f, g;
        for (size_t b = 0; b < renders.size(); ++b) {
            f.push_back(embed_image(renders[b], local));
            g.push_back(embed_text(tokens[b], local));
        }
        return nce_loss(f, g);
    };
    GradCheckResult res = grad_check(objective, params, 1e-5, 2e-4);
    INFO("worst rel err ", res.worst_rel_err);
    CHECK(res.pass);
}

TEST_CASE("training for zero steps returns the seeded initialization") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    cfg.steps = 0;
    DualEncoderParams got = train_fast(ds, cfg);

    Rng rng(cfg.seed);
    Rng init_rng = rng.child(1);
    DualEncoderParams want = init_dual_encoder(cfg.enc, static_cast<int64_t>(ds.vocab.size()),
                                               cfg.embed_dim, init_rng);
    bool all_equal = true;
    std::vector<const Tensor*> want_items;
    visit_dual_encoder(want, [&](const std::string&, Tensor& t) { want_items.push_back(&t); });
    size_t idx = 0;
    visit_dual_encoder(got, [&](const std::string&, Tensor& t) {
        if (!same_bits(t, *want_items[idx++])) all_equal = false;
    });
    CHECK(all_equal);
}

TEST_CASE("training is deterministic per seed and logs schedule and loss") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    std::string csv = (std::filesystem::temp_directory_path() / "fast_train.csv").string();
    std::string ckpt = (std::filesystem::temp_directory_path() / "fast_train.ckpt").string();
    cfg.csv_path = csv;
    cfg.ckpt_path = ckpt;

    DualEncoderParams a = train_fast(ds, cfg);
    std::string csv_a = read_text(csv);
    DualEncoderParams b = train_fast(ds, cfg);
    std::string csv_b = read_text(csv);

    bool equal = true;
    std::vector<const Tensor*> b_items;
    visit_dual_encoder(b, [&](const std::string&, Tensor& t) { b_items.push_back(&t); });
    size_t idx = 0;
    visit_dual_encoder(a, [&](const std::string&, Tensor& t) {
        if (!same_bits(t, *b_items[idx++])) equal = false;
    });
    CHECK(equal);
    CHECK(strip_seconds_column(csv_a) == strip_seconds_column(csv_b));

    REQUIRE(csv_a.substr(0, 21) == "step,loss,lr,seconds\n");
    size_t lines = static_cast<size_t>(std::count(csv_a.begin(), csv_a.end(), '\n'));
    CHECK(lines == static_cast<size_t>(cfg.steps) + 1);
    OptimConfig sched = cfg.optim;
    sched.total_steps = cfg.steps;
    std::string row0 = csv_a.substr(21, csv_a.find('\n', 21) - 21);
    CHECK(row0.substr(0, 2) == "0,");
    CHECK(row0.find("," + format_double(lr_at_step(sched, 0)) + ",") != std::string::npos);

    // checkpoint restores the embedding behavior exactly
    DualEncoderParams c = train_fast(ds, [&] {
        TrainFastConfig alt = cfg;
        alt.seed = 99;
        alt.steps = 0;
        alt.csv_path.clear();
        alt.ckpt_path.clear();
        return alt;
    }());
    dual_encoder_from_store(c, load_checkpoint(ckpt));
    Tensor render = render_scene(ds.scenes[0], ds.cfg);
    CHECK(same_bits(embed_image(render, a), embed_image(render, c)));
    CHECK(same_bits(embed_text(ds.caption(0, 0).tokens, a),
                    embed_text(ds.caption(0, 0).tokens, c)));

    // a different seed trains a different model
    TrainFastConfig other = cfg;
    other.seed = 6;
    other.csv_path.clear();
    other.ckpt_path.clear();
    DualEncoderParams d = train_fast(ds, other);
    CHECK_FALSE(same_bits(a.text_table, d.text_table));
}

TEST_CASE("batches larger than the training split are rejected") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    cfg.batch = 31;
    CHECK_THROWS_WITH_AS(train_fast(ds, cfg), doctest::Contains("distinct"), UsageError);
}

TEST_CASE("a diverging run aborts with the step and batch context") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    cfg.steps = 6;
    cfg.batch = 2;
    cfg.optim.lr = 1e308;
    CHECK_THROWS_WITH_AS(train_fast(ds, cfg), doctest::Contains("step"), NumericError);
}

TEST_CASE("short training lifts gold-caption retrieval above chance on seen scenes") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    cfg.steps = 300;
    cfg.batch = 4;
    cfg.optim.lr = 3e-3;
    cfg.optim.warmup_steps = 20;

    DualEncoderParams model = train_fast(ds, cfg);

    std::vector<int64_t> ids = ds.split_scene_ids(Split::train);
    std::vector<Tensor> feats;
    for (int64_t id : ids)
        feats.push_back(embed_image(render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg),
                                    model));
    int hits = 0;
    for (size_t q = 0; q < ids.size(); ++q) {
        Tensor g = embed_text(ds.caption(ids[q], 0).tokens, model);
        double best = -1e300;
        size_t best_idx = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            double s = 0.0;
            for (size_t k = 0; k < g.data.size(); ++k) s += feats[i].data[k] * g.data[k];
            if (s > best) {
                best = s;
                best_idx = i;
            }
        }
        if (best_idx == q) ++hits;
    }
    double r1 = static_cast<double>(hits) / static_cast<double>(ids.size());
    double chance = 1.0 / static_cast<double>(ids.size());
    CHECK(r1 >= 3.0 * chance);
}

TEST_CASE("corpus embedding rows recompute the per-scene image embedding") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    cfg.steps = 0;
    DualEncoderParams model = train_fast(ds, cfg);

    CorpusEmbeddings emb = embed_corpus(ds, Split::val, model);
    std::vector<int64_t> ids = ds.split_scene_ids(Split::val);
    std::sort(ids.begin(), ids.end());
    REQUIRE(emb.count() == static_cast<int64_t>(ids.size()));
    REQUIRE(emb.dim == cfg.embed_dim);
    CHECK(std::is_sorted(emb.scene_ids.begin(), emb.scene_ids.end()));
    CHECK(emb.scene_ids == ids);

    for (size_t i = 0; i < ids.size(); ++i) {
        Tensor row = embed_image(render_scene(ds.scenes[static_cast<size_t>(ids[i])], ds.cfg),
                                 model);
        for (size_t k = 0; k < static_cast<size_t>(emb.dim); ++k) {
            float want = static_cast<float>(row.data[k]);
            float got = emb.rows[i * static_cast<size_t>(emb.dim) + k];
            CHECK(std::memcmp(&want, &got, sizeof(float)) == 0);
        }
    }
}

TEST_CASE("an empty split embeds to an empty container that still round-trips") {
    DatasetConfig dcfg;
    dcfg.train_scenes = 3;
    dcfg.val_scenes = 0;
    dcfg.test_scenes = 2;
    dcfg.raster = 16;
    Dataset ds = generate_dataset(dcfg, 9);

    Rng rng(1);
    DualEncoderParams model =
        init_dual_encoder(ImageEncoderConfig{16, 3, {4, 4, 8}}, ds.vocab.size(), 8, rng);
    CorpusEmbeddings emb = embed_corpus(ds, Split::val, model);
    CHECK(emb.count() == 0);
    CHECK(emb.dim == 8);

    std::string path = (std::filesystem::temp_directory_path() / "empty.emb").string();
    save_embeddings(emb, path);
    CorpusEmbeddings back = load_embeddings(path);
    CHECK(back.count() == 0);
    CHECK(back.dim == 8);
}

TEST_CASE("embedding files round-trip bitwise and rewrite byte-identically") {
    const Dataset& ds = fast_dataset();
    TrainFastConfig cfg = small_fast_cfg();
    cfg.steps = 0;
    DualEncoderParams model = train_fast(ds, cfg);

    std::string p1 = (std::filesystem::temp_directory_path() / "corpus1.emb").string();
    std::string p2 = (std::filesystem::temp_directory_path() / "corpus2.emb").string();
    CorpusEmbeddings emb = embed_corpus(ds, Split::test, model);
    save_embeddings(emb, p1);
    CorpusEmbeddings again = embed_corpus(ds, Split::test, model);
    save_embeddings(again, p2);
    CHECK(read_text(p1) == read_text(p2));

    CorpusEmbeddings back = load_embeddings(p1);
    CHECK(back.scene_ids == emb.scene_ids);
    REQUIRE(back.rows.size() == emb.rows.size());
    CHECK(std::memcmp(back.rows.data(), emb.rows.data(),
                      emb.rows.size() * sizeof(float)) == 0);
}

TEST_CASE("damaged embedding files are refused") {
    const Dataset& ds = fast_dataset();
    Rng rng(2);
    DualEncoderParams model =
        init_dual_encoder(ImageEncoderConfig{16, 3, {4, 4, 8}}, ds.vocab.size(), 8, rng);
    CorpusEmbeddings emb = embed_corpus(ds, Split::val, model);
    std::string path = (std::filesystem::temp_directory_path() / "damaged.emb").string();
    save_embeddings(emb, path);
    std::string good = read_text(path);

    SUBCASE("flipped payload byte fails the checksum") {
        std::string bad = good;
        bad[bad.size() - 12] ^= 0x40;
        atomic_write_text(path, bad);
        CHECK_THROWS_WITH_AS(load_embeddings(path), doctest::Contains("checksum"), DataError);
    }
    SUBCASE("truncation is rejected") {
        atomic_write_text(path, good.substr(0, good.size() - 3));
        CHECK_THROWS_AS(load_embeddings(path), DataError);
    }
    SUBCASE("foreign magic is rejected") {
        std::string bad = good;
        bad[0] = 'X';
        atomic_write_text(path, bad);
        CHECK_THROWS_WITH_AS(load_embeddings(path), doctest::Contains("magic"), DataError);
    }
    SUBCASE("trailing bytes are rejected") {
        atomic_write_text(path, good + "zz");
        CHECK_THROWS_AS(load_embeddings(path), DataError);
    }
}
