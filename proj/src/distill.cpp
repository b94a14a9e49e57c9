#include "fastslow/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <tuple>

#include "fastslow/checkpoint.hpp"
#include "fastslow/fileio.hpp"

namespace fastslow {

namespace {

Tensor detached_copy(const Tensor& t) {
    Tensor out = t;
    out.tape = nullptr;
    out.node = -1;
    return out;
}

void validate_batch(const DistillBatch& b) {
    if (b.teacher_scores.shape.size() != 1 || b.student_scores.shape.size() != 1)
        throw UsageError("candidate scores must be vectors");
    if (b.teacher_scores.shape[0] != b.student_scores.shape[0])
        throw UsageError("teacher and student score counts differ: " +
                         std::to_string(b.teacher_scores.shape[0]) + " vs " +
                         std::to_string(b.student_scores.shape[0]));
    if (b.anchor < 0 || b.anchor >= b.teacher_scores.shape[0])
        throw UsageError("anchor index " + std::to_string(b.anchor) +
                         " outside the candidate set");
    for (double v : b.teacher_scores.data)
        if (!std::isfinite(v)) throw NumericError("teacher scores must be finite");
}

Tensor softened(const Tensor& scores, double tau) {
    if (!(tau > 0.0)) throw UsageError("temperature must be positive");
    return softmax(scale(scores, 1.0 / tau), 0);
}

}  // namespace

Tensor teacher_dist(const DistillBatch& b, double tau) {
    validate_batch(b);
    return softened(detached_copy(b.teacher_scores), tau);
}

Tensor student_dist(const DistillBatch& b, double tau) {
    validate_batch(b);
    for (double v : b.student_scores.data)
        if (!std::isfinite(v)) throw NumericError("student scores must be finite");
    return softened(b.student_scores, tau);
}

Tensor cross_entropy(const Tensor& p, const Tensor& q) {
    if (p.shape.size() != 1 || q.shape.size() != 1 || p.shape[0] != q.shape[0])
        throw UsageError("cross-entropy needs two aligned probability vectors");
    bool vanished = false;
    for (size_t i = 0; i < q.data.size(); ++i) {
        if (q.data[i] == 0.0) {
            vanished = true;
            if (p.data[i] > 0.0)
                std::fprintf(stderr,
                             "warning: probability underflow, clamping at 1e-300 in "
                             "cross-entropy\n");
        }
    }
    if (vanished) {
        // degenerate target: fall back to a clamped constant (scores this
        // extreme carry no usable gradient anyway)
        double h = 0.0;
        for (size_t i = 0; i < q.data.size(); ++i)
            h -= p.data[i] * std::log(std::max(q.data[i], 1e-300));
        return Tensor::scalar(h);
    }
    return scale(sum_all(mul(detached_copy(p), log(q))), -1.0);
}

Tensor distill_loss(const std::vector<DistillBatch>& batches, double tau) {
    if (batches.empty()) throw UsageError("no distillation batches");
    Tensor total = Tensor::scalar(0.0);
    for (const DistillBatch& b : batches)
        total = add(total, cross_entropy(teacher_dist(b, tau), student_dist(b, tau)));
    return total;
}

Tensor combined_objective(const std::vector<DistillBatch>& batches,
                          const std::vector<Tensor>& image_embeds,
                          const std::vector<Tensor>& text_embeds, double alpha,
                          double tau) {
    if (alpha < 0.0) throw UsageError("objective weight must be non-negative");
    Tensor dist = distill_loss(batches, tau);
    if (alpha == 0.0) return dist;
    return add(dist, scale(nce_loss(image_embeds, text_embeds), alpha));
}

namespace {

// frozen-teacher scorer memoizing per-scene features and pair scores
class TeacherScorer {
  public:
    TeacherScorer(const Dataset& ds, const SlowParams& teacher,
                  const std::vector<int64_t>& scene_ids,
                  const std::vector<Tensor>& renders)
        : ds_(ds), teacher_(teacher), scene_ids_(scene_ids), renders_(renders),
          caches_(scene_ids.size()) {}

    double score(size_t image_idx, int64_t caption_scene, int caption_idx) {
        auto key = std::make_tuple(scene_ids_[image_idx], caption_scene, caption_idx);
        auto it = memo_.find(key);
        if (it != memo_.end()) return it->second;
        const Entry& e = entry(image_idx);
        const Caption& cap = ds_.caption(caption_scene, caption_idx);
        double h = caption_score(e.features, with_sentinels(cap.tokens), teacher_, &e.fwd,
                                 &e.bwd)
                       .value();
        memo_.emplace(key, h);
        return h;
    }

  private:
    struct Entry {
        Tensor features;
        FeatureCache fwd, bwd;
    };

    const Entry& entry(size_t idx) {
        if (!caches_[idx]) {
            auto e = std::make_unique<Entry>();
            e->features = encode_image(renders_[idx], teacher_.image,
                                       teacher_.target_resolution);
            e->fwd = make_feature_cache(e->features, teacher_.fwd);
            e->bwd = make_feature_cache(e->features, teacher_.bwd);
            caches_[idx] = std::move(e);
        }
        return *caches_[idx];
    }

    const Dataset& ds_;
    const SlowParams& teacher_;
    const std::vector<int64_t>& scene_ids_;
    const std::vector<Tensor>& renders_;
    std::vector<std::unique_ptr<Entry>> caches_;
    std::map<std::tuple<int64_t, int64_t, int>, double> memo_;
};

}  // namespace

DualEncoderParams train_distilled(const Dataset& ds, const SlowParams& teacher,
                                  const TrainDistillConfig& cfg) {
    if (cfg.steps < 0) throw UsageError("negative step count");
    if (cfg.batch < 1) throw UsageError("batch size must be at least 1");
    if (!(cfg.tau > 0.0)) throw UsageError("temperature must be positive");
    if (cfg.alpha_over_tau2 < 0.0) throw UsageError("objective weight must be non-negative");
    if (teacher.fwd.token_table.shape[0] != static_cast<int64_t>(ds.vocab.size()))
        throw DataError("teacher vocabulary size " +
                        std::to_string(teacher.fwd.token_table.shape[0]) +
                        " does not match dataset vocabulary " +
                        std::to_string(ds.vocab.size()));
    if (teacher.image.cfg.raster != ds.cfg.raster ||
        teacher.image.cfg.channels != ds.cfg.channels)
        throw DataError("teacher expects " + std::to_string(teacher.image.cfg.raster) + "x" +
                        std::to_string(teacher.image.cfg.raster) + "x" +
                        std::to_string(teacher.image.cfg.channels) +
                        " renders, dataset provides " + std::to_string(ds.cfg.raster) + "x" +
                        std::to_string(ds.cfg.raster) + "x" + std::to_string(ds.cfg.channels));

    const double alpha = cfg.alpha();
    Rng rng(cfg.seed);
    Rng init_rng = rng.child(1);
    Rng batch_rng = rng.child(2);
    DualEncoderParams params = init_dual_encoder(cfg.enc, static_cast<int64_t>(ds.vocab.size()),
                                                 cfg.embed_dim, init_rng);

    std::vector<int64_t> train_ids = ds.split_scene_ids(Split::train);
    if (train_ids.empty()) throw DataError("training split is empty");
    if (static_cast<size_t>(cfg.batch) > train_ids.size())
        throw UsageError("batch size " + std::to_string(cfg.batch) +
                         " exceeds training split size " + std::to_string(train_ids.size()) +
                         " (batches draw distinct scenes)");
    std::vector<Tensor> renders;
    renders.reserve(train_ids.size());
    for (int64_t id : train_ids)
        renders.push_back(render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg));
    TeacherScorer scorer(ds, teacher, train_ids, renders);

    OptimConfig optim = cfg.optim;
    if (optim.total_steps == 0) optim.total_steps = cfg.steps;
    Adam adam;
    CsvLog log({"step", "loss", "distill", "nce", "lr", "seconds"});
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(cfg.steps));

    const int64_t B = cfg.batch;
    std::vector<size_t> order(train_ids.size());
    for (int step = 0; step < cfg.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), size_t{0});
        std::vector<int64_t> batch_scene_ids;
        std::vector<size_t> batch_render_idx;
        std::vector<int> batch_caption_idx;
        for (int b = 0; b < cfg.batch; ++b) {
            size_t j = static_cast<size_t>(b) +
                       static_cast<size_t>(batch_rng.uniform_int(order.size() -
                                                                 static_cast<size_t>(b)));
            std::swap(order[static_cast<size_t>(b)], order[j]);
            size_t pick = order[static_cast<size_t>(b)];
            batch_render_idx.push_back(pick);
            batch_scene_ids.push_back(train_ids[pick]);
            batch_caption_idx.push_back(static_cast<int>(batch_rng.uniform_int(
                static_cast<uint64_t>(ds.cfg.captions_per_scene))));
        }

        double loss_value = 0.0, distill_value = 0.0, nce_value = 0.0;
        try {
            // teacher candidate scores, one vector per anchor caption
            std::vector<Tensor> teacher_vecs;
            for (int i = 0; i < cfg.batch; ++i) {
                Tensor t = Tensor::zeros({B});
                for (int j = 0; j < cfg.batch; ++j)
                    t.data[static_cast<size_t>(j)] =
                        scorer.score(batch_render_idx[static_cast<size_t>(j)],
                                     batch_scene_ids[static_cast<size_t>(i)],
                                     batch_caption_idx[static_cast<size_t>(i)]);
                teacher_vecs.push_back(std::move(t));
            }

            Tape tape;
            DualEncoderParams watched = params;
            visit_dual_encoder(watched, [&](const std::string&, Tensor& t) { t = tape.watch(t); });

            std::vector<Tensor> f, g, frows, grows;
            for (int b = 0; b < cfg.batch; ++b) {
                const Caption& cap = ds.caption(batch_scene_ids[static_cast<size_t>(b)],
                                                batch_caption_idx[static_cast<size_t>(b)]);
                f.push_back(embed_image(renders[batch_render_idx[static_cast<size_t>(b)]],
                                        watched));
                g.push_back(embed_text(cap.tokens, watched));
                frows.push_back(reshape(f.back(), {1, static_cast<int64_t>(cfg.embed_dim)}));
                grows.push_back(reshape(g.back(), {1, static_cast<int64_t>(cfg.embed_dim)}));
            }
            // anchored[i][j] = f_j . g_i: anchor i's candidate scores
            Tensor anchored = transpose2d(matmul(concat(frows, 0), transpose2d(concat(grows, 0))));

            std::vector<DistillBatch> batches;
            for (int i = 0; i < cfg.batch; ++i)
                batches.push_back(DistillBatch{
                    i, teacher_vecs[static_cast<size_t>(i)],
                    reshape(slice(anchored, 0, i, 1), {B})});

            Tensor dist = distill_loss(batches, cfg.tau);
            Tensor nce = nce_loss(f, g);
            Tensor combined = alpha == 0.0 ? dist : add(dist, scale(nce, alpha));
            Tensor loss = scale(combined, 1.0 / cfg.batch);
            loss_value = loss.value();
            distill_value = dist.value() * (1.0 / cfg.batch);
            nce_value = nce.value() * (1.0 / cfg.batch);
            if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");

            Gradients grads = tape.backward(loss);
            std::vector<Tensor*> ps;
            visit_dual_encoder(params, [&](const std::string&, Tensor& t) { ps.push_back(&t); });
            std::vector<const Tensor*> gps;
            visit_dual_encoder(watched, [&](const std::string&, Tensor& t) {
                gps.push_back(&grads.of(t));
            });
            adam.step(ps, gps, optim, step);
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
                     format_double(distill_value), format_double(nce_value),
                     format_double(lr_at_step(optim, step)), format_double(secs)});
    }

    std::vector<int> bad = non_decreasing_windows(losses, 500);
    for (int w : bad)
        std::fprintf(stderr,
                     "warning: mean loss over steps [%d,%d) did not decrease\n",
                     w * 500, (w + 1) * 500);

    if (!cfg.csv_path.empty()) log.write(cfg.csv_path);
    if (!cfg.ckpt_path.empty()) save_checkpoint(dual_encoder_to_store(params), cfg.ckpt_path);
    return params;
}

namespace {

// R@1 and R@5 of gold-caption queries against the split's own scenes,
// scored by the dual encoder alone
std::pair<double, double> fast_recall(const Dataset& ds, Split split,
                                      const DualEncoderParams& params) {
    std::vector<int64_t> ids = ds.split_scene_ids(split);
    if (ids.empty()) throw DataError("evaluation split is empty");
    std::sort(ids.begin(), ids.end());
    std::vector<Tensor> feats;
    feats.reserve(ids.size());
    for (int64_t id : ids)
        feats.push_back(embed_image(render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg),
                                    params));
    int hit1 = 0, hit5 = 0;
    for (size_t q = 0; q < ids.size(); ++q) {
        Tensor g = embed_text(ds.caption(ids[q], 0).tokens, params);
        double gold = 0.0;
        for (size_t k = 0; k < g.data.size(); ++k) gold += feats[q].data[k] * g.data[k];
        int above = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i == q) continue;
            double s = 0.0;
            for (size_t k = 0; k < g.data.size(); ++k) s += feats[i].data[k] * g.data[k];
            // ties resolve toward the smaller scene id, matching ranking
            if (s > gold || (s == gold && ids[i] < ids[q])) ++above;
        }
        if (above < 1) ++hit1;
        if (above < 5) ++hit5;
    }
    double n = static_cast<double>(ids.size());
    return {hit1 / n, hit5 / n};
}

}  // namespace

void sweep_distill(const Dataset& ds, const SlowParams& teacher,
                   const TrainDistillConfig& base, const std::string& csv_path) {
    CsvLog log({"tau", "alpha_over_tau2", "R1_val", "R5_val"});
    for (double tau : {1.0, 10.0}) {
        for (double ratio : {0.0, 0.1, 1.0, 10.0}) {
            TrainDistillConfig cfg = base;
            cfg.tau = tau;
            cfg.alpha_over_tau2 = ratio;
            cfg.csv_path.clear();
            cfg.ckpt_path.clear();
            DualEncoderParams student = train_distilled(ds, teacher, cfg);
            auto [r1, r5] = fast_recall(ds, Split::val, student);
            log.add_row({format_double(tau), format_double(ratio), format_double(r1),
                         format_double(r5)});
        }
    }
    log.write(csv_path);
}

}  // namespace fastslow
