#include "fastslow/fast_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "fastslow/checkpoint.hpp"
#include "fastslow/fileio.hpp"

namespace fastslow {

namespace {

constexpr char kEmbMagic[] = "FSEMB1";
constexpr size_t kEmbMagicLen = 6;

template <class T>
void append_pod(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <class T>
T read_pod(const std::string& buf, size_t& off, const std::string& path) {
    if (off + sizeof(T) > buf.size())
        throw DataError("embeddings '" + path + "': truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

Tensor nce_loss(const std::vector<Tensor>& image_embeds,
                const std::vector<Tensor>& text_embeds) {
    if (image_embeds.empty())
        throw UsageError("contrastive batch must hold at least one pair");
    if (image_embeds.size() != text_embeds.size())
        throw UsageError("contrastive batch has " + std::to_string(image_embeds.size()) +
                         " image embeddings but " + std::to_string(text_embeds.size()) +
                         " text embeddings");
    const int64_t B = static_cast<int64_t>(image_embeds.size());
    if (image_embeds[0].shape.size() != 1)
        throw UsageError("embeddings must be vectors");
    const int64_t e = image_embeds[0].shape[0];
    for (int64_t i = 0; i < B; ++i) {
        const Tensor& f = image_embeds[static_cast<size_t>(i)];
        const Tensor& g = text_embeds[static_cast<size_t>(i)];
        if (f.shape.size() != 1 || g.shape.size() != 1 || f.shape[0] != e || g.shape[0] != e)
            throw UsageError("pair " + std::to_string(i) +
                             " embedding dimension differs from " + std::to_string(e));
    }

    std::vector<Tensor> frows, grows;
    frows.reserve(static_cast<size_t>(B));
    grows.reserve(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        frows.push_back(reshape(image_embeds[static_cast<size_t>(i)], {1, e}));
        grows.push_back(reshape(text_embeds[static_cast<size_t>(i)], {1, e}));
    }
    Tensor scores = matmul(concat(frows, 0), transpose2d(concat(grows, 0)));  // [i][j] = f_i.g_j

    // Per pair the positive competes with its own score plus both in-batch
    // cross pairings; log-softmax keeps the reduction max-subtracted.
    Tensor total = Tensor::scalar(0.0);
    for (int64_t i = 0; i < B; ++i) {
        std::vector<Tensor> cand;
        cand.reserve(static_cast<size_t>(2 * B - 1));
        cand.push_back(select_index(scores, i * B + i));
        for (int64_t j = 0; j < B; ++j)
            if (j != i) cand.push_back(select_index(scores, j * B + i));
        for (int64_t j = 0; j < B; ++j)
            if (j != i) cand.push_back(select_index(scores, i * B + j));
        Tensor lp = log_softmax(concat(cand, 0), 0);
        total = sub(total, select_index(lp, 0));
    }
    return total;
}

DualEncoderParams train_fast(const Dataset& ds, const TrainFastConfig& cfg) {
    if (cfg.steps < 0) throw UsageError("negative step count");
    if (cfg.batch < 1) throw UsageError("batch size must be at least 1");

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

    OptimConfig optim = cfg.optim;
    if (optim.total_steps == 0) optim.total_steps = cfg.steps;
    Adam adam;
    CsvLog log({"step", "loss", "lr", "seconds"});
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(cfg.steps));

    std::vector<size_t> order(train_ids.size());
    for (int step = 0; step < cfg.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        // Partial shuffle picks cfg.batch distinct scenes; duplicates would
        // plant positives among the in-batch negatives.
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

        double loss_value = 0.0;
        try {
            Tape tape;
            DualEncoderParams watched = params;
            visit_dual_encoder(watched, [&](const std::string&, Tensor& t) { t = tape.watch(t); });

            std::vector<Tensor> f, g;
            for (int b = 0; b < cfg.batch; ++b) {
                const Caption& cap = ds.caption(batch_scene_ids[static_cast<size_t>(b)],
                                                batch_caption_idx[static_cast<size_t>(b)]);
                f.push_back(embed_image(renders[batch_render_idx[static_cast<size_t>(b)]],
                                        watched));
                g.push_back(embed_text(cap.tokens, watched));
            }
            Tensor loss = scale(nce_loss(f, g), 1.0 / cfg.batch);
            loss_value = loss.value();
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

CorpusEmbeddings embed_corpus(const Dataset& ds, Split split,
                              const DualEncoderParams& params) {
    std::vector<int64_t> ids = ds.split_scene_ids(split);
    std::sort(ids.begin(), ids.end());
    CorpusEmbeddings emb;
    emb.dim = params.pool_b.shape[0];
    emb.scene_ids = ids;
    emb.rows.reserve(ids.size() * static_cast<size_t>(emb.dim));
    for (int64_t id : ids) {
        Tensor render = render_scene(ds.scenes[static_cast<size_t>(id)], ds.cfg);
        Tensor row = embed_image(render, params);
        for (double v : row.data) emb.rows.push_back(static_cast<float>(v));
    }
    return emb;
}

void save_embeddings(const CorpusEmbeddings& emb, const std::string& path) {
    if (emb.dim <= 0) throw UsageError("embedding dimension must be positive");
    if (emb.rows.size() != emb.scene_ids.size() * static_cast<size_t>(emb.dim))
        throw UsageError("embedding row storage does not match count x dim");
    std::string buf;
    buf.append(kEmbMagic, kEmbMagicLen);
    append_pod<uint64_t>(buf, static_cast<uint64_t>(emb.scene_ids.size()));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(emb.dim));
    for (int64_t id : emb.scene_ids) append_pod<int64_t>(buf, id);
    size_t payload_at = buf.size();
    for (float v : emb.rows) append_pod<float>(buf, v);
    append_pod<uint64_t>(buf, fnv1a64(buf.data() + payload_at, buf.size() - payload_at));
    atomic_write_text(path, buf);
}

CorpusEmbeddings load_embeddings(const std::string& path) {
    std::string buf = read_text(path);
    if (buf.size() < kEmbMagicLen + 2 * sizeof(uint64_t) ||
        std::memcmp(buf.data(), kEmbMagic, kEmbMagicLen) != 0)
        throw DataError("embeddings '" + path + "': missing FSEMB1 magic");
    size_t off = kEmbMagicLen;
    uint64_t count = read_pod<uint64_t>(buf, off, path);
    uint64_t dim = read_pod<uint64_t>(buf, off, path);
    if (dim == 0 || dim > (1ULL << 20))
        throw DataError("embeddings '" + path + "': implausible dimension");
    if (count > (1ULL << 32))
        throw DataError("embeddings '" + path + "': implausible count");
    CorpusEmbeddings emb;
    emb.dim = static_cast<int64_t>(dim);
    emb.scene_ids.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        int64_t id = read_pod<int64_t>(buf, off, path);
        if (!emb.scene_ids.empty() && id <= emb.scene_ids.back())
            throw DataError("embeddings '" + path + "': scene ids not strictly ascending");
        emb.scene_ids.push_back(id);
    }
    size_t payload = static_cast<size_t>(count) * dim * sizeof(float);
    if (off + payload + sizeof(uint64_t) != buf.size())
        throw DataError("embeddings '" + path + "': size does not match header");
    uint64_t checksum = fnv1a64(buf.data() + off, payload);
    emb.rows.resize(static_cast<size_t>(count) * dim);
    std::memcpy(emb.rows.data(), buf.data() + off, payload);
    off += payload;
    uint64_t stored = read_pod<uint64_t>(buf, off, path);
    if (stored != checksum)
        throw DataError("embeddings '" + path + "': checksum mismatch (file corrupt)");
    for (float v : emb.rows)
        if (!std::isfinite(v))
            throw DataError("embeddings '" + path + "': non-finite values");
    return emb;
}

}  // namespace fastslow
