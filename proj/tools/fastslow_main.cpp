// Command line front end: one subcommand per stage of the retrieval
// pipeline, all driven by the same ini run description.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fastslow/checkpoint.hpp"
#include "fastslow/config.hpp"
#include "fastslow/dataset.hpp"
#include "fastslow/distill.hpp"
#include "fastslow/encoders.hpp"
#include "fastslow/errors.hpp"
#include "fastslow/fast_model.hpp"
#include "fastslow/fileio.hpp"
#include "fastslow/index.hpp"
#include "fastslow/pipeline.hpp"
#include "fastslow/rng.hpp"
#include "fastslow/slow_model.hpp"
#include "fastslow/trainer.hpp"

using namespace fastslow;

namespace {

struct CommonOpts {
    std::string config;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
};

RunConfig resolve(const CommonOpts& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (o.seed_set) cfg.seed = o.seed;
    if (!o.out.empty()) cfg.out_dir = o.out;
    return cfg;
}

// Every command materializes the output directory, records the resolved
// run description, and announces the seed it runs under.
RunPaths prepare(const RunConfig& cfg) {
    RunPaths paths = run_paths(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    atomic_write_text(paths.resolved, serialize_config(cfg));
    std::printf("seed %llu\n", static_cast<unsigned long long>(cfg.seed));
    return paths;
}

DualEncoderParams load_fast_params(const RunConfig& cfg, const Dataset& ds,
                                   const std::string& ckpt) {
    Rng rng(cfg.seed);
    DualEncoderParams p =
        init_dual_encoder(encoder_config(cfg), ds.vocab.size(), cfg.embed_dim, rng);
    dual_encoder_from_store(p, load_checkpoint(ckpt));
    return p;
}

SlowParams load_slow_params(const RunConfig& cfg, const Dataset& ds, const std::string& ckpt) {
    DecoderConfig dec = decoder_config(cfg);
    dec.vocab_size = ds.vocab.size();
    Rng rng(cfg.seed);
    SlowParams p = init_slow(encoder_config(cfg), dec, cfg.target_resolution, rng);
    slow_from_store(p, load_checkpoint(ckpt));
    return p;
}

std::string pick_ckpt(const RunPaths& paths, const std::string& model) {
    if (model == "fast") return paths.fast_ckpt;
    if (model == "distilled") return paths.distilled_ckpt;
    throw UsageError("--model must be distilled or fast, got '" + model + "'");
}

RetrievalPipeline dataset_pipeline(const RunConfig& cfg, const RunPaths& paths,
                                   const Dataset& ds, const std::string& model) {
    DualEncoderParams fast = load_fast_params(cfg, ds, pick_ckpt(paths, model));
    SlowParams slow = load_slow_params(cfg, ds, paths.slow_ckpt);
    PipelineConfig pc{cfg.k, cfg.beta, cfg.precompute};
    FeatureProvider features = dataset_features(ds, slow);
    if (peek_index_kind(paths.index) == IndexKind::exact)
        return build_pipeline(fast, slow, load_exact_index(paths.index), features, pc);
    return build_pipeline(fast, slow, load_pq_index(paths.index), features, pc);
}

void cmd_gen_data(const CommonOpts& o) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = generate_dataset(cfg.dataset, cfg.seed);
    save_dataset(ds, paths.dataset);
    std::printf("dataset %s: %lld train / %lld val / %lld test scenes, vocab %lld, %zu captions\n",
                paths.dataset.c_str(), static_cast<long long>(cfg.dataset.train_scenes),
                static_cast<long long>(cfg.dataset.val_scenes),
                static_cast<long long>(cfg.dataset.test_scenes),
                static_cast<long long>(ds.vocab.size()), ds.captions.size());
}

void cmd_train_slow(const CommonOpts& o) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    TrainSlowConfig t = slow_train_config(cfg);
    t.dec.vocab_size = ds.vocab.size();
    train_slow(ds, t);
    std::printf("slow scorer: %d steps, checkpoint %s, log %s\n", t.steps, t.ckpt_path.c_str(),
                t.csv_path.c_str());
}

void cmd_train_fast(const CommonOpts& o) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    TrainFastConfig t = fast_train_config(cfg);
    train_fast(ds, t);
    std::printf("fast scorer: %d steps, checkpoint %s, log %s\n", t.steps, t.ckpt_path.c_str(),
                t.csv_path.c_str());
}

void cmd_distill(const CommonOpts& o) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    SlowParams teacher = load_slow_params(cfg, ds, paths.slow_ckpt);
    TrainDistillConfig t = distill_train_config(cfg);
    train_distilled(ds, teacher, t);
    std::printf("distilled scorer: %d steps at tau %s, checkpoint %s, log %s\n", t.steps,
                format_double(t.tau).c_str(), t.ckpt_path.c_str(), t.csv_path.c_str());
}

void cmd_build_index(const CommonOpts& o, const std::string& model) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    DualEncoderParams fast = load_fast_params(cfg, ds, pick_ckpt(paths, model));
    CorpusEmbeddings emb = embed_corpus(ds, Split::test, fast);
    save_embeddings(emb, paths.embeddings);
    if (cfg.index_kind == "exact") {
        save_exact_index(build_exact(emb), paths.index);
    } else {
        PQCodebooks books = train_pq(emb, cfg.index_m, cfg.index_kc, cfg.index_iters, cfg.seed);
        save_pq_index(build_pq(emb, books), paths.index);
    }
    std::printf("index %s: %lld items, dim %lld, kind %s, model %s\n", paths.index.c_str(),
                static_cast<long long>(emb.count()), static_cast<long long>(emb.dim),
                cfg.index_kind.c_str(), model.c_str());
}

void cmd_query(const CommonOpts& o, const std::string& model, const std::string& text) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    RetrievalPipeline pipe = dataset_pipeline(cfg, paths, ds, model);
    QueryResult res = run_query(pipe, ds.vocab.encode(text));
    std::printf("query \"%s\"  k %lld  beta %s\n", text.c_str(), static_cast<long long>(cfg.k),
                format_double(cfg.beta).c_str());
    int64_t shown = std::min<int64_t>(10, static_cast<int64_t>(res.items.size()));
    std::printf("%4s %6s %9s %10s %10s  %s\n", "rank", "scene", "stage", "score", "fast",
                "gold caption");
    for (int64_t i = 0; i < shown; ++i) {
        const Candidate& c = res.items[static_cast<size_t>(i)];
        bool reranked = c.stage == Stage::reranked;
        std::printf("%4lld %6lld %9s %10.4f %10.4f  %s\n", static_cast<long long>(i + 1),
                    static_cast<long long>(c.scene_id), reranked ? "reranked" : "fast",
                    reranked ? c.combined : c.fast_score, c.fast_score,
                    ds.caption(c.scene_id, 0).text.c_str());
    }
    std::printf("slow calls %lld, index %.2f ms, rerank %.2f ms, total %.2f ms\n",
                static_cast<long long>(res.stats.slow_invocations), res.stats.index_ms,
                res.stats.rerank_ms, res.stats.total_ms);
}

void cmd_eval(const CommonOpts& o, const std::string& model, const std::string& arm) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    RetrievalPipeline pipe = dataset_pipeline(cfg, paths, ds, model);
    std::vector<QuerySpec> queries = gold_queries(ds, Split::test);
    int64_t k = 0;
    double beta = 0.0;
    if (arm == "fastslow") {
        k = cfg.k;
        beta = cfg.beta;
    } else if (arm == "slow") {
        k = pipe.corpus_size();
    } else if (arm != "fast") {
        throw UsageError("--arm must be fast, fastslow, or slow, got '" + arm + "'");
    }
    double r1 = recall_rate(pipe, queries, 1, k, beta);
    double r5 = recall_rate(pipe, queries, 5, k, beta);
    std::printf("arm %s  model %s  k %lld  beta %s  queries %zu  R@1 %.4f  R@5 %.4f\n",
                arm.c_str(), model.c_str(), static_cast<long long>(k),
                format_double(beta).c_str(), queries.size(), r1, r5);
}

void cmd_rerank_curve(const CommonOpts& o, const std::string& model) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    RetrievalPipeline pipe = dataset_pipeline(cfg, paths, ds, model);
    std::vector<QuerySpec> queries = gold_queries(ds, Split::test);
    CurveResult curve = rerank_curve(pipe, queries, cfg.curve_ks, cfg.curve_betas);
    curve.csv().write(paths.curve_csv);
    std::fputs(curve.csv().dump().c_str(), stdout);
    double target = curve.rows.back().r1;
    const CurveRow* hit = nullptr;
    for (size_t i = 1; i + 1 < curve.rows.size(); ++i) {
        if (curve.rows[i].r1 >= target) {
            hit = &curve.rows[i];
            break;
        }
    }
    if (hit)
        std::printf("smallest budget matching the exhaustive R@1 %.4f: K %lld (beta %s)\n",
                    target, static_cast<long long>(hit->k), format_double(hit->beta).c_str());
    else
        std::printf("no grid point reaches the exhaustive R@1 %.4f\n", target);
    std::printf("wrote %s\n", paths.curve_csv.c_str());
}

void cmd_sweep_distill(const CommonOpts& o) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    SlowParams teacher = load_slow_params(cfg, ds, paths.slow_ckpt);
    sweep_distill(ds, teacher, distill_train_config(cfg), paths.sweep_csv);
    std::fputs(read_text(paths.sweep_csv).c_str(), stdout);
    std::printf("wrote %s\n", paths.sweep_csv.c_str());
}

void cmd_bench(const CommonOpts& o) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    BenchOptions opts{cfg.bench_warmups, cfg.bench_ks, true, true, cfg.bench_slow_queries};
    std::string report;
    if (!cfg.synthetic_items.empty()) {
        // Synthetic corpora at arbitrary scale: random embeddings and feature
        // maps, streamed per query so memory stays flat.
        ImageEncoderConfig enc = encoder_config(cfg);
        DecoderConfig dec = decoder_config(cfg);
        dec.vocab_size = cfg.synthetic_vocab;
        std::vector<double> sizes, slow_medians;
        for (int64_t n : cfg.synthetic_items) {
            Rng rng(cfg.seed);
            DualEncoderParams fast =
                init_dual_encoder(enc, cfg.synthetic_vocab, cfg.embed_dim, rng);
            SlowParams slow = init_slow(enc, dec, cfg.target_resolution, rng);
            CorpusEmbeddings emb = synthetic_embeddings(n, cfg.embed_dim, cfg.seed);
            PipelineConfig pc{cfg.k, cfg.beta, false};
            RetrievalPipeline pipe =
                build_pipeline(fast, slow, build_exact(emb),
                               synthetic_features(cfg.target_resolution, dec.feature_dim,
                                                  cfg.seed),
                               pc);
            std::vector<QuerySpec> queries = synthetic_queries(
                cfg.bench_queries, cfg.synthetic_vocab, cfg.synthetic_query_len, cfg.seed + 1);
            BenchReport rep = run_benchmark(pipe, queries, opts);
            report += rep.table();
            report += "\n";
            sizes.push_back(static_cast<double>(n));
            if (!rep.arms.empty() && rep.arms.back().label == "slow")
                slow_medians.push_back(rep.arms.back().median_ms);
        }
        if (sizes.size() >= 2 && slow_medians.size() == sizes.size()) {
            LineFit fit = fit_line(sizes, slow_medians);
            char line[160];
            std::snprintf(line, sizeof(line),
                          "slow arm median_ms vs corpus size: slope %s, intercept %s, r2 %s\n",
                          format_double(fit.slope).c_str(), format_double(fit.intercept).c_str(),
                          format_double(fit.r2).c_str());
            report += line;
        }
    } else {
        Dataset ds = load_dataset(paths.dataset);
        RetrievalPipeline pipe = dataset_pipeline(cfg, paths, ds, "distilled");
        std::vector<QuerySpec> queries = gold_queries(ds, Split::test);
        if (static_cast<int64_t>(queries.size()) > cfg.bench_queries)
            queries.resize(static_cast<size_t>(cfg.bench_queries));
        report = run_benchmark(pipe, queries, opts).table();
    }
    std::fputs(report.c_str(), stdout);
    atomic_write_text(paths.bench_txt, report);
    std::printf("wrote %s\n", paths.bench_txt.c_str());
}

void cmd_dump_attention(const CommonOpts& o, int64_t scene, int caption_index) {
    RunConfig cfg = resolve(o);
    RunPaths paths = prepare(cfg);
    Dataset ds = load_dataset(paths.dataset);
    SlowParams slow = load_slow_params(cfg, ds, paths.slow_ckpt);
    if (scene < 0) scene = ds.split_scene_ids(Split::test).front();
    const Caption& cap = ds.caption(scene, caption_index);
    std::vector<int64_t> y = with_sentinels(cap.tokens);
    Tensor features = dataset_features(ds, slow)(scene);
    AttentionRecord rec = attention_maps(features, y, slow.fwd);
    CsvLog log({"layer", "head", "text_pos", "visual_pos", "score", "weight"});
    for (size_t l = 0; l < rec.weights.size(); ++l) {
        for (size_t h = 0; h < rec.weights[l].size(); ++h) {
            const Tensor& s = rec.scores[l][h];
            const Tensor& w = rec.weights[l][h];
            for (int64_t i = 0; i < w.dim(0); ++i)
                for (int64_t j = 0; j < w.dim(1); ++j)
                    log.add_row({std::to_string(l), std::to_string(h), std::to_string(i),
                                 std::to_string(j),
                                 format_double(s.data[static_cast<size_t>(i * s.dim(1) + j)]),
                                 format_double(w.data[static_cast<size_t>(i * w.dim(1) + j)])});
        }
    }
    log.write(paths.attention_csv);
    std::printf("scene %lld caption %d: \"%s\"\n", static_cast<long long>(scene), caption_index,
                cap.text.c_str());
    for (size_t l = 0; l < rec.best_head.size(); ++l) {
        std::printf("layer %zu best head per text position:", l);
        for (int h : rec.best_head[l]) std::printf(" %d", h);
        std::printf("\n");
    }
    std::printf("wrote %s\n", paths.attention_csv.c_str());
}

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config, "run description file (defaults apply when omitted)");
    sub->add_option("--seed", o.seed, "override the run seed");
    sub->add_option("--out", o.out, "override the output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fast and slow two-stage text-to-item retrieval"};
    app.require_subcommand(1);

    CommonOpts gen_o, tslow_o, tfast_o, dist_o, index_o, query_o, eval_o, curve_o, sweep_o,
        bench_o, attn_o;
    std::string index_model = "distilled", query_model = "distilled", eval_model = "distilled",
                curve_model = "distilled";
    std::string query_text, eval_arm = "fastslow";
    int64_t attn_scene = -1;
    int attn_caption = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic scene dataset");
    add_common(gen, gen_o);

    CLI::App* tslow = app.add_subcommand("train-slow", "train the cross-attention scorer");
    add_common(tslow, tslow_o);

    CLI::App* tfast = app.add_subcommand("train-fast", "train the dual-encoder scorer");
    add_common(tfast, tfast_o);

    CLI::App* dist = app.add_subcommand("distill", "distill the slow scorer into a dual encoder");
    add_common(dist, dist_o);

    CLI::App* index = app.add_subcommand("build-index", "embed the test corpus and build the index");
    add_common(index, index_o);
    index->add_option("--model", index_model, "encoder checkpoint: distilled or fast")
        ->check(CLI::IsMember({"distilled", "fast"}));

    CLI::App* query = app.add_subcommand("query", "rank the corpus for one caption");
    add_common(query, query_o);
    query->add_option("--text", query_text, "caption text")->required();
    query->add_option("--model", query_model, "encoder checkpoint: distilled or fast")
        ->check(CLI::IsMember({"distilled", "fast"}));

    CLI::App* eval = app.add_subcommand("eval", "recall of one retrieval arm on the test split");
    add_common(eval, eval_o);
    eval->add_option("--arm", eval_arm, "fast, fastslow, or slow")
        ->check(CLI::IsMember({"fast", "fastslow", "slow"}));
    eval->add_option("--model", eval_model, "encoder checkpoint: distilled or fast")
        ->check(CLI::IsMember({"distilled", "fast"}));

    CLI::App* curve = app.add_subcommand("rerank-curve", "recall and cost across budgets");
    add_common(curve, curve_o);
    curve->add_option("--model", curve_model, "encoder checkpoint: distilled or fast")
        ->check(CLI::IsMember({"distilled", "fast"}));

    CLI::App* sweep = app.add_subcommand("sweep-distill", "distillation temperature/weight grid");
    add_common(sweep, sweep_o);

    CLI::App* bench = app.add_subcommand("bench", "time the arms on dataset or synthetic corpora");
    add_common(bench, bench_o);

    CLI::App* attn = app.add_subcommand("dump-attention", "cross-attention maps for one caption");
    add_common(attn, attn_o);
    attn->add_option("--scene", attn_scene, "scene id (default: first test scene)");
    attn->add_option("--caption", attn_caption, "caption index within the scene");

    // Each callback records whether --seed was given so an explicit 0 still
    // overrides the file value.
    gen->callback([&] { gen_o.seed_set = gen->count("--seed") > 0; cmd_gen_data(gen_o); });
    tslow->callback(
        [&] { tslow_o.seed_set = tslow->count("--seed") > 0; cmd_train_slow(tslow_o); });
    tfast->callback(
        [&] { tfast_o.seed_set = tfast->count("--seed") > 0; cmd_train_fast(tfast_o); });
    dist->callback([&] { dist_o.seed_set = dist->count("--seed") > 0; cmd_distill(dist_o); });
    index->callback([&] {
        index_o.seed_set = index->count("--seed") > 0;
        cmd_build_index(index_o, index_model);
    });
    query->callback([&] {
        query_o.seed_set = query->count("--seed") > 0;
        cmd_query(query_o, query_model, query_text);
    });
    eval->callback([&] {
        eval_o.seed_set = eval->count("--seed") > 0;
        cmd_eval(eval_o, eval_model, eval_arm);
    });
    curve->callback([&] {
        curve_o.seed_set = curve->count("--seed") > 0;
        cmd_rerank_curve(curve_o, curve_model);
    });
    sweep->callback(
        [&] { sweep_o.seed_set = sweep->count("--seed") > 0; cmd_sweep_distill(sweep_o); });
    bench->callback([&] { bench_o.seed_set = bench->count("--seed") > 0; cmd_bench(bench_o); });
    attn->callback([&] {
        attn_o.seed_set = attn->count("--seed") > 0;
        cmd_dump_attention(attn_o, attn_scene, attn_caption);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
