#include "fastslow/config.hpp"

#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "fastslow/errors.hpp"
#include "fastslow/fileio.hpp"

namespace fastslow {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_line(int line, const std::string& what) {
    throw UsageError("config line " + std::to_string(line) + ": " + what);
}

int64_t to_i64(const std::string& key, const std::string& v, int line) {
    if (v.empty()) bad_line(line, key + " has an empty value");
    char* end = nullptr;
    long long x = std::strtoll(v.c_str(), &end, 10);
    if (end != v.c_str() + v.size()) bad_line(line, key + " must be an integer, got '" + v + "'");
    return static_cast<int64_t>(x);
}

int to_int(const std::string& key, const std::string& v, int line) {
    return static_cast<int>(to_i64(key, v, line));
}

uint64_t to_u64(const std::string& key, const std::string& v, int line) {
    if (v.empty() || v[0] == '-')
        bad_line(line, key + " must be a non-negative integer, got '" + v + "'");
    char* end = nullptr;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end != v.c_str() + v.size())
        bad_line(line, key + " must be a non-negative integer, got '" + v + "'");
    return static_cast<uint64_t>(x);
}

double to_dbl(const std::string& key, const std::string& v, int line) {
    if (v.empty()) bad_line(line, key + " has an empty value");
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size()) bad_line(line, key + " must be a number, got '" + v + "'");
    return x;
}

bool to_bool(const std::string& key, const std::string& v, int line) {
    if (v == "true") return true;
    if (v == "false") return false;
    bad_line(line, key + " must be true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& key, const std::string& v, int line) {
    std::vector<std::string> items;
    size_t pos = 0;
    while (pos <= v.size()) {
        size_t comma = v.find(',', pos);
        if (comma == std::string::npos) comma = v.size();
        std::string item = trim(v.substr(pos, comma - pos));
        if (item.empty()) bad_line(line, key + " has an empty list item");
        items.push_back(item);
        pos = comma + 1;
    }
    return items;
}

std::vector<int> to_int_list(const std::string& key, const std::string& v, int line) {
    std::vector<int> out;
    for (const auto& item : split_list(key, v, line)) out.push_back(to_int(key, item, line));
    return out;
}

std::vector<int64_t> to_i64_list(const std::string& key, const std::string& v, int line) {
    std::vector<int64_t> out;
    for (const auto& item : split_list(key, v, line)) out.push_back(to_i64(key, item, line));
    return out;
}

std::vector<double> to_dbl_list(const std::string& key, const std::string& v, int line) {
    std::vector<double> out;
    for (const auto& item : split_list(key, v, line)) out.push_back(to_dbl(key, item, line));
    return out;
}

void apply_train(TrainSection& t, const std::string& key, const std::string& v, int line) {
    if (key == "steps")
        t.steps = to_int(key, v, line);
    else if (key == "batch")
        t.batch = to_int(key, v, line);
    else if (key == "lr")
        t.optim.lr = to_dbl(key, v, line);
    else if (key == "warmup_steps")
        t.optim.warmup_steps = to_int(key, v, line);
    else if (key == "total_steps")
        t.optim.total_steps = to_int(key, v, line);
    else if (key == "grad_clip")
        t.optim.grad_clip = to_dbl(key, v, line);
    else
        bad_line(line, "unknown key '" + key + "'");
}

void apply(RunConfig& cfg, const std::string& section, const std::string& key,
           const std::string& v, int line) {
    if (section == "run") {
        if (key == "seed")
            cfg.seed = to_u64(key, v, line);
        else if (key == "out_dir") {
            if (v.empty()) bad_line(line, "out_dir must not be empty");
            cfg.out_dir = v;
        } else
            bad_line(line, "unknown key '" + key + "' in [run]");
    } else if (section == "dataset") {
        DatasetConfig& d = cfg.dataset;
        if (key == "train_scenes")
            d.train_scenes = to_i64(key, v, line);
        else if (key == "val_scenes")
            d.val_scenes = to_i64(key, v, line);
        else if (key == "test_scenes")
            d.test_scenes = to_i64(key, v, line);
        else if (key == "grid")
            d.grid = to_int(key, v, line);
        else if (key == "raster")
            d.raster = to_int(key, v, line);
        else if (key == "channels")
            d.channels = to_int(key, v, line);
        else if (key == "captions_per_scene")
            d.captions_per_scene = to_int(key, v, line);
        else if (key == "min_objects")
            d.min_objects = to_int(key, v, line);
        else if (key == "max_objects")
            d.max_objects = to_int(key, v, line);
        else if (key == "max_caption_tokens")
            d.max_caption_tokens = to_int(key, v, line);
        else if (key == "unique_gold")
            d.unique_gold = to_bool(key, v, line);
        else
            bad_line(line, "unknown key '" + key + "' in [dataset]");
    } else if (section == "model") {
        if (key == "embed_dim")
            cfg.embed_dim = to_int(key, v, line);
        else if (key == "widths")
            cfg.widths = to_int_list(key, v, line);
        else if (key == "dm")
            cfg.dm = to_int(key, v, line);
        else if (key == "heads")
            cfg.heads = to_int(key, v, line);
        else if (key == "layers")
            cfg.layers = to_int(key, v, line);
        else if (key == "max_positions")
            cfg.max_positions = to_int(key, v, line);
        else if (key == "target_resolution")
            cfg.target_resolution = to_int(key, v, line);
        else if (key == "share_token_table")
            cfg.share_token_table = to_bool(key, v, line);
        else
            bad_line(line, "unknown key '" + key + "' in [model]");
    } else if (section == "train_fast") {
        apply_train(cfg.train_fast, key, v, line);
    } else if (section == "train_slow") {
        apply_train(cfg.train_slow, key, v, line);
    } else if (section == "distill") {
        if (key == "tau")
            cfg.tau = to_dbl(key, v, line);
        else if (key == "alpha_over_tau2")
            cfg.alpha_over_tau2 = to_dbl(key, v, line);
        else
            apply_train(cfg.distill, key, v, line);
    } else if (section == "index") {
        if (key == "kind") {
            if (v != "exact" && v != "pq")
                bad_line(line, "index kind must be exact or pq, got '" + v + "'");
            cfg.index_kind = v;
        } else if (key == "m")
            cfg.index_m = to_int(key, v, line);
        else if (key == "kc")
            cfg.index_kc = to_int(key, v, line);
        else if (key == "iters")
            cfg.index_iters = to_int(key, v, line);
        else
            bad_line(line, "unknown key '" + key + "' in [index]");
    } else if (section == "pipeline") {
        if (key == "k")
            cfg.k = to_i64(key, v, line);
        else if (key == "beta")
            cfg.beta = to_dbl(key, v, line);
        else if (key == "precompute")
            cfg.precompute = to_bool(key, v, line);
        else if (key == "curve_ks")
            cfg.curve_ks = to_i64_list(key, v, line);
        else if (key == "curve_betas")
            cfg.curve_betas = to_dbl_list(key, v, line);
        else
            bad_line(line, "unknown key '" + key + "' in [pipeline]");
    } else if (section == "bench") {
        if (key == "warmups")
            cfg.bench_warmups = to_int(key, v, line);
        else if (key == "ks")
            cfg.bench_ks = to_i64_list(key, v, line);
        else if (key == "queries")
            cfg.bench_queries = to_i64(key, v, line);
        else if (key == "slow_queries")
            cfg.bench_slow_queries = to_i64(key, v, line);
        else if (key == "synthetic_items")
            cfg.synthetic_items = to_i64_list(key, v, line);
        else if (key == "synthetic_vocab")
            cfg.synthetic_vocab = to_i64(key, v, line);
        else if (key == "synthetic_query_len")
            cfg.synthetic_query_len = to_int(key, v, line);
        else
            bad_line(line, "unknown key '" + key + "' in [bench]");
    } else {
        bad_line(line, "unknown section [" + section + "]");
    }
}

template <typename T>
std::string join_list(const std::vector<T>& items, std::string (*fmt)(T)) {
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        out += fmt(items[i]);
    }
    return out;
}

std::string fmt_int(int v) { return std::to_string(v); }
std::string fmt_i64(int64_t v) { return std::to_string(v); }
std::string fmt_dbl(double v) { return format_double(v); }

void emit_train(std::string& out, const char* name, const TrainSection& t) {
    out += std::string("[") + name + "]\n";
    out += "steps = " + std::to_string(t.steps) + "\n";
    out += "batch = " + std::to_string(t.batch) + "\n";
    out += "lr = " + format_double(t.optim.lr) + "\n";
    out += "warmup_steps = " + std::to_string(t.optim.warmup_steps) + "\n";
    out += "total_steps = " + std::to_string(t.optim.total_steps) + "\n";
    out += "grad_clip = " + format_double(t.optim.grad_clip) + "\n";
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::string section;
    std::set<std::string> seen;
    int line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = trim(text.substr(pos, eol - pos));
        ++line_no;
        bool last = eol == text.size();
        pos = eol + 1;
        if (line.empty() || line[0] == '#' || line[0] == ';') {
            if (last) break;
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') bad_line(line_no, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) bad_line(line_no, "empty section header");
            static const std::set<std::string> known = {
                "run",  "dataset", "model",    "train_fast", "train_slow",
                "distill", "index",   "pipeline", "bench"};
            if (!known.count(section)) bad_line(line_no, "unknown section [" + section + "]");
        } else {
            size_t eq = line.find('=');
            if (eq == std::string::npos) bad_line(line_no, "expected key = value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty()) bad_line(line_no, "missing key before '='");
            if (section.empty()) bad_line(line_no, "key '" + key + "' outside any section");
            if (!seen.insert(section + "." + key).second)
                bad_line(line_no, "duplicate key '" + key + "' in [" + section + "]");
            apply(cfg, section, key, value, line_no);
        }
        if (last) break;
    }
    return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config(read_text(path)); }

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    out += "[run]\n";
    out += "seed = " + std::to_string(cfg.seed) + "\n";
    out += "out_dir = " + cfg.out_dir + "\n";
    out += "\n[dataset]\n";
    const DatasetConfig& d = cfg.dataset;
    out += "train_scenes = " + std::to_string(d.train_scenes) + "\n";
    out += "val_scenes = " + std::to_string(d.val_scenes) + "\n";
    out += "test_scenes = " + std::to_string(d.test_scenes) + "\n";
    out += "grid = " + std::to_string(d.grid) + "\n";
    out += "raster = " + std::to_string(d.raster) + "\n";
    out += "channels = " + std::to_string(d.channels) + "\n";
    out += "captions_per_scene = " + std::to_string(d.captions_per_scene) + "\n";
    out += "min_objects = " + std::to_string(d.min_objects) + "\n";
    out += "max_objects = " + std::to_string(d.max_objects) + "\n";
    out += "max_caption_tokens = " + std::to_string(d.max_caption_tokens) + "\n";
    out += std::string("unique_gold = ") + (d.unique_gold ? "true" : "false") + "\n";
    out += "\n[model]\n";
    out += "embed_dim = " + std::to_string(cfg.embed_dim) + "\n";
    out += "widths = " + join_list(cfg.widths, fmt_int) + "\n";
    out += "dm = " + std::to_string(cfg.dm) + "\n";
    out += "heads = " + std::to_string(cfg.heads) + "\n";
    out += "layers = " + std::to_string(cfg.layers) + "\n";
    out += "max_positions = " + std::to_string(cfg.max_positions) + "\n";
    out += "target_resolution = " + std::to_string(cfg.target_resolution) + "\n";
    out += std::string("share_token_table = ") + (cfg.share_token_table ? "true" : "false") +
           "\n";
    out += "\n";
    emit_train(out, "train_fast", cfg.train_fast);
    out += "\n";
    emit_train(out, "train_slow", cfg.train_slow);
    out += "\n";
    emit_train(out, "distill", cfg.distill);
    out += "tau = " + format_double(cfg.tau) + "\n";
    out += "alpha_over_tau2 = " + format_double(cfg.alpha_over_tau2) + "\n";
    out += "\n[index]\n";
    out += "kind = " + cfg.index_kind + "\n";
    out += "m = " + std::to_string(cfg.index_m) + "\n";
    out += "kc = " + std::to_string(cfg.index_kc) + "\n";
    out += "iters = " + std::to_string(cfg.index_iters) + "\n";
    out += "\n[pipeline]\n";
    out += "k = " + std::to_string(cfg.k) + "\n";
    out += "beta = " + format_double(cfg.beta) + "\n";
    out += std::string("precompute = ") + (cfg.precompute ? "true" : "false") + "\n";
    out += "curve_ks = " + join_list(cfg.curve_ks, fmt_i64) + "\n";
    out += "curve_betas = " + join_list(cfg.curve_betas, fmt_dbl) + "\n";
    out += "\n[bench]\n";
    out += "warmups = " + std::to_string(cfg.bench_warmups) + "\n";
    out += "ks = " + join_list(cfg.bench_ks, fmt_i64) + "\n";
    out += "queries = " + std::to_string(cfg.bench_queries) + "\n";
    out += "slow_queries = " + std::to_string(cfg.bench_slow_queries) + "\n";
    if (!cfg.synthetic_items.empty())
        out += "synthetic_items = " + join_list(cfg.synthetic_items, fmt_i64) + "\n";
    out += "synthetic_vocab = " + std::to_string(cfg.synthetic_vocab) + "\n";
    out += "synthetic_query_len = " + std::to_string(cfg.synthetic_query_len) + "\n";
    return out;
}

RunPaths run_paths(const RunConfig& cfg) {
    RunPaths p;
    p.dir = cfg.out_dir;
    auto at = [&](const char* name) { return cfg.out_dir + "/" + name; };
    p.resolved = at("resolved.ini");
    p.dataset = at("dataset.jsonl");
    p.slow_ckpt = at("slow.ckpt");
    p.slow_csv = at("slow_train.csv");
    p.fast_ckpt = at("fast.ckpt");
    p.fast_csv = at("fast_train.csv");
    p.distilled_ckpt = at("distilled.ckpt");
    p.distill_csv = at("distill_train.csv");
    p.embeddings = at("corpus.fsemb");
    p.index = at("corpus.fsidx");
    p.curve_csv = at("rerank_curve.csv");
    p.sweep_csv = at("sweep.csv");
    p.bench_txt = at("bench.txt");
    p.attention_csv = at("attention.csv");
    return p;
}

ImageEncoderConfig encoder_config(const RunConfig& cfg) {
    ImageEncoderConfig enc;
    enc.raster = cfg.dataset.raster;
    enc.channels = cfg.dataset.channels;
    enc.widths = cfg.widths;
    return enc;
}

DecoderConfig decoder_config(const RunConfig& cfg) {
    DecoderConfig dec;
    dec.vocab_size = 0;  // the trainer fills this from the dataset
    dec.dm = cfg.dm;
    dec.heads = cfg.heads;
    dec.layers = cfg.layers;
    dec.max_positions = cfg.max_positions;
    dec.feature_dim = cfg.widths.empty() ? 0 : cfg.widths.back();
    return dec;
}

TrainFastConfig fast_train_config(const RunConfig& cfg) {
    RunPaths paths = run_paths(cfg);
    TrainFastConfig t;
    t.enc = encoder_config(cfg);
    t.embed_dim = cfg.embed_dim;
    t.steps = cfg.train_fast.steps;
    t.batch = cfg.train_fast.batch;
    t.optim = cfg.train_fast.optim;
    t.seed = cfg.seed;
    t.csv_path = paths.fast_csv;
    t.ckpt_path = paths.fast_ckpt;
    return t;
}

TrainSlowConfig slow_train_config(const RunConfig& cfg) {
    RunPaths paths = run_paths(cfg);
    TrainSlowConfig t;
    t.enc = encoder_config(cfg);
    t.dec = decoder_config(cfg);
    t.target_resolution = cfg.target_resolution;
    t.steps = cfg.train_slow.steps;
    t.batch = cfg.train_slow.batch;
    t.optim = cfg.train_slow.optim;
    t.seed = cfg.seed;
    t.share_token_table = cfg.share_token_table;
    t.csv_path = paths.slow_csv;
    t.ckpt_path = paths.slow_ckpt;
    return t;
}

TrainDistillConfig distill_train_config(const RunConfig& cfg) {
    RunPaths paths = run_paths(cfg);
    TrainDistillConfig t;
    t.enc = encoder_config(cfg);
    t.embed_dim = cfg.embed_dim;
    t.tau = cfg.tau;
    t.alpha_over_tau2 = cfg.alpha_over_tau2;
    t.steps = cfg.distill.steps;
    t.batch = cfg.distill.batch;
    t.optim = cfg.distill.optim;
    t.seed = cfg.seed;
    t.csv_path = paths.distill_csv;
    t.ckpt_path = paths.distilled_ckpt;
    return t;
}

}  // namespace fastslow
