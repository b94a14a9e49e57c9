#include "fastslow/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fastslow/fileio.hpp"

namespace fastslow {

using nlohmann::json;

namespace {

struct PaletteEntry {
    const char* name;
    double r, g, b;
};

// Fixed named palette; configs pick a subset by name.
const std::array<PaletteEntry, 8>& palette() {
    static const std::array<PaletteEntry, 8> p = {{
        {"red", 1.0, 0.0, 0.0},
        {"green", 0.0, 1.0, 0.0},
        {"blue", 0.0, 0.0, 1.0},
        {"yellow", 1.0, 1.0, 0.0},
        {"purple", 0.5, 0.0, 1.0},
        {"orange", 1.0, 0.5, 0.0},
        {"cyan", 0.0, 1.0, 1.0},
        {"magenta", 1.0, 0.0, 1.0},
    }};
    return p;
}

const PaletteEntry* palette_entry(const std::string& name) {
    for (const auto& e : palette())
        if (name == e.name) return &e;
    return nullptr;
}

std::string scene_key(const Scene& s) {
    std::ostringstream os;
    for (const auto& o : s.objects)
        os << o.row << ',' << o.col << ',' << o.shape << ',' << o.color << ',' << o.size << ';';
    return os.str();
}

bool attrs_equal(const ObjectSpec& a, const ObjectSpec& b) {
    return a.shape == b.shape && a.color == b.color && a.size == b.size;
}

bool relation_holds(int rel, const ObjectSpec& p, const ObjectSpec& q) {
    switch (rel) {
        case 0: return p.col < q.col;  // left
        case 1: return p.col > q.col;  // right
        case 2: return p.row < q.row;  // above
        case 3: return p.row > q.row;  // below
        default: return false;
    }
}

void validate_config(const DatasetConfig& cfg) {
    auto bad = [](const std::string& msg) { throw DataError("dataset config: " + msg); };
    if (cfg.train_scenes < 1) bad("train_scenes must be at least 1");
    if (cfg.val_scenes < 0 || cfg.test_scenes < 0) bad("split sizes must be non-negative");
    if (cfg.grid < 1) bad("grid must be at least 1");
    if (cfg.raster < cfg.grid || cfg.raster % cfg.grid != 0)
        bad("raster " + std::to_string(cfg.raster) + " must be a positive multiple of grid " +
            std::to_string(cfg.grid));
    if (cfg.channels != 1 && cfg.channels != 3) bad("channels must be 1 or 3");
    if (cfg.captions_per_scene < 1) bad("captions_per_scene must be at least 1");
    int cells = cfg.grid * cfg.grid;
    if (cfg.min_objects < 1 || cfg.min_objects > cfg.max_objects || cfg.max_objects > cells)
        bad("object count range [" + std::to_string(cfg.min_objects) + "," +
            std::to_string(cfg.max_objects) + "] invalid for " + std::to_string(cells) +
            " cells");
    if (cfg.colors.empty()) bad("colors list is empty");
    std::set<std::string> seen_colors;
    for (const auto& c : cfg.colors) {
        if (!palette_entry(c)) bad("unknown color '" + c + "'");
        if (!seen_colors.insert(c).second) bad("duplicate color '" + c + "'");
    }
    if (cfg.sizes.empty()) bad("sizes list is empty");
    std::set<std::string> seen_sizes;
    for (const auto& s : cfg.sizes) {
        if (s != "small" && s != "large") bad("unknown size '" + s + "' (small/large)");
        if (!seen_sizes.insert(s).second) bad("duplicate size '" + s + "'");
    }
    if (cfg.max_caption_tokens < 10)
        bad("max_caption_tokens must be at least 10 to fit relational captions");
    int64_t vocab_size = 4 + 2 + 4 + static_cast<int64_t>(cfg.sizes.size()) +
                         static_cast<int64_t>(cfg.colors.size()) + 4;
    if (vocab_size > 64)
        bad("vocabulary would have " + std::to_string(vocab_size) + " entries, budget is 64");

    // Distinct-scene capacity: sum over k of C(cells, k) * variants^k.
    long double variants = 4.0L * static_cast<long double>(cfg.colors.size()) *
                           static_cast<long double>(cfg.sizes.size());
    long double capacity = 0.0L;
    for (int k = cfg.min_objects; k <= cfg.max_objects; ++k) {
        long double binom = 1.0L;
        for (int i = 0; i < k; ++i)
            binom = binom * static_cast<long double>(cells - i) / static_cast<long double>(i + 1);
        capacity += binom * std::pow(variants, static_cast<long double>(k));
        if (capacity > 1e30L) break;  // far beyond any realistic request
    }
    if (static_cast<long double>(cfg.total_scenes()) > capacity)
        throw DataError("dataset config: requested " + std::to_string(cfg.total_scenes()) +
                        " distinct scenes but only about " +
                        std::to_string(static_cast<double>(capacity)) + " exist");
}

json config_to_json(const DatasetConfig& cfg) {
    json j;
    j["train_scenes"] = cfg.train_scenes;
    j["val_scenes"] = cfg.val_scenes;
    j["test_scenes"] = cfg.test_scenes;
    j["grid"] = cfg.grid;
    j["raster"] = cfg.raster;
    j["channels"] = cfg.channels;
    j["captions_per_scene"] = cfg.captions_per_scene;
    j["min_objects"] = cfg.min_objects;
    j["max_objects"] = cfg.max_objects;
    j["colors"] = cfg.colors;
    j["sizes"] = cfg.sizes;
    j["max_caption_tokens"] = cfg.max_caption_tokens;
    j["unique_gold"] = cfg.unique_gold;
    return j;
}

DatasetConfig config_from_json(const json& j) {
    static const std::set<std::string> known = {
        "train_scenes", "val_scenes", "test_scenes", "grid", "raster", "channels",
        "captions_per_scene", "min_objects", "max_objects", "colors", "sizes",
        "max_caption_tokens", "unique_gold"};
    for (const auto& item : j.items())
        if (!known.count(item.key()))
            throw DataError("dataset config: unknown field '" + item.key() + "'");
    for (const auto& key : known)
        if (!j.contains(key)) throw DataError("dataset config: missing field '" + key + "'");
    DatasetConfig cfg;
    cfg.train_scenes = j.at("train_scenes").get<int64_t>();
    cfg.val_scenes = j.at("val_scenes").get<int64_t>();
    cfg.test_scenes = j.at("test_scenes").get<int64_t>();
    cfg.grid = j.at("grid").get<int>();
    cfg.raster = j.at("raster").get<int>();
    cfg.channels = j.at("channels").get<int>();
    cfg.captions_per_scene = j.at("captions_per_scene").get<int>();
    cfg.min_objects = j.at("min_objects").get<int>();
    cfg.max_objects = j.at("max_objects").get<int>();
    cfg.colors = j.at("colors").get<std::vector<std::string>>();
    cfg.sizes = j.at("sizes").get<std::vector<std::string>>();
    cfg.max_caption_tokens = j.at("max_caption_tokens").get<int>();
    cfg.unique_gold = j.at("unique_gold").get<bool>();
    return cfg;
}

Scene sample_scene(const DatasetConfig& cfg, Rng& rng, int64_t id) {
    int cells = cfg.grid * cfg.grid;
    int k = cfg.min_objects +
            static_cast<int>(rng.uniform_int(
                static_cast<uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
    std::vector<int> cell_ids(static_cast<size_t>(cells));
    for (int i = 0; i < cells; ++i) cell_ids[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
        int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cells - i)));
        std::swap(cell_ids[static_cast<size_t>(i)], cell_ids[static_cast<size_t>(j)]);
    }
    Scene s;
    s.id = id;
    for (int i = 0; i < k; ++i) {
        ObjectSpec o;
        o.row = cell_ids[static_cast<size_t>(i)] / cfg.grid;
        o.col = cell_ids[static_cast<size_t>(i)] % cfg.grid;
        o.shape = static_cast<int>(rng.uniform_int(4));
        o.color = static_cast<int>(rng.uniform_int(cfg.colors.size()));
        o.size = static_cast<int>(rng.uniform_int(cfg.sizes.size()));
        s.objects.push_back(o);
    }
    std::sort(s.objects.begin(), s.objects.end(), [](const ObjectSpec& a, const ObjectSpec& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    return s;
}

}  // namespace

const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> names = {"circle", "square", "triangle", "bar"};
    return names;
}

const std::vector<std::string>& relation_names() {
    static const std::vector<std::string> names = {"left", "right", "above", "below"};
    return names;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

// ---- Vocabulary ------------------------------------------------------------

int64_t Vocabulary::id_of(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? unk_id : it->second;
}

const std::string& Vocabulary::word(int64_t id) const {
    if (id < 0 || id >= size())
        throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    return words[static_cast<size_t>(id)];
}

std::vector<int64_t> Vocabulary::encode(const std::string& text) const {
    std::vector<int64_t> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(id_of(w));
    return out;
}

std::string Vocabulary::decode(const std::vector<int64_t>& ids) const {
    std::string out;
    for (int64_t id : ids) {
        if (id == pad_id || id == bos_id || id == eos_id) continue;
        if (!out.empty()) out += ' ';
        out += word(id);
    }
    return out;
}

Vocabulary build_vocabulary(const DatasetConfig& cfg) {
    Vocabulary v;
    v.words = {"<pad>", "<bos>", "<eos>", "<unk>", "a", "of"};
    for (const auto& w : relation_names()) v.words.push_back(w);
    for (const auto& w : cfg.sizes) v.words.push_back(w);
    for (const auto& w : cfg.colors) v.words.push_back(w);
    for (const auto& w : shape_names()) v.words.push_back(w);
    for (size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int64_t>(i);
    if (v.size() > 64)
        throw DataError("vocabulary has " + std::to_string(v.size()) + " entries, budget is 64");
    return v;
}

// ---- captions ----------------------------------------------------------------

std::string CaptionSpec::text(const DatasetConfig& cfg) const {
    auto object_phrase = [&](const ObjectSpec& o) {
        return "a " + cfg.sizes[static_cast<size_t>(o.size)] + ' ' +
               cfg.colors[static_cast<size_t>(o.color)] + ' ' +
               shape_names()[static_cast<size_t>(o.shape)];
    };
    if (!has_rel) return object_phrase(a);
    return object_phrase(a) + ' ' + relation_names()[static_cast<size_t>(rel)] + " of " +
           object_phrase(b);
}

bool CaptionSpec::matches(const Scene& scene) const {
    if (!has_rel) {
        for (const auto& o : scene.objects)
            if (attrs_equal(o, a)) return true;
        return false;
    }
    for (size_t i = 0; i < scene.objects.size(); ++i)
        for (size_t j = 0; j < scene.objects.size(); ++j) {
            if (i == j) continue;
            if (attrs_equal(scene.objects[i], a) && attrs_equal(scene.objects[j], b) &&
                relation_holds(rel, scene.objects[i], scene.objects[j]))
                return true;
        }
    return false;
}

std::vector<CaptionSpec> enumerate_true_captions(const Scene& scene) {
    std::vector<CaptionSpec> out;
    std::set<std::string> seen;
    auto push = [&](const CaptionSpec& spec) {
        // Dedup by attribute signature; text would work too but needs a config.
        std::ostringstream key;
        key << spec.a.shape << ',' << spec.a.color << ',' << spec.a.size << '|';
        if (spec.has_rel)
            key << spec.rel << '|' << spec.b.shape << ',' << spec.b.color << ',' << spec.b.size;
        if (seen.insert(key.str()).second) out.push_back(spec);
    };
    for (const auto& o : scene.objects) {
        CaptionSpec s;
        s.a = o;
        push(s);
    }
    for (size_t i = 0; i < scene.objects.size(); ++i)
        for (size_t j = 0; j < scene.objects.size(); ++j) {
            if (i == j) continue;
            for (int rel = 0; rel < 4; ++rel) {
                if (!relation_holds(rel, scene.objects[i], scene.objects[j])) continue;
                CaptionSpec s;
                s.a = scene.objects[i];
                s.has_rel = true;
                s.rel = rel;
                s.b = scene.objects[j];
                push(s);
            }
        }
    return out;
}

int64_t count_matching_scenes(const CaptionSpec& spec, const std::vector<Scene>& scenes) {
    int64_t n = 0;
    for (const auto& s : scenes)
        if (spec.matches(s)) ++n;
    return n;
}

// ---- generation ----------------------------------------------------------------

Dataset generate_dataset(const DatasetConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    Dataset ds;
    ds.cfg = cfg;
    ds.seed = seed;
    ds.vocab = build_vocabulary(cfg);
    Rng rng(seed);

    int64_t total = cfg.total_scenes();
    std::set<std::string> seen;
    int64_t attempts_left = 10000 + 200 * total;
    auto sample_distinct = [&](int64_t id) {
        while (attempts_left-- > 0) {
            Scene s = sample_scene(cfg, rng, id);
            if (seen.insert(scene_key(s)).second) return s;
        }
        throw DataError("could not sample enough distinct scenes; enlarge the grid or "
                        "attribute lists");
    };
    for (int64_t i = 0; i < total; ++i) ds.scenes.push_back(sample_distinct(i));

    // Gold captions. With unique_gold each gold must match exactly one scene
    // across the whole dataset; scenes whose every true caption is ambiguous
    // get resampled, then everything is re-verified, to a fixed point.
    std::vector<CaptionSpec> gold(static_cast<size_t>(total));
    std::vector<char> has_gold(static_cast<size_t>(total), 0);
    for (int round = 0;; ++round) {
        if (round >= 64)
            throw DataError("could not find unique gold captions after 64 rounds; enlarge the "
                            "grid or attribute lists");
        std::vector<int64_t> failed;
        for (int64_t i = 0; i < total; ++i) {
            size_t si = static_cast<size_t>(i);
            if (has_gold[si] && !cfg.unique_gold) continue;
            if (has_gold[si] && count_matching_scenes(gold[si], ds.scenes) == 1) continue;
            has_gold[si] = 0;
            std::vector<CaptionSpec> candidates = enumerate_true_captions(ds.scenes[si]);
            for (size_t c = candidates.size(); c > 1; --c) {
                size_t pick = static_cast<size_t>(rng.uniform_int(c));
                std::swap(candidates[c - 1], candidates[pick]);
            }
            if (!cfg.unique_gold) {
                gold[si] = candidates.front();
                has_gold[si] = 1;
                continue;
            }
            for (const auto& cand : candidates) {
                if (count_matching_scenes(cand, ds.scenes) == 1) {
                    gold[si] = cand;
                    has_gold[si] = 1;
                    break;
                }
            }
            if (!has_gold[si]) failed.push_back(i);
        }
        if (failed.empty()) break;
        for (int64_t i : failed) {
            seen.erase(scene_key(ds.scenes[static_cast<size_t>(i)]));
            ds.scenes[static_cast<size_t>(i)] = sample_distinct(i);
        }
    }

    // Splits are contiguous id ranges; scene sampling is already random.
    ds.splits.resize(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) {
        Split s = i < cfg.train_scenes            ? Split::train
                  : i < cfg.train_scenes + cfg.val_scenes ? Split::val
                                                          : Split::test;
        ds.splits[static_cast<size_t>(i)] = s;
    }

    // Caption 0 is gold; the rest are random true captions of the scene.
    for (int64_t i = 0; i < total; ++i) {
        size_t si = static_cast<size_t>(i);
        std::vector<CaptionSpec> candidates = enumerate_true_captions(ds.scenes[si]);
        for (int idx = 0; idx < cfg.captions_per_scene; ++idx) {
            CaptionSpec spec = idx == 0 ? gold[si]
                                        : candidates[static_cast<size_t>(
                                              rng.uniform_int(candidates.size()))];
            Caption cap;
            cap.scene_id = i;
            cap.index = idx;
            cap.text = spec.text(cfg);
            cap.tokens = ds.vocab.encode(cap.text);
            if (static_cast<int>(cap.tokens.size()) > cfg.max_caption_tokens)
                throw DataError("caption exceeds max_caption_tokens: '" + cap.text + "'");
            for (int64_t t : cap.tokens)
                if (t == Vocabulary::unk_id)
                    throw DataError("generated caption tokenized to <unk>: '" + cap.text + "'");
            ds.captions.push_back(std::move(cap));
        }
    }
    return ds;
}

// ---- rendering -------------------------------------------------------------------

Tensor render_scene(const Scene& scene, const DatasetConfig& cfg) {
    validate_config(cfg);
    int gp = cfg.raster;
    int pc = cfg.raster / cfg.grid;
    int ch = cfg.channels;
    Tensor img = Tensor::zeros({gp, gp, ch});
    for (const auto& o : scene.objects) {
        const PaletteEntry* color = palette_entry(cfg.colors[static_cast<size_t>(o.color)]);
        bool large = cfg.sizes[static_cast<size_t>(o.size)] == "large";
        int margin = large ? (pc >= 8 ? 1 : 0) : std::max(1, pc / 4);
        int y0 = o.row * pc + margin, y1 = (o.row + 1) * pc - margin;
        int x0 = o.col * pc + margin, x1 = (o.col + 1) * pc - margin;
        if (y1 <= y0 || x1 <= x0) {
            y0 = o.row * pc;
            y1 = y0 + 1;
            x0 = o.col * pc;
            x1 = x0 + 1;
        }
        double cy = 0.5 * (y0 + y1), cx = 0.5 * (x0 + x1);
        double rad = 0.5 * (x1 - x0);
        auto put = [&](int y, int x) {
            double* px = img.data.data() + (static_cast<int64_t>(y) * gp + x) * ch;
            if (ch == 3) {
                px[0] = color->r;
                px[1] = color->g;
                px[2] = color->b;
            } else {
                px[0] = 0.299 * color->r + 0.587 * color->g + 0.114 * color->b;
            }
        };
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                double fy = y + 0.5, fx = x + 0.5;
                bool fill = false;
                switch (o.shape) {
                    case 0:  // circle
                        fill = (fy - cy) * (fy - cy) + (fx - cx) * (fx - cx) <= rad * rad;
                        break;
                    case 1:  // square
                        fill = true;
                        break;
                    case 2: {  // triangle, apex at top centre
                        double t = (fy - y0) / std::max(1e-9, double(y1 - y0));
                        fill = std::fabs(fx - cx) <= t * 0.5 * (x1 - x0);
                        break;
                    }
                    case 3: {  // horizontal bar through the middle third
                        double third = std::max(1.0, (y1 - y0) / 3.0);
                        fill = fy >= cy - 0.5 * third && fy <= cy + 0.5 * third;
                        break;
                    }
                    default: break;
                }
                if (fill) put(y, x);
            }
    }
    return img;
}

// ---- accessors ----------------------------------------------------------------------

std::vector<int64_t> Dataset::split_scene_ids(Split s) const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < scenes.size(); ++i)
        if (splits[i] == s) out.push_back(static_cast<int64_t>(i));
    return out;
}

const Caption& Dataset::caption(int64_t scene_id, int index) const {
    if (scene_id < 0 || scene_id >= static_cast<int64_t>(scenes.size()))
        throw UsageError("caption(): scene id " + std::to_string(scene_id) + " out of range");
    if (index < 0 || index >= cfg.captions_per_scene)
        throw UsageError("caption(): caption index " + std::to_string(index) + " out of range");
    const Caption& c =
        captions[static_cast<size_t>(scene_id * cfg.captions_per_scene + index)];
    if (c.scene_id != scene_id || c.index != index)
        throw DataError("caption(): caption table out of order");
    return c;
}

// ---- serialization --------------------------------------------------------------------

uint64_t config_fingerprint(const DatasetConfig& cfg) {
    std::string canonical = config_to_json(cfg).dump();
    return fnv1a64(canonical.data(), canonical.size());
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ostringstream out;
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(config_fingerprint(ds.cfg)));
    out << "#fastslow-dataset v1 seed=" << ds.seed << " config=" << hex << "\n";
    out << config_to_json(ds.cfg).dump() << "\n";
    for (size_t i = 0; i < ds.scenes.size(); ++i) {
        const Scene& s = ds.scenes[i];
        json objects = json::array();
        for (const auto& o : s.objects) {
            json jo;
            jo["shape"] = shape_names()[static_cast<size_t>(o.shape)];
            jo["color"] = ds.cfg.colors[static_cast<size_t>(o.color)];
            jo["size"] = ds.cfg.sizes[static_cast<size_t>(o.size)];
            jo["row"] = o.row;
            jo["col"] = o.col;
            objects.push_back(jo);
        }
        json js;
        js["type"] = "scene";
        js["id"] = s.id;
        js["split"] = split_name(ds.splits[i]);
        js["objects"] = objects;
        out << js.dump() << "\n";
    }
    for (const auto& c : ds.captions) {
        json jc;
        jc["type"] = "caption";
        jc["scene"] = c.scene_id;
        jc["idx"] = c.index;
        jc["text"] = c.text;
        out << jc.dump() << "\n";
    }
    atomic_write_text(path, out.str());
}

Dataset load_dataset(const std::string& path) {
    std::istringstream in(read_text(path));
    std::string line;
    int64_t line_no = 0;
    auto fail = [&](const std::string& msg) {
        throw DataError("dataset '" + path + "' line " + std::to_string(line_no) + ": " + msg);
    };

    ++line_no;
    if (!std::getline(in, line)) fail("empty file");
    uint64_t seed = 0;
    {
        std::istringstream hs(line);
        std::string magic, version, seed_kv, config_kv;
        hs >> magic >> version >> seed_kv >> config_kv;
        if (magic != "#fastslow-dataset") fail("not a dataset file (bad magic '" + magic + "')");
        if (version != "v1") fail("unsupported format version '" + version + "', expected v1");
        if (seed_kv.rfind("seed=", 0) != 0 || config_kv.rfind("config=", 0) != 0)
            fail("malformed header");
        try {
            seed = std::stoull(seed_kv.substr(5));
        } catch (const std::exception&) {
            fail("malformed seed in header: '" + seed_kv + "'");
        }
    }
    std::string config_hex = line.substr(line.find("config=") + 7);

    ++line_no;
    if (!std::getline(in, line)) fail("missing config line");
    DatasetConfig cfg;
    try {
        cfg = config_from_json(json::parse(line));
    } catch (const json::exception& e) {
        fail(std::string("config parse error: ") + e.what());
    }
    validate_config(cfg);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(config_fingerprint(cfg)));
    if (config_hex != hex)
        fail("config fingerprint mismatch: header says " + config_hex + ", config hashes to " +
             hex);

    Dataset ds;
    ds.cfg = cfg;
    ds.seed = seed;
    ds.vocab = build_vocabulary(cfg);
    int64_t total = cfg.total_scenes();
    ds.scenes.resize(static_cast<size_t>(total));
    ds.splits.resize(static_cast<size_t>(total));
    std::vector<char> scene_seen(static_cast<size_t>(total), 0);
    std::vector<char> caption_seen(
        static_cast<size_t>(total * cfg.captions_per_scene), 0);
    ds.captions.resize(static_cast<size_t>(total * cfg.captions_per_scene));

    auto color_index = [&](const std::string& name) {
        for (size_t i = 0; i < cfg.colors.size(); ++i)
            if (cfg.colors[i] == name) return static_cast<int>(i);
        fail("unknown color '" + name + "'");
        return -1;
    };
    auto size_index = [&](const std::string& name) {
        for (size_t i = 0; i < cfg.sizes.size(); ++i)
            if (cfg.sizes[i] == name) return static_cast<int>(i);
        fail("unknown size '" + name + "'");
        return -1;
    };
    auto shape_index = [&](const std::string& name) {
        for (size_t i = 0; i < shape_names().size(); ++i)
            if (shape_names()[i] == name) return static_cast<int>(i);
        fail("unknown shape '" + name + "'");
        return -1;
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail(std::string("parse error: ") + e.what());
        }
        try {
            std::string type = j.at("type").get<std::string>();
            if (type == "scene") {
                int64_t id = j.at("id").get<int64_t>();
                if (id < 0 || id >= total) fail("scene id " + std::to_string(id) + " out of range");
                if (scene_seen[static_cast<size_t>(id)])
                    fail("duplicate scene id " + std::to_string(id));
                scene_seen[static_cast<size_t>(id)] = 1;
                Scene s;
                s.id = id;
                for (const auto& jo : j.at("objects")) {
                    ObjectSpec o;
                    o.shape = shape_index(jo.at("shape").get<std::string>());
                    o.color = color_index(jo.at("color").get<std::string>());
                    o.size = size_index(jo.at("size").get<std::string>());
                    o.row = jo.at("row").get<int>();
                    o.col = jo.at("col").get<int>();
                    if (o.row < 0 || o.row >= cfg.grid || o.col < 0 || o.col >= cfg.grid)
                        fail("object cell out of grid");
                    for (const auto& prev : s.objects)
                        if (prev.row == o.row && prev.col == o.col)
                            fail("two objects share cell (" + std::to_string(o.row) + "," +
                                 std::to_string(o.col) + ")");
                    s.objects.push_back(o);
                }
                std::string sp = j.at("split").get<std::string>();
                Split split = sp == "train" ? Split::train
                              : sp == "val" ? Split::val
                              : sp == "test" ? Split::test
                                             : throw DataError("dataset '" + path + "' line " +
                                                               std::to_string(line_no) +
                                                               ": unknown split '" + sp + "'");
                ds.scenes[static_cast<size_t>(id)] = s;
                ds.splits[static_cast<size_t>(id)] = split;
            } else if (type == "caption") {
                int64_t scene_id = j.at("scene").get<int64_t>();
                int idx = j.at("idx").get<int>();
                if (scene_id < 0 || scene_id >= total) fail("caption scene id out of range");
                if (idx < 0 || idx >= cfg.captions_per_scene) fail("caption index out of range");
                size_t pos = static_cast<size_t>(scene_id * cfg.captions_per_scene + idx);
                if (caption_seen[pos]) fail("duplicate caption");
                caption_seen[pos] = 1;
                Caption c;
                c.scene_id = scene_id;
                c.index = idx;
                c.text = j.at("text").get<std::string>();
                c.tokens = ds.vocab.encode(c.text);
                if (static_cast<int>(c.tokens.size()) > cfg.max_caption_tokens)
                    fail("caption exceeds max_caption_tokens");
                ds.captions[pos] = std::move(c);
            } else {
                fail("unknown record type '" + type + "'");
            }
        } catch (const json::exception& e) {
            fail(std::string("bad record: ") + e.what());
        }
    }

    for (int64_t i = 0; i < total; ++i)
        if (!scene_seen[static_cast<size_t>(i)]) {
            ++line_no;
            fail("missing scene " + std::to_string(i) + " (file truncated?)");
        }
    for (size_t i = 0; i < caption_seen.size(); ++i)
        if (!caption_seen[i]) {
            ++line_no;
            fail("missing caption records (file truncated?)");
        }
    int64_t train_n = 0, val_n = 0, test_n = 0;
    for (Split s : ds.splits)
        (s == Split::train ? train_n : s == Split::val ? val_n : test_n)++;
    if (train_n != cfg.train_scenes || val_n != cfg.val_scenes || test_n != cfg.test_scenes)
        fail("split sizes do not match the config");
    return ds;
}

bool dataset_equal(const Dataset& a, const Dataset& b) {
    if (!(a.cfg == b.cfg) || a.seed != b.seed) return false;
    if (a.scenes != b.scenes || a.splits != b.splits) return false;
    if (a.captions.size() != b.captions.size()) return false;
    for (size_t i = 0; i < a.captions.size(); ++i) {
        const Caption& x = a.captions[i];
        const Caption& y = b.captions[i];
        if (x.scene_id != y.scene_id || x.index != y.index || x.text != y.text ||
            x.tokens != y.tokens)
            return false;
    }
    return true;
}

}  // namespace fastslow
