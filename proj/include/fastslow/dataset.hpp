#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "fastslow/errors.hpp"
#include "fastslow/rng.hpp"
#include "fastslow/tensor.hpp"

namespace fastslow {

// Token ids 0..3 are reserved; everything else is grammar vocabulary.
struct Vocabulary {
    static constexpr int64_t pad_id = 0;
    static constexpr int64_t bos_id = 1;
    static constexpr int64_t eos_id = 2;
    static constexpr int64_t unk_id = 3;

    std::vector<std::string> words;
    std::unordered_map<std::string, int64_t> index;

    int64_t size() const { return static_cast<int64_t>(words.size()); }
    int64_t id_of(const std::string& w) const;
    const std::string& word(int64_t id) const;
    // Whitespace tokenization to content ids (no BOS/EOS); unknown words
    // map to unk_id.
    std::vector<int64_t> encode(const std::string& text) const;
    // Inverse of encode for content ids; reserved ids are skipped.
    std::string decode(const std::vector<int64_t>& ids) const;
};

struct ObjectSpec {
    int shape = 0;  // index into shape_names()
    int color = 0;  // index into cfg.colors
    int size = 0;   // index into cfg.sizes
    int row = 0;
    int col = 0;
    bool operator==(const ObjectSpec&) const = default;
};

struct Scene {
    int64_t id = 0;
    std::vector<ObjectSpec> objects;  // sorted by (row, col); cells distinct
    bool operator==(const Scene&) const = default;
};

enum class Split { train = 0, val = 1, test = 2 };
const char* split_name(Split s);

struct Caption {
    int64_t scene_id = 0;
    int index = 0;  // 0 is the gold caption
    std::string text;
    std::vector<int64_t> tokens;  // content ids, no BOS/EOS
};

struct DatasetConfig {
    int64_t train_scenes = 500;
    int64_t val_scenes = 100;
    int64_t test_scenes = 200;
    int grid = 4;      // logical cells per side
    int raster = 32;   // pixels per side
    int channels = 3;  // 3 = rgb, 1 = luminance
    int captions_per_scene = 2;
    int min_objects = 2;
    int max_objects = 3;
    std::vector<std::string> colors = {"red", "green", "blue", "yellow", "purple", "orange"};
    std::vector<std::string> sizes = {"small", "large"};
    int max_caption_tokens = 12;
    bool unique_gold = true;

    int64_t total_scenes() const { return train_scenes + val_scenes + test_scenes; }
    bool operator==(const DatasetConfig&) const = default;
};

struct Dataset {
    DatasetConfig cfg;
    uint64_t seed = 0;
    Vocabulary vocab;
    std::vector<Scene> scenes;   // scene id == position
    std::vector<Split> splits;   // parallel to scenes
    std::vector<Caption> captions;  // scene-major, caption index minor

    std::vector<int64_t> split_scene_ids(Split s) const;
    const Caption& caption(int64_t scene_id, int index) const;
};

// Structured caption: one described object, optionally related to a second.
// Relations compare cell coordinates: left/right by column, above/below by
// row, ignoring the other coordinate.
struct CaptionSpec {
    ObjectSpec a;
    bool has_rel = false;
    int rel = 0;  // index into relation_names()
    ObjectSpec b;

    std::string text(const DatasetConfig& cfg) const;
    bool matches(const Scene& scene) const;
};

const std::vector<std::string>& shape_names();     // circle square triangle bar
const std::vector<std::string>& relation_names();  // left right above below

// All grammatically valid captions that are true of the scene, deduplicated
// by text, in a deterministic order.
std::vector<CaptionSpec> enumerate_true_captions(const Scene& scene);

int64_t count_matching_scenes(const CaptionSpec& spec, const std::vector<Scene>& scenes);

Vocabulary build_vocabulary(const DatasetConfig& cfg);

// Validates the config (palette membership, raster divisibility, vocabulary
// budget, scene-space capacity) and generates scenes, splits, and captions.
// Caption 0 of every scene is gold; with unique_gold it matches exactly one
// scene in the whole dataset.
Dataset generate_dataset(const DatasetConfig& cfg, uint64_t seed);

// Deterministic rasterization to a raster x raster x channels tensor with
// values in [0, 1].
Tensor render_scene(const Scene& scene, const DatasetConfig& cfg);

uint64_t config_fingerprint(const DatasetConfig& cfg);

// JSON-lines serialization with a header carrying a format version, the
// generation seed, and the config fingerprint. Loading re-validates all of
// them and re-derives tokens; errors cite the offending line.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

bool dataset_equal(const Dataset& a, const Dataset& b);

}  // namespace fastslow
