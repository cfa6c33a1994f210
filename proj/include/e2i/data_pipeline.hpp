#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "e2i/conditioning.hpp"

namespace e2i {

// prev = frame t-1 (first boundary), mid = frame t (target), next = frame t+1.
struct Triplet {
    Image prev;
    Image mid;
    Image next;
    std::string id;
};

enum class ShapeKind { rectangle, disc };

struct Shape {
    ShapeKind kind = ShapeKind::rectangle;
    std::array<double, 2> center{};    // (x, y) at frame time 0
    std::array<double, 2> velocity{};  // px per frame
    std::array<double, 2> half_extent{};  // disc uses half_extent[0] as radius
    std::array<float, 3> color{};
};

// Center at frame time tau; motion is linear in tau.
std::array<double, 2> shape_center(const Shape& s, double tau);

// Background: a few low-frequency sinusoids per channel, optionally
// translating (camera pan) at a constant velocity.
struct Background {
    struct Wave {
        double amplitude, fx, fy, phase;
    };
    std::array<double, 3> base{};
    std::array<std::vector<Wave>, 3> waves;
    std::array<double, 2> pan_velocity{};
};

struct Scene {
    int size = 64;
    Background background;
    std::vector<Shape> shapes;  // painted in order
};

struct GenConfig {
    int image_size = 64;
    int n_triplets = 16;
    int min_shapes = 1;
    int max_shapes = 4;
    double min_speed = 1.0;
    double max_speed = 4.0;
    bool pan_mode = false;
    std::uint64_t seed = 0;
    std::string source = "synthetic";

    void validate() const;
    nlohmann::json to_json() const;
};

constexpr int kSupersample = 4;

Scene random_scene(const GenConfig& cfg, Rng& rng);
// Anti-aliased render (4x4 supersampling) at frame time tau.
Image render_scene(const Scene& scene, double tau);
Triplet render_triplet(const Scene& scene, std::string id);

// In-memory generation (frames quantized to 8 bits, as written to disk).
std::vector<Triplet> synthesize_triplets(const GenConfig& cfg);

struct ManifestEntry {
    std::string id;
    std::string prev;
    std::string mid;
    std::string next;
    std::string source;
};

struct DatasetManifest {
    int format_version = 1;
    // Relative roots are resolved against the manifest file's directory.
    std::filesystem::path root = ".";
    std::vector<ManifestEntry> entries;
    nlohmann::json gen_config = nlohmann::json::object();
    std::map<std::string, std::size_t> source_counts;

    std::filesystem::path resolve(const std::string& p) const;
    std::size_t size() const { return entries.size(); }
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& file);
// Rejects duplicate ids, unknown format versions and missing frame files.
DatasetManifest load_manifest(const std::filesystem::path& file_or_dir);

Triplet load_triplet(const DatasetManifest& m, const ManifestEntry& e);
std::vector<Triplet> load_triplets(const DatasetManifest& m, int threads = 0);

// Writes triplets/<id>/{prev,mid,next}.ppm and manifest.json under out_dir.
DatasetManifest generate_synthetic(const GenConfig& cfg, const std::filesystem::path& out_dir);

// Seeded permutation prefix of length n; equal seeds give nested subsets.
DatasetManifest few_shot_sample(const DatasetManifest& m, std::size_t n, std::uint64_t seed);

// Proportional quotas per source, round-robin interleave, then a seeded
// shuffle when more than one source contributes.
DatasetManifest mix_manifests(std::span<const DatasetManifest> sources, std::size_t n, std::uint64_t seed);

// Splits off n_holdout entries (seeded) for evaluation; returns {pool, holdout}.
std::pair<DatasetManifest, DatasetManifest> split_holdout(const DatasetManifest& m, std::size_t n_holdout,
                                                          std::uint64_t seed);

}  // namespace e2i
