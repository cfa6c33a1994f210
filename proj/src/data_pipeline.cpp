#include "e2i/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "e2i/image_io.hpp"

namespace e2i {

using nlohmann::json;

std::array<double, 2> shape_center(const Shape& s, double tau) {
    return {s.center[0] + s.velocity[0] * tau, s.center[1] + s.velocity[1] * tau};
}

void GenConfig::validate() const {
    if (image_size < 4) {
        throw ConfigError("image_size must be >= 4");
    }
    if (n_triplets < 1) {
        throw ConfigError("n must be ≥ 1");
    }
    if (min_shapes < 1 || max_shapes > 4 || min_shapes > max_shapes) {
        throw ConfigError("shape count range must lie within [1, 4]");
    }
    if (min_speed < 0.0 || max_speed < min_speed) {
        throw ConfigError("speed range must satisfy 0 <= min_speed <= max_speed");
    }
    if (4.0 * max_speed >= image_size) {
        throw ConfigError("max_speed is too large for the image size");
    }
}

json GenConfig::to_json() const {
    return {{"image_size", image_size}, {"n_triplets", n_triplets}, {"min_shapes", min_shapes},
            {"max_shapes", max_shapes}, {"min_speed", min_speed},   {"max_speed", max_speed},
            {"pan_mode", pan_mode},     {"seed", seed},             {"source", source}};
}

namespace {

// Positions and velocities live on a 1/64 px grid so that c - v, c + v and
// their mean are exact in double precision.
double snap(double v) { return std::round(v * 64.0) / 64.0; }

double background_value(const Background& bg, int ch, double x, double y, double tau) {
    const double bx = x - bg.pan_velocity[0] * tau;
    const double by = y - bg.pan_velocity[1] * tau;
    double v = bg.base[static_cast<std::size_t>(ch)];
    for (const auto& w : bg.waves[static_cast<std::size_t>(ch)]) {
        v += w.amplitude * std::sin(w.fx * bx + w.fy * by + w.phase);
    }
    return std::clamp(v, 0.0, 1.0);
}

bool inside(const Shape& s, const std::array<double, 2>& c, double x, double y) {
    const double dx = x - c[0];
    const double dy = y - c[1];
    if (s.kind == ShapeKind::disc) {
        return dx * dx + dy * dy <= s.half_extent[0] * s.half_extent[0];
    }
    return std::abs(dx) <= s.half_extent[0] && std::abs(dy) <= s.half_extent[1];
}

}  // namespace

Scene random_scene(const GenConfig& cfg, Rng& rng) {
    Scene scene;
    scene.size = cfg.image_size;
    const double size = cfg.image_size;
    auto& bg = scene.background;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        bg.base[ch] = rng.uniform(0.3, 0.7);
        for (int k = 0; k < 3; ++k) {
            const double cycles_x = rng.uniform(-2.0, 2.0);
            const double cycles_y = rng.uniform(-2.0, 2.0);
            bg.waves[ch].push_back({rng.uniform(0.03, 0.08), 2.0 * std::numbers::pi * cycles_x / size,
                                    2.0 * std::numbers::pi * cycles_y / size, rng.uniform(0.0, 2.0 * std::numbers::pi)});
        }
    }
    const auto random_velocity = [&] {
        const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        return std::array<double, 2>{snap(speed * std::cos(angle)), snap(speed * std::sin(angle))};
    };
    if (cfg.pan_mode) {
        bg.pan_velocity = random_velocity();
    }
    const int n_shapes = cfg.min_shapes + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.max_shapes - cfg.min_shapes + 1)));
    for (int i = 0; i < n_shapes; ++i) {
        Shape s;
        s.kind = rng.uniform() < 0.5 ? ShapeKind::rectangle : ShapeKind::disc;
        s.velocity = random_velocity();
        for (std::size_t a = 0; a < 2; ++a) {
            // Keep the shape inside the frame at tau = -1, 0, +1.
            const double room = size / 2.0 - std::abs(s.velocity[a]) - 1.0;
            const double lo = std::min(size / 10.0, room);
            const double hi = std::min(size / 5.0, room);
            s.half_extent[a] = snap(std::max(0.5, rng.uniform(lo, hi)));
        }
        if (s.kind == ShapeKind::disc) {
            s.half_extent[1] = s.half_extent[0] = std::min(s.half_extent[0], s.half_extent[1]);
        }
        for (std::size_t a = 0; a < 2; ++a) {
            const double margin = s.half_extent[a] + std::abs(s.velocity[a]);
            s.center[a] = snap(rng.uniform(margin, size - margin));
        }
        for (auto& c : s.color) {
            c = static_cast<float>(rng.uniform(0.05, 0.95));
        }
        scene.shapes.push_back(s);
    }
    return scene;
}

Image render_scene(const Scene& scene, double tau) {
    Image img(scene.size, scene.size);
    std::vector<std::array<double, 2>> centers;
    for (const auto& s : scene.shapes) {
        centers.push_back(shape_center(s, tau));
    }
    constexpr double inv = 1.0 / (kSupersample * kSupersample);
    for (int py = 0; py < scene.size; ++py) {
        for (int px = 0; px < scene.size; ++px) {
            std::array<double, 3> acc{};
            for (int sy = 0; sy < kSupersample; ++sy) {
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const double x = px + (sx + 0.5) / kSupersample;
                    const double y = py + (sy + 0.5) / kSupersample;
                    std::array<double, 3> col{};
                    bool covered = false;
                    for (std::size_t k = scene.shapes.size(); k-- > 0;) {
                        if (inside(scene.shapes[k], centers[k], x, y)) {
                            for (std::size_t c = 0; c < 3; ++c) {
                                col[c] = scene.shapes[k].color[c];
                            }
                            covered = true;
                            break;
                        }
                    }
                    if (!covered) {
                        for (int c = 0; c < 3; ++c) {
                            col[static_cast<std::size_t>(c)] = background_value(scene.background, c, x, y, tau);
                        }
                    }
                    for (std::size_t c = 0; c < 3; ++c) {
                        acc[c] += col[c];
                    }
                }
            }
            for (int c = 0; c < 3; ++c) {
                img.at(py, px, c) = static_cast<float>(acc[static_cast<std::size_t>(c)] * inv);
            }
        }
    }
    return img;
}

Triplet render_triplet(const Scene& scene, std::string id) {
    return {render_scene(scene, -1.0), render_scene(scene, 0.0), render_scene(scene, 1.0), std::move(id)};
}

namespace {

std::string triplet_id(const std::string& source, int i) {
    std::ostringstream os;
    os << source << "_" << std::setw(6) << std::setfill('0') << i;
    return os.str();
}

Scene scene_for_index(const GenConfig& cfg, int i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    return random_scene(cfg, rng);
}

}  // namespace

std::vector<Triplet> synthesize_triplets(const GenConfig& cfg) {
    cfg.validate();
    std::vector<Triplet> out(static_cast<std::size_t>(cfg.n_triplets));
    parallel_for(out.size(), configured_threads(), [&](std::size_t i) {
        auto t = render_triplet(scene_for_index(cfg, static_cast<int>(i)), triplet_id(cfg.source, static_cast<int>(i)));
        t.prev = quantize(t.prev);
        t.mid = quantize(t.mid);
        t.next = quantize(t.next);
        out[i] = std::move(t);
    });
    return out;
}

std::filesystem::path DatasetManifest::resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : root / path;
}

json manifest_to_json(const DatasetManifest& m) {
    json entries = json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"id", e.id}, {"prev", e.prev}, {"mid", e.mid}, {"next", e.next}, {"source", e.source}});
    }
    json j = {{"format_version", m.format_version},
              {"root", m.root.generic_string()},
              {"entries", std::move(entries)},
              {"gen_config", m.gen_config}};
    if (!m.source_counts.empty()) {
        j["source_counts"] = m.source_counts;
    }
    return j;
}

DatasetManifest manifest_from_json(const json& j, const std::filesystem::path& base_dir) {
    DatasetManifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != 1) {
            throw FormatError("unsupported manifest format_version " + std::to_string(m.format_version));
        }
        const std::filesystem::path root = j.at("root").get<std::string>();
        m.root = root.is_absolute() ? root : (base_dir / root).lexically_normal();
        for (const auto& e : j.at("entries")) {
            m.entries.push_back({e.at("id").get<std::string>(), e.at("prev").get<std::string>(),
                                 e.at("mid").get<std::string>(), e.at("next").get<std::string>(),
                                 e.value("source", std::string("unknown"))});
        }
        m.gen_config = j.value("gen_config", json::object());
        if (j.contains("source_counts")) {
            m.source_counts = j.at("source_counts").get<std::map<std::string, std::size_t>>();
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& file) {
    const std::string text = manifest_to_json(m).dump(2) + "\n";
    write_file(file, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

DatasetManifest load_manifest(const std::filesystem::path& file_or_dir) {
    const auto file = std::filesystem::is_directory(file_or_dir) ? file_or_dir / "manifest.json" : file_or_dir;
    std::ifstream in(file);
    if (!in) {
        throw IoError("cannot open manifest '" + file.string() + "'");
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("manifest '" + file.string() + "' is not valid JSON: " + e.what());
    }
    auto m = manifest_from_json(j, std::filesystem::absolute(file).parent_path());
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
        if (!ids.insert(e.id).second) {
            throw FormatError("manifest has duplicate id '" + e.id + "'");
        }
        for (const auto* rel : {&e.prev, &e.mid, &e.next}) {
            if (!std::filesystem::exists(m.resolve(*rel))) {
                throw IoError("manifest entry '" + e.id + "' references missing file " + m.resolve(*rel).string());
            }
        }
    }
    return m;
}

Triplet load_triplet(const DatasetManifest& m, const ManifestEntry& e) {
    Triplet t{read_image(m.resolve(e.prev)), read_image(m.resolve(e.mid)), read_image(m.resolve(e.next)), e.id};
    if (!t.prev.same_shape(t.mid) || !t.prev.same_shape(t.next)) {
        throw DimensionError("triplet '" + e.id + "' has frames of different sizes");
    }
    return t;
}

std::vector<Triplet> load_triplets(const DatasetManifest& m, int threads) {
    std::vector<Triplet> out(m.entries.size());
    parallel_for(out.size(), threads, [&](std::size_t i) { out[i] = load_triplet(m, m.entries[i]); });
    return out;
}

DatasetManifest generate_synthetic(const GenConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());
    }
    DatasetManifest m;
    m.root = ".";
    m.gen_config = cfg.to_json();
    m.entries.resize(static_cast<std::size_t>(cfg.n_triplets));
    parallel_for(m.entries.size(), configured_threads(), [&](std::size_t i) {
        const auto id = triplet_id(cfg.source, static_cast<int>(i));
        const auto t = render_triplet(scene_for_index(cfg, static_cast<int>(i)), id);
        const std::string dir = "triplets/" + id + "/";
        write_image(t.prev, out_dir / (dir + "prev.ppm"));
        write_image(t.mid, out_dir / (dir + "mid.ppm"));
        write_image(t.next, out_dir / (dir + "next.ppm"));
        m.entries[i] = {id, dir + "prev.ppm", dir + "mid.ppm", dir + "next.ppm", cfg.source};
    });
    save_manifest(m, out_dir / "manifest.json");
    m.root = std::filesystem::absolute(out_dir).lexically_normal();
    return m;
}

namespace {

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, const char* tag) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, tag));
    rng.shuffle(perm.begin(), perm.end());
    return perm;
}

DatasetManifest with_entries(const DatasetManifest& like, std::vector<ManifestEntry> entries) {
    DatasetManifest m;
    m.format_version = like.format_version;
    m.root = like.root;
    m.gen_config = like.gen_config;
    m.entries = std::move(entries);
    return m;
}

}  // namespace

DatasetManifest few_shot_sample(const DatasetManifest& m, std::size_t n, std::uint64_t seed) {
    if (n > m.entries.size()) {
        throw ConfigError("requested " + std::to_string(n) + " triplets but the dataset has only " +
                          std::to_string(m.entries.size()));
    }
    const auto perm = seeded_permutation(m.entries.size(), seed, "few_shot");
    std::vector<ManifestEntry> entries;
    entries.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        entries.push_back(m.entries[perm[i]]);
    }
    return with_entries(m, std::move(entries));
}

DatasetManifest mix_manifests(std::span<const DatasetManifest> sources, std::size_t n, std::uint64_t seed) {
    std::size_t total = 0;
    for (const auto& s : sources) {
        total += s.size();
    }
    if (sources.empty() || total < n) {
        throw ConfigError("insufficient data: requested " + std::to_string(n) + " triplets from " +
                          std::to_string(total) + " available");
    }
    // Largest-remainder apportionment of n across sources by size.
    std::vector<std::size_t> quota(sources.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const double exact = static_cast<double>(n) * static_cast<double>(sources[i].size()) / static_cast<double>(total);
        quota[i] = std::min(sources[i].size(), static_cast<std::size_t>(std::floor(exact)));
        assigned += quota[i];
        remainders.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    while (assigned < n) {
        for (const auto& [frac, i] : remainders) {
            if (assigned < n && quota[i] < sources[i].size()) {
                ++quota[i];
                ++assigned;
            }
        }
    }

    std::vector<std::vector<ManifestEntry>> drawn(sources.size());
    std::size_t contributing = 0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const auto sub = few_shot_sample(sources[i], quota[i], seed);
        for (auto e : sub.entries) {
            e.prev = sources[i].resolve(e.prev).string();
            e.mid = sources[i].resolve(e.mid).string();
            e.next = sources[i].resolve(e.next).string();
            drawn[i].push_back(std::move(e));
        }
        contributing += quota[i] > 0 ? 1 : 0;
    }

    DatasetManifest out;
    out.root = "/";
    out.gen_config = json::array();
    for (const auto& s : sources) {
        out.gen_config.push_back(s.gen_config);
    }
    std::set<std::string> ids;
    for (std::size_t round = 0; out.entries.size() < n; ++round) {
        for (std::size_t i = 0; i < sources.size(); ++i) {
            if (round < drawn[i].size()) {
                auto& e = drawn[i][round];
                if (!ids.insert(e.id).second) {
                    throw ConfigError("duplicate triplet id '" + e.id + "' across mixed sources");
                }
                ++out.source_counts[e.source];
                out.entries.push_back(std::move(e));
            }
        }
    }
    if (contributing > 1) {
        Rng rng(derive_seed(seed, "mix"));
        rng.shuffle(out.entries.begin(), out.entries.end());
    }
    return out;
}

std::pair<DatasetManifest, DatasetManifest> split_holdout(const DatasetManifest& m, std::size_t n_holdout,
                                                          std::uint64_t seed) {
    if (n_holdout > m.entries.size()) {
        throw ConfigError("holdout size exceeds dataset size");
    }
    const auto perm = seeded_permutation(m.entries.size(), seed, "holdout");
    std::vector<bool> held(m.entries.size(), false);
    std::vector<ManifestEntry> holdout;
    for (std::size_t i = m.entries.size() - n_holdout; i < m.entries.size(); ++i) {
        held[perm[i]] = true;
    }
    std::vector<ManifestEntry> pool;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        (held[i] ? holdout : pool).push_back(m.entries[i]);
    }
    return {with_entries(m, std::move(pool)), with_entries(m, std::move(holdout))};
}

}  // namespace e2i
