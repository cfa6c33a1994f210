#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "e2i/backbone.hpp"
#include "e2i/conditioning.hpp"

namespace e2i::test {

inline Image random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
    return img;
}

inline Latent random_latent(int c, int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Latent z(c, h, w);
    for (auto& v : z.values) v = static_cast<float>(rng.normal());
    return z;
}

// d_model 16, 2 blocks, 4x4 latent of 12 channels (8x8 frames at p = 2).
inline BackboneConfig tiny_backbone(std::uint64_t seed = 3) {
    BackboneConfig c;
    c.d_model = 16;
    c.n_blocks = 2;
    c.n_heads = 2;
    c.mlp_ratio = 2;
    c.semantic_tokens = 2;
    c.latent_channels = 12;
    c.latent_height = 4;
    c.latent_width = 4;
    c.init_seed = seed;
    return c;
}

inline SemanticConfig semantic_for(const BackboneConfig& b) {
    SemanticConfig s;
    s.tokens = b.semantic_tokens;
    s.width = b.d_model;
    return s;
}

inline ConditioningSet random_conditioning(const BackboneConfig& b, std::uint64_t seed) {
    const int size = b.latent_height * 2;
    const Image i0 = random_image(size, size, seed);
    const Image i1 = random_image(size, size, seed + 1);
    return build_conditioning(i0, i1, "in between", CodecConfig{}, seed, semantic_for(b));
}

// Gives every tensor (including the zero-initialized ones) random values so
// gradients through all paths are non-trivial.
template <typename T>
void randomize(NamedTensors<T>& tensors, std::uint64_t seed, double stddev = 0.3) {
    Rng rng(seed);
    for (const auto& name : tensors.names()) {
        auto& m = tensors.at(name);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
    }
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("e2i_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace e2i::test
