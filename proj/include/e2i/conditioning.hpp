#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "e2i/common.hpp"

namespace e2i {

inline constexpr std::string_view kDefaultPrompt =
    "generate the intermediate frame between the two input frames";

// Interleaved RGB frame, row-major, values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // height * width * 3

    Image() = default;
    Image(int h, int w, float fill = 0.0f);

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
    std::size_t size() const { return pixels.size(); }
};

// Channel-major latent grid: values[(c * height + y) * width + x].
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;

    Latent() = default;
    Latent(int c, int h, int w, float fill = 0.0f);

    float& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    bool same_shape(const Latent& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    std::size_t size() const { return values.size(); }
};

struct CodecConfig {
    int patch_factor = 2;
    std::uint64_t mix_seed = 7;

    int latent_channels() const { return 3 * patch_factor * patch_factor; }
};

// Lossless stand-in for a frozen VAE: space-to-depth by the patch factor
// followed by a per-cell orthogonal channel mix Q derived from mix_seed.
class LatentCodec {
public:
    explicit LatentCodec(const CodecConfig& cfg);

    Latent encode(const Image& img) const;
    Image decode(const Latent& z) const;

    const CodecConfig& config() const { return cfg_; }
    // 3p^2 x 3p^2, orthogonal.
    const Mat<double>& mixing_matrix() const { return q_; }

private:
    CodecConfig cfg_;
    Mat<double> q_;
};

Latent encode_image(const Image& img, const CodecConfig& cfg);
Image decode_latent(const Latent& z, const CodecConfig& cfg);

struct SemanticConfig {
    int tokens = 8;        // K
    int width = 64;        // must equal the backbone d_model
    int pool_grid = 4;     // g
    int prompt_dim = 32;   // hashed bag-of-words buckets
};

// K x width token matrix.
struct SemanticTokens {
    Mat<float> tokens;
};

// Frozen stand-in for the vision-language encoder. Pools each frame to a
// g x g grid, appends a hashed prompt embedding, and projects the
// concatenation through a seeded random matrix into K tokens.
class SemanticEncoder {
public:
    SemanticEncoder(const SemanticConfig& cfg, std::uint64_t seed);

    SemanticTokens encode(std::string_view prompt, const Image& i0, const Image& i1) const;

    const SemanticConfig& config() const { return cfg_; }
    int input_dim() const;
    // CRC over the projection weights; never changes after construction.
    std::uint32_t checksum() const;

private:
    SemanticConfig cfg_;
    Mat<float> projection_;  // (K * width) x input_dim
};

std::vector<float> average_pool(const Image& img, int grid);
std::vector<float> hash_prompt(std::string_view prompt, int dim);

SemanticTokens encode_semantics(std::string_view prompt, const Image& i0, const Image& i1,
                                std::uint64_t seed, const SemanticConfig& cfg = {});

// The conditioning set {h, z0, z1}: z0 is the spatial canvas (first frame),
// z1 the temporal destination (last frame).
struct ConditioningSet {
    SemanticTokens h;
    Latent z0;
    Latent z1;
};

ConditioningSet build_conditioning(const Image& i0, const Image& i1, std::string_view prompt,
                                   const CodecConfig& codec, std::uint64_t seed,
                                   const SemanticConfig& semantic = {});

// Null branch for guidance: zeroed semantic tokens and boundary latents.
ConditioningSet null_conditioning(const ConditioningSet& c);

// Reusable frozen encoders for pipelines that condition many frame pairs.
class ConditioningEncoder {
public:
    ConditioningEncoder(const CodecConfig& codec, const SemanticConfig& semantic,
                        std::string prompt, std::uint64_t seed);

    ConditioningSet build(const Image& i0, const Image& i1) const;
    const LatentCodec& codec() const { return codec_; }
    const SemanticEncoder& semantic() const { return semantic_; }
    const std::string& prompt() const { return prompt_; }

private:
    LatentCodec codec_;
    SemanticEncoder semantic_;
    std::string prompt_;
};

}  // namespace e2i
