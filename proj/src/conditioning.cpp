#include "e2i/conditioning.hpp"

#include <cmath>
#include <sstream>

namespace e2i {

Image::Image(int h, int w, float fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

Latent::Latent(int c, int h, int w, float fill)
    : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

namespace {

Mat<double> orthogonal_from_seed(int n, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "codec.mix"));
    Mat<double> g(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            g(i, j) = rng.normal();
        }
    }
    Eigen::HouseholderQR<Mat<double>> qr(g);
    Mat<double> q = qr.householderQ();
    // Fix column signs so Q is a unique function of the seed.
    const Mat<double> r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j) {
        if (r(j, j) < 0.0) {
            q.col(j) *= -1.0;
        }
    }
    return q;
}

}  // namespace

LatentCodec::LatentCodec(const CodecConfig& cfg) : cfg_(cfg) {
    if (cfg.patch_factor < 1) {
        throw ConfigError("codec patch_factor must be >= 1");
    }
    q_ = orthogonal_from_seed(cfg.latent_channels(), cfg.mix_seed);
}

Latent LatentCodec::encode(const Image& img) const {
    const int p = cfg_.patch_factor;
    if (img.height <= 0 || img.width <= 0 || img.height % p != 0 || img.width % p != 0) {
        std::ostringstream msg;
        msg << "image " << img.height << "x" << img.width << " is not divisible by patch factor " << p;
        throw DimensionError(msg.str());
    }
    const int c = cfg_.latent_channels();
    Latent z(c, img.height / p, img.width / p);
    Eigen::VectorXd cell(c);
    for (int y = 0; y < z.height; ++y) {
        for (int x = 0; x < z.width; ++x) {
            for (int dy = 0; dy < p; ++dy) {
                for (int dx = 0; dx < p; ++dx) {
                    for (int ch = 0; ch < 3; ++ch) {
                        cell((dy * p + dx) * 3 + ch) = img.at(y * p + dy, x * p + dx, ch);
                    }
                }
            }
            const Eigen::VectorXd mixed = q_ * cell;
            for (int k = 0; k < c; ++k) {
                z.at(k, y, x) = static_cast<float>(mixed(k));
            }
        }
    }
    return z;
}

Image LatentCodec::decode(const Latent& z) const {
    const int p = cfg_.patch_factor;
    const int c = cfg_.latent_channels();
    if (z.channels != c || z.height <= 0 || z.width <= 0 || z.size() != static_cast<std::size_t>(c) * z.height * z.width) {
        std::ostringstream msg;
        msg << "latent has " << z.channels << " channels, codec expects " << c;
        throw DimensionError(msg.str());
    }
    Image img(z.height * p, z.width * p);
    Eigen::VectorXd cell(c);
    for (int y = 0; y < z.height; ++y) {
        for (int x = 0; x < z.width; ++x) {
            for (int k = 0; k < c; ++k) {
                cell(k) = z.at(k, y, x);
            }
            const Eigen::VectorXd unmixed = q_.transpose() * cell;
            for (int dy = 0; dy < p; ++dy) {
                for (int dx = 0; dx < p; ++dx) {
                    for (int ch = 0; ch < 3; ++ch) {
                        img.at(y * p + dy, x * p + dx, ch) =
                            static_cast<float>(unmixed((dy * p + dx) * 3 + ch));
                    }
                }
            }
        }
    }
    return img;
}

Latent encode_image(const Image& img, const CodecConfig& cfg) { return LatentCodec(cfg).encode(img); }

Image decode_latent(const Latent& z, const CodecConfig& cfg) { return LatentCodec(cfg).decode(z); }

std::vector<float> average_pool(const Image& img, int grid) {
    std::vector<float> out(static_cast<std::size_t>(grid) * grid * 3, 0.0f);
    auto bin = [](int i, int n, int g) {
        const int lo = i * n / g;
        const int hi = std::max((i + 1) * n / g, lo + 1);
        return std::pair{std::min(lo, n - 1), std::min(hi, n)};
    };
    for (int gy = 0; gy < grid; ++gy) {
        const auto [y0, y1] = bin(gy, img.height, grid);
        for (int gx = 0; gx < grid; ++gx) {
            const auto [x0, x1] = bin(gx, img.width, grid);
            for (int ch = 0; ch < 3; ++ch) {
                double sum = 0.0;
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) {
                        sum += img.at(y, x, ch);
                    }
                }
                out[(static_cast<std::size_t>(gy) * grid + gx) * 3 + ch] =
                    static_cast<float>(sum / ((y1 - y0) * (x1 - x0)));
            }
        }
    }
    return out;
}

std::vector<float> hash_prompt(std::string_view prompt, int dim) {
    std::vector<float> out(static_cast<std::size_t>(dim), 0.0f);
    std::istringstream words{std::string(prompt)};
    std::string word;
    while (words >> word) {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : word) {
            h = (h ^ c) * 1099511628211ULL;
        }
        const auto bucket = static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim));
        out[bucket] += ((h >> 40) & 1U) != 0 ? -1.0f : 1.0f;
    }
    return out;
}

SemanticEncoder::SemanticEncoder(const SemanticConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.tokens < 1 || cfg.width < 1 || cfg.pool_grid < 1 || cfg.prompt_dim < 1) {
        throw ConfigError("semantic encoder dimensions must be positive");
    }
    const int in = input_dim();
    projection_.resize(cfg.tokens * cfg.width, in);
    Rng rng(derive_seed(seed, "semantic.projection"));
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < projection_.size(); ++i) {
        projection_.data()[i] = static_cast<float>(rng.normal() * scale);
    }
}

int SemanticEncoder::input_dim() const {
    return 2 * cfg_.pool_grid * cfg_.pool_grid * 3 + cfg_.prompt_dim;
}

SemanticTokens SemanticEncoder::encode(std::string_view prompt, const Image& i0, const Image& i1) const {
    if (!i0.same_shape(i1)) {
        throw DimensionError("semantic encoder: boundary frames differ in size");
    }
    const auto p0 = average_pool(i0, cfg_.pool_grid);
    const auto p1 = average_pool(i1, cfg_.pool_grid);
    const auto pe = hash_prompt(prompt, cfg_.prompt_dim);
    Eigen::VectorXf input(input_dim());
    Eigen::Index k = 0;
    for (float v : p0) input(k++) = v;
    for (float v : p1) input(k++) = v;
    for (float v : pe) input(k++) = v;
    const Eigen::VectorXf flat = projection_ * input;
    SemanticTokens out;
    out.tokens = Eigen::Map<const Mat<float>>(flat.data(), cfg_.tokens, cfg_.width);
    return out;
}

std::uint32_t SemanticEncoder::checksum() const {
    Crc32 crc;
    crc.update(projection_.data(), static_cast<std::size_t>(projection_.size()) * sizeof(float));
    return crc.value();
}

SemanticTokens encode_semantics(std::string_view prompt, const Image& i0, const Image& i1,
                                std::uint64_t seed, const SemanticConfig& cfg) {
    return SemanticEncoder(cfg, seed).encode(prompt, i0, i1);
}

ConditioningSet build_conditioning(const Image& i0, const Image& i1, std::string_view prompt,
                                   const CodecConfig& codec, std::uint64_t seed,
                                   const SemanticConfig& semantic) {
    return ConditioningEncoder(codec, semantic, std::string(prompt), seed).build(i0, i1);
}

ConditioningSet null_conditioning(const ConditioningSet& c) {
    ConditioningSet out;
    out.h.tokens = Mat<float>::Zero(c.h.tokens.rows(), c.h.tokens.cols());
    out.z0 = Latent(c.z0.channels, c.z0.height, c.z0.width);
    out.z1 = Latent(c.z1.channels, c.z1.height, c.z1.width);
    return out;
}

ConditioningEncoder::ConditioningEncoder(const CodecConfig& codec, const SemanticConfig& semantic,
                                         std::string prompt, std::uint64_t seed)
    : codec_(codec), semantic_(semantic, seed), prompt_(std::move(prompt)) {}

ConditioningSet ConditioningEncoder::build(const Image& i0, const Image& i1) const {
    if (!i0.same_shape(i1)) {
        throw DimensionError("build_conditioning: boundary frames differ in size");
    }
    ConditioningSet c;
    c.h = semantic_.encode(prompt_, i0, i1);
    c.z0 = codec_.encode(i0);
    c.z1 = codec_.encode(i1);
    return c;
}

}  // namespace e2i
