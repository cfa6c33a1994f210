#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "e2i/common.hpp"
#include "e2i/conditioning.hpp"
#include "e2i/lora_adapter.hpp"

namespace e2i {

struct BackboneConfig {
    int d_model = 64;
    int n_blocks = 4;
    int n_heads = 4;
    int mlp_ratio = 4;
    int token_patch = 1;  // latent cells per token side
    int semantic_tokens = 8;
    // Latent geometry the positional table is built for.
    int latent_channels = 12;
    int latent_height = 16;
    int latent_width = 16;
    std::uint64_t init_seed = 0;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    int token_dim() const { return latent_channels * token_patch * token_patch; }
    int tokens_per_latent() const {
        return (latent_height / token_patch) * (latent_width / token_patch);
    }
    // Noisy, z0 and z1 token groups plus the semantic tokens.
    int sequence_length() const { return 3 * tokens_per_latent() + semantic_tokens; }
};

// Ordered name -> matrix store. Biases and embeddings are stored as matrices
// too (1 x n for vectors) so every parameter has one stable name.
template <typename T>
class NamedTensors {
public:
    void add(const std::string& name, Mat<T> value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Mat<T>& at(const std::string& name);
    const Mat<T>& at(const std::string& name) const;
    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    std::size_t parameter_count() const;
    // Zero-filled tensor, created on first access.
    Mat<T>& zeros_like_slot(const std::string& name, Eigen::Index rows, Eigen::Index cols);

    template <typename U>
    NamedTensors<U> cast() const {
        NamedTensors<U> out;
        for (std::size_t i = 0; i < names_.size(); ++i) {
            out.add(names_[i], tensors_[i].template cast<U>());
        }
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<Mat<T>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct BackboneParams {
    BackboneConfig config;
    NamedTensors<T> tensors;

    template <typename U>
    BackboneParams<U> cast() const {
        return {config, tensors.template cast<U>()};
    }
};

// Deterministic seeded initialization. The last modulation layer of every
// block is zero so scale, shift and gate all start at 0 (identity modulation).
BackboneParams<float> init_backbone(const BackboneConfig& cfg);

// CRC over names, shapes and f32 values of every tensor in order.
std::uint32_t weights_checksum(const NamedTensors<float>& tensors);

// Names of the 2-D linear weights that adapters may target.
std::vector<std::string> linear_weight_names(const BackboneParams<float>& params);

// Sinusoidal features: d/2 geometrically spaced frequencies, [sin..., cos...].
std::vector<double> timestep_embedding(double t, int d_model);
double timestep_max_frequency(int d_model);

// Latent <-> token rows (tokens_per_latent x token_dim).
Mat<float> tokenize(const Latent& z, const BackboneConfig& cfg);
Latent untokenize(const Mat<float>& tokens, const BackboneConfig& cfg);

template <typename T>
struct BackboneInput {
    Mat<T> noisy;     // tokens_per_latent x token_dim
    Mat<T> z0;
    Mat<T> z1;
    Mat<T> semantic;  // semantic_tokens x d_model
    double t = 0.0;
};

BackboneInput<float> make_input(const BackboneConfig& cfg, const Latent& z_t, double t,
                                const ConditioningSet& c);

template <typename T>
struct LinearCache {
    Mat<T> input;
    Mat<T> lora_hidden;  // x A^T, present only when an adapter is attached
};

template <typename T>
struct BlockCache {
    LinearCache<T> mod_fc1, mod_fc2;
    Mat<T> mod_pre;     // 1 x d, before SiLU
    Mat<T> modulation;  // 1 x 6d: shift1 scale1 gate1 shift2 scale2 gate2
    Mat<T> xhat1;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd1;
    LinearCache<T> q, k, v, out;
    Mat<T> qm, km, vm;
    std::vector<Mat<T>> probs;  // per head, rows sum to 1
    Mat<T> attn;                // attention sub-layer output before gating
    Mat<T> xhat2;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd2;
    LinearCache<T> fc1, fc2;
    Mat<T> mlp_pre;
    Mat<T> mlp;
};

template <typename T>
struct ForwardCache {
    BackboneInput<T> input;
    Mat<T> temb;  // 1 x d
    std::vector<BlockCache<T>> blocks;
    Mat<T> xhat_final;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd_final;
    LinearCache<T> head;
};

// Predicted velocity tokens for the noisy-latent positions. Adapters, when
// given, are applied to the weights they are keyed by.
template <typename T>
Mat<T> forward_tokens(const BackboneParams<T>& params, const AdapterMap<T>* adapters,
                      const BackboneInput<T>& in, ForwardCache<T>* cache = nullptr);

// Back-propagates d(loss)/d(output tokens). Base gradients are accumulated
// into base_grads when non-null; adapter gradients (same shapes as a/b)
// into adapter_grads when non-null.
template <typename T>
void backward_tokens(const BackboneParams<T>& params, const AdapterMap<T>* adapters,
                     const ForwardCache<T>& cache, const Mat<T>& d_out, NamedTensors<T>* base_grads,
                     AdapterMap<T>* adapter_grads);

Latent forward(const BackboneParams<float>& params, const Latent& z_t, double t,
               const ConditioningSet& c, const AdapterMap<float>* adapters = nullptr);

}  // namespace e2i
