#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "e2i/backbone.hpp"
#include "e2i/lora_adapter.hpp"

namespace e2i {

// Attention q/k/v, attention output projection and both modulation layers.
std::vector<std::string> default_lora_targets();

struct LoraConfig {
    int rank = 8;
    double alpha = 0.0;  // <= 0 means alpha = rank
    std::vector<std::string> target_patterns = default_lora_targets();
    std::uint64_t init_seed = 0;

    double effective_alpha() const { return alpha > 0.0 ? alpha : static_cast<double>(rank); }
    double scale() const { return effective_alpha() / rank; }
};

// Frozen base plus trainable adapters. The base is shared and const; only
// the adapters are ever written.
struct AdaptedModel {
    std::shared_ptr<const BackboneParams<float>> base;
    AdapterMap<float> adapters;
    LoraConfig config;

    const BackboneConfig& backbone_config() const { return base->config; }
    Latent forward(const Latent& z_t, double t, const ConditioningSet& c) const;
};

// Wraps a frozen backbone without adapters (the baseline).
AdaptedModel frozen_model(std::shared_ptr<const BackboneParams<float>> base);

// Base weight names selected by the config's glob patterns (fnmatch syntax).
std::vector<std::string> resolve_targets(const BackboneParams<float>& params, const LoraConfig& cfg);

AdaptedModel inject(std::shared_ptr<const BackboneParams<float>> base, const LoraConfig& cfg);

// W0 x + (alpha / r) B (A x).
Eigen::VectorXf lora_forward(const LoraAdapter<float>& adapter, const Mat<float>& w0, const Eigen::VectorXf& x);

// Dense copy with W = W0 + (alpha / r) B A for every adapted weight.
BackboneParams<float> merge(const AdaptedModel& model);

inline std::string lora_a_name(const std::string& base) { return base + ".lora_A"; }
inline std::string lora_b_name(const std::string& base) { return base + ".lora_B"; }

// Trainable arrays in a fixed order: for each adapter (sorted by base name)
// its A then its B. Pointers stay valid while the adapter map is unchanged.
std::vector<std::pair<std::string, Mat<float>*>> trainable_parameters(AdaptedModel& model);
std::vector<std::pair<std::string, const Mat<float>*>> trainable_parameters(const AdaptedModel& model);

std::size_t trainable_count(const AdaptedModel& model);

}  // namespace e2i
