#include "e2i/lora.hpp"

#include <algorithm>
#include <cmath>
#include <fnmatch.h>
#include <sstream>

namespace e2i {

std::vector<std::string> default_lora_targets() {
    return {"block*.attn.q", "block*.attn.k", "block*.attn.v", "block*.attn.out", "block*.mod.fc1", "block*.mod.fc2"};
}

Latent AdaptedModel::forward(const Latent& z_t, double t, const ConditioningSet& c) const {
    return e2i::forward(*base, z_t, t, c, adapters.empty() ? nullptr : &adapters);
}

AdaptedModel frozen_model(std::shared_ptr<const BackboneParams<float>> base) {
    AdaptedModel m;
    m.base = std::move(base);
    m.config.target_patterns.clear();
    return m;
}

std::vector<std::string> resolve_targets(const BackboneParams<float>& params, const LoraConfig& cfg) {
    std::vector<std::string> out;
    const auto candidates = linear_weight_names(params);
    for (const auto& pattern : cfg.target_patterns) {
        bool matched = false;
        for (const auto& name : candidates) {
            if (fnmatch(pattern.c_str(), name.c_str(), 0) == 0) {
                matched = true;
                if (std::find(out.begin(), out.end(), name) == out.end()) {
                    out.push_back(name);
                }
            }
        }
        if (!matched) {
            throw ConfigError("LoRA target pattern '" + pattern + "' matches no backbone weight");
        }
    }
    return out;
}

AdaptedModel inject(std::shared_ptr<const BackboneParams<float>> base, const LoraConfig& cfg) {
    if (cfg.rank < 1) {
        throw ConfigError("LoRA rank must be >= 1");
    }
    if (cfg.target_patterns.empty()) {
        throw ConfigError("LoRA config has no target patterns");
    }
    AdaptedModel model;
    model.config = cfg;
    const auto targets = resolve_targets(*base, cfg);
    Rng rng(derive_seed(cfg.init_seed, "lora.init"));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.rank));
    for (const auto& name : targets) {
        const auto& w = base->tensors.at(name);
        LoraAdapter<float> ad;
        ad.a.resize(cfg.rank, w.cols());
        for (Eigen::Index i = 0; i < ad.a.size(); ++i) {
            ad.a.data()[i] = static_cast<float>(rng.normal() * stddev);
        }
        ad.b = Mat<float>::Zero(w.rows(), cfg.rank);
        ad.scale = static_cast<float>(cfg.scale());
        model.adapters.emplace(name, std::move(ad));
    }
    model.base = std::move(base);
    return model;
}

Eigen::VectorXf lora_forward(const LoraAdapter<float>& adapter, const Mat<float>& w0, const Eigen::VectorXf& x) {
    if (w0.cols() != x.size() || adapter.a.cols() != x.size() || adapter.b.rows() != w0.rows() ||
        adapter.b.cols() != adapter.a.rows()) {
        std::ostringstream msg;
        msg << "lora_forward shape mismatch: W0 " << w0.rows() << "x" << w0.cols() << ", A " << adapter.a.rows()
            << "x" << adapter.a.cols() << ", B " << adapter.b.rows() << "x" << adapter.b.cols() << ", x "
            << x.size();
        throw DimensionError(msg.str());
    }
    const Eigen::VectorXf ax = adapter.a * x;
    return w0 * x + adapter.scale * (adapter.b * ax);
}

BackboneParams<float> merge(const AdaptedModel& model) {
    BackboneParams<float> merged = *model.base;
    for (const auto& [name, ad] : model.adapters) {
        merged.tensors.at(name).noalias() += ad.scale * (ad.b * ad.a);
    }
    return merged;
}

std::vector<std::pair<std::string, Mat<float>*>> trainable_parameters(AdaptedModel& model) {
    std::vector<std::pair<std::string, Mat<float>*>> out;
    for (auto& [name, ad] : model.adapters) {
        out.emplace_back(lora_a_name(name), &ad.a);
        out.emplace_back(lora_b_name(name), &ad.b);
    }
    return out;
}

std::vector<std::pair<std::string, const Mat<float>*>> trainable_parameters(const AdaptedModel& model) {
    std::vector<std::pair<std::string, const Mat<float>*>> out;
    for (const auto& [name, ad] : model.adapters) {
        out.emplace_back(lora_a_name(name), &ad.a);
        out.emplace_back(lora_b_name(name), &ad.b);
    }
    return out;
}

std::size_t trainable_count(const AdaptedModel& model) {
    std::size_t n = 0;
    for (const auto& [name, ad] : model.adapters) {
        n += ad.parameter_count();
    }
    return n;
}

}  // namespace e2i
