#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "e2i/backbone.hpp"
#include "e2i/conditioning.hpp"
#include "e2i/data_pipeline.hpp"
#include "e2i/flow_matching.hpp"
#include "e2i/lora.hpp"

namespace e2i {

struct Seeds {
    std::uint64_t init = 0;   // backbone, adapters, semantic projection
    std::uint64_t data = 0;   // generation, few-shot subsets, holdout split
    std::uint64_t noise = 0;  // sampler starting noise
    std::uint64_t train = 0;  // batch order, timesteps and training noise
};

struct DataSettings {
    GenConfig gen;
    int n_train = 64;
    int n_holdout = 32;
};

// Every run-level knob. Latent geometry in `backbone` is derived from the
// frame size and codec by backbone_for().
struct RunConfig {
    CodecConfig codec;
    BackboneConfig backbone;
    SemanticConfig semantic;
    LoraConfig lora;
    TrainConfig train;
    SamplerConfig sampler;
    DataSettings data;
    std::string prompt{kDefaultPrompt};
    Seeds seeds;

    // Backbone config for frames of the given size with seeds applied.
    BackboneConfig backbone_for(int frame_height, int frame_width) const;
    SemanticConfig semantic_for(const BackboneConfig& b) const;
    LoraConfig lora_resolved() const;
    TrainConfig train_resolved() const;
    SamplerConfig sampler_resolved() const;

    nlohmann::json to_json() const;
};

// INI-style file: optional top-level `prompt`, then [codec] [backbone]
// [lora] [train] [sampler] [data] [seeds]. Unknown sections or keys are
// rejected with ConfigError.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

// Inverse of RunConfig::to_json.
RunConfig run_config_from_json(const nlohmann::json& j);

// Applies one dotted override such as "train.learning_rate=3e-3".
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace e2i
