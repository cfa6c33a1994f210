#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "e2i/checkpoint.hpp"
#include "e2i/data_pipeline.hpp"
#include "e2i/flow_matching.hpp"
#include "e2i/metrics.hpp"
#include "e2i/run_config.hpp"

namespace e2i {

using LogFn = std::function<void(const std::string&)>;

std::shared_ptr<const BackboneParams<float>> make_base(const BackboneConfig& cfg);
ConditioningEncoder make_encoder(const RunConfig& cfg, const BackboneConfig& backbone);

// Target latent from mid, conditioning from (prev, next).
std::vector<TrainingExample> build_examples(std::span<const Triplet> triplets, const ConditioningEncoder& encoder,
                                            int threads = 0);

InterpolateFn make_interpolator(const AdaptedModel& model, const ConditioningEncoder& encoder,
                                const SamplerConfig& sampler);

struct TrainRun {
    TrainResult result;
    LoraCheckpoint checkpoint;
};

// Injects adapters into the seeded base and trains on `train_set`.
TrainRun train_lora(const RunConfig& cfg, std::span<const Triplet> train_set, int threads = 0,
                    const LogFn& log = {});

nlohmann::json loss_history_json(const TrainResult& r);

struct AblationRow {
    int rank = 0;            // 0 for the frozen baseline
    std::size_t n_train = 0;  // 0 for the frozen baseline
    MetricReport report;
};

struct AblationResult {
    std::vector<AblationRow> rows;  // baseline first, then rank-major
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
    std::string to_markdown() const;
};

// Trains and evaluates every (rank, size) cell on nested few-shot subsets
// of `pool`, scoring on `holdout`. A failing cell aborts with its id.
AblationResult run_ablation(const RunConfig& cfg, const DatasetManifest& pool, const DatasetManifest& holdout,
                            std::span<const int> ranks, std::span<const std::size_t> sizes,
                            const std::filesystem::path& cell_dir = {}, const LogFn& log = {});

// Within each rank, flags sizes whose PSNR drops more than 0.1 dB below the
// smallest size.
std::vector<std::string> trend_warnings(std::span<const AblationRow> rows);

// Entry point of the `e2i` tool; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace e2i
