#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "e2i/conditioning.hpp"
#include "e2i/data_pipeline.hpp"

namespace e2i {

inline constexpr double kPsnrCap = 99.0;

// Channel-last feature map: values[(y * width + x) * channels + c].
struct FeatureMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> values;
};

// Frozen image featurizer. Global vectors feed FID and perceptual
// straightness; spatial maps (unit-normalized per pixel, finest scale first)
// feed the perceptual distance.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<double> global_features(const Image& img) const = 0;
    virtual std::vector<FeatureMap> feature_maps(const Image& img) const = 0;
};

// Seeded random 3x3 convolutions + tanh at scales 1, 1/2, 1/4.
class RandomConvFeatures final : public FeatureExtractor {
public:
    explicit RandomConvFeatures(std::uint64_t seed = 0, int channels = 16);

    std::vector<double> global_features(const Image& img) const override;
    std::vector<FeatureMap> feature_maps(const Image& img) const override;

private:
    std::vector<FeatureMap> raw_maps(const Image& img) const;

    int channels_;
    std::vector<std::vector<float>> weights_;  // per scale: channels x 27
    std::vector<std::vector<float>> biases_;
};

double mse(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);

double perceptual_distance(const Image& a, const Image& b, const FeatureExtractor& fx);
// Per-pixel squared feature distance at full resolution (height x width).
std::vector<double> perceptual_distance_map(const Image& a, const Image& b, const FeatureExtractor& fx);

double fid(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b);

struct FlowField {
    int height = 0;
    int width = 0;
    std::vector<double> u;
    std::vector<double> v;
};

struct HornSchunckConfig {
    double smoothness = 0.1;  // weight of the flow-gradient penalty
    int iterations = 100;
};

std::vector<double> luma(const Image& img);
FlowField estimate_flow(const Image& a, const Image& b, const HornSchunckConfig& cfg = {});

double flolpips(const Image& prev, const Image& next, const Image& gt_mid, const Image& pred_mid,
                const FeatureExtractor& fx);

// Mean of (180 - turn angle) in degrees along the embedded frame trajectory.
double perceptual_straightness_embedded(std::span<const std::vector<double>> embeddings);
double perceptual_straightness(std::span<const Image> frames, const FeatureExtractor& fx);

struct MetricReport {
    double psnr_db = 0.0;
    double lpips = 0.0;
    double fid = 0.0;
    double flolpips = 0.0;
    double ps = 0.0;
    std::size_t n_samples = 0;
    nlohmann::json config = nlohmann::json::object();
};

const std::vector<std::string>& all_metric_names();
std::set<std::string> parse_metric_list(const std::string& csv);

// Only the selected metrics are emitted (plus n_samples and config).
nlohmann::json report_to_json(const MetricReport& r, const std::set<std::string>& metrics = {});
// Throws FormatError when a required field is missing or mistyped.
void validate_report_json(const nlohmann::json& j);

using InterpolateFn = std::function<Image(const Image& prev, const Image& next)>;

struct EvalOptions {
    std::set<std::string> metrics;  // empty = all
    int threads = 0;
    nlohmann::json config = nlohmann::json::object();
};

MetricReport evaluate_dataset(const InterpolateFn& interpolate, std::span<const Triplet> triplets,
                              const FeatureExtractor& fx, const EvalOptions& opts = {});
MetricReport evaluate_dataset(const InterpolateFn& interpolate, const DatasetManifest& manifest,
                              const FeatureExtractor& fx, const EvalOptions& opts = {});

}  // namespace e2i
