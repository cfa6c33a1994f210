#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "e2i/backbone.hpp"
#include "e2i/conditioning.hpp"
#include "e2i/lora.hpp"

namespace e2i {

// Point on the straight noising path z_t = (1 - t) z + t eps with its
// constant velocity eps - z.
struct TrainingPair {
    Latent z_t;
    double t = 0.0;
    Latent v_target;
};

TrainingPair make_training_pair(const Latent& z_target, const Latent& eps, double t);

enum class TimestepDist { uniform, logit_normal };

TimestepDist parse_timestep_dist(const std::string& s);
std::string to_string(TimestepDist d);
double sample_timestep(TimestepDist dist, Rng& rng);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
};

struct TrainConfig {
    double learning_rate = 1e-4;
    int epochs = 10;
    int batch_size = 4;
    AdamWConfig adamw;
    TimestepDist timestep_dist = TimestepDist::uniform;
    std::uint64_t grad_seed = 0;
    // Worker threads for per-sample gradients; results do not depend on it.
    int threads = 0;
};

struct SamplerConfig {
    int steps = 40;
    double guidance_scale = 1.0;
    std::uint64_t noise_seed = 0;
};

struct TrainingExample {
    Latent z_target;
    ConditioningSet cond;
};

// Per-sample randomness of one loss evaluation.
struct NoiseDraw {
    double t = 0.0;
    Latent eps;
};

Latent gaussian_latent(int channels, int height, int width, Rng& rng);
// The sampler's starting point for a given seed.
Latent sample_noise(int channels, int height, int width, std::uint64_t seed);

std::vector<NoiseDraw> draw_noise(std::span<const TrainingExample> batch, TimestepDist dist, Rng& rng);

using VelocityFn = std::function<Latent(const Latent& z_t, double t, const ConditioningSet& c)>;

double velocity_mse(const Latent& predicted, const Latent& target);

// Loss of an arbitrary predictor on fixed draws (no gradients).
double fm_loss_value(const VelocityFn& predictor, std::span<const TrainingExample> batch,
                     std::span<const NoiseDraw> draws);

// Mean over the batch of the element-mean squared velocity error, with the
// gradient w.r.t. every adapter's A and B accumulated into grads.
template <typename T>
double fm_loss_and_grad(const BackboneParams<T>& base, const AdapterMap<T>& adapters,
                        std::span<const TrainingExample> batch, std::span<const NoiseDraw> draws,
                        AdapterMap<T>* grads, int threads = 0);

struct LossResult {
    double loss = 0.0;
    AdapterMap<float> grads;
};

LossResult fm_loss(const AdaptedModel& model, std::span<const TrainingExample> batch, Rng& rng,
                   TimestepDist dist = TimestepDist::uniform, int threads = 0);

// Decoupled weight decay Adam over the adapter arrays.
class AdamW {
public:
    AdamW(double learning_rate, const AdamWConfig& cfg);
    void step(AdapterMap<float>& params, const AdapterMap<float>& grads);
    long steps_taken() const { return t_; }

private:
    double lr_;
    AdamWConfig cfg_;
    long t_ = 0;
    AdapterMap<float> m_, v_;
};

struct TrainResult {
    AdaptedModel model;
    std::vector<double> loss_history;  // one entry per optimizer step
    int steps_per_epoch = 0;

    double epoch_mean_loss(int epoch) const;
};

int steps_per_epoch(std::size_t dataset_size, int batch_size);

using StepCallback = std::function<void(int step, double loss)>;

TrainResult train(AdaptedModel model, std::span<const TrainingExample> dataset, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

// Left-endpoint Euler from t = 1 (noise) to t = 0 on a uniform grid.
// guidance_scale != 1 blends with the null-conditioned velocity.
Latent euler_sample(const VelocityFn& velocity, const ConditioningSet& c, int channels, int height, int width,
                    const SamplerConfig& cfg);

Image clamp_unit(Image img);

Image interpolate(const AdaptedModel& model, const Image& i0, const Image& i1, const ConditioningEncoder& encoder,
                  const SamplerConfig& cfg);
Image interpolate(const AdaptedModel& model, const Image& i0, const Image& i1, std::string_view prompt,
                  const CodecConfig& codec, const SamplerConfig& cfg, std::uint64_t semantic_seed = 0);

}  // namespace e2i
