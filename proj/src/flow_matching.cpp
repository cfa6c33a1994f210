#include "e2i/flow_matching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace e2i {

TrainingPair make_training_pair(const Latent& z_target, const Latent& eps, double t) {
    if (!z_target.same_shape(eps)) {
        throw DimensionError("make_training_pair: target and noise differ in shape");
    }
    TrainingPair pair{Latent(z_target.channels, z_target.height, z_target.width), t,
                      Latent(z_target.channels, z_target.height, z_target.width)};
    const auto a = static_cast<float>(1.0 - t);
    const auto b = static_cast<float>(t);
    for (std::size_t i = 0; i < z_target.size(); ++i) {
        // Endpoints are exact: t = 0 gives 1*z + 0*eps, t = 1 gives 0*z + 1*eps.
        pair.z_t.values[i] = a * z_target.values[i] + b * eps.values[i];
        pair.v_target.values[i] = eps.values[i] - z_target.values[i];
    }
    return pair;
}

TimestepDist parse_timestep_dist(const std::string& s) {
    if (s == "uniform") return TimestepDist::uniform;
    if (s == "logit-normal" || s == "logit_normal") return TimestepDist::logit_normal;
    throw ConfigError("unknown timestep distribution '" + s + "' (expected uniform | logit-normal)");
}

std::string to_string(TimestepDist d) { return d == TimestepDist::uniform ? "uniform" : "logit-normal"; }

double sample_timestep(TimestepDist dist, Rng& rng) {
    if (dist == TimestepDist::uniform) {
        return rng.uniform();
    }
    return 1.0 / (1.0 + std::exp(-rng.normal()));
}

Latent gaussian_latent(int channels, int height, int width, Rng& rng) {
    Latent z(channels, height, width);
    for (auto& v : z.values) {
        v = static_cast<float>(rng.normal());
    }
    return z;
}

Latent sample_noise(int channels, int height, int width, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "sampler.noise"));
    return gaussian_latent(channels, height, width, rng);
}

std::vector<NoiseDraw> draw_noise(std::span<const TrainingExample> batch, TimestepDist dist, Rng& rng) {
    std::vector<NoiseDraw> draws;
    draws.reserve(batch.size());
    for (const auto& ex : batch) {
        NoiseDraw d;
        d.t = sample_timestep(dist, rng);
        d.eps = gaussian_latent(ex.z_target.channels, ex.z_target.height, ex.z_target.width, rng);
        draws.push_back(std::move(d));
    }
    return draws;
}

double velocity_mse(const Latent& predicted, const Latent& target) {
    if (!predicted.same_shape(target)) {
        throw DimensionError("velocity_mse: shape mismatch");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = static_cast<double>(predicted.values[i]) - target.values[i];
        sum += d * d;
    }
    return sum / static_cast<double>(target.size());
}

namespace {

void check_batch(std::span<const TrainingExample> batch, std::span<const NoiseDraw> draws) {
    if (batch.empty()) {
        throw DimensionError("flow-matching loss needs a non-empty batch");
    }
    if (draws.size() != batch.size()) {
        throw DimensionError("one noise draw is required per batch element");
    }
}

template <typename T>
void accumulate(AdapterMap<T>& into, const AdapterMap<T>& from) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, g);
        } else {
            it->second.a += g.a;
            it->second.b += g.b;
        }
    }
}

}  // namespace

double fm_loss_value(const VelocityFn& predictor, std::span<const TrainingExample> batch,
                     std::span<const NoiseDraw> draws) {
    check_batch(batch, draws);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto pair = make_training_pair(batch[i].z_target, draws[i].eps, draws[i].t);
        total += velocity_mse(predictor(pair.z_t, pair.t, batch[i].cond), pair.v_target);
    }
    return total / static_cast<double>(batch.size());
}

template <typename T>
double fm_loss_and_grad(const BackboneParams<T>& base, const AdapterMap<T>& adapters,
                        std::span<const TrainingExample> batch, std::span<const NoiseDraw> draws,
                        AdapterMap<T>* grads, int threads) {
    check_batch(batch, draws);
    const auto& cfg = base.config;
    const std::size_t n = batch.size();
    std::vector<double> losses(n, 0.0);
    std::vector<AdapterMap<T>> per_sample(grads != nullptr ? n : 0);
    const AdapterMap<T>* ad = adapters.empty() ? nullptr : &adapters;

    parallel_for(n, threads, [&](std::size_t i) {
        const auto pair = make_training_pair(batch[i].z_target, draws[i].eps, draws[i].t);
        const auto in32 = make_input(cfg, pair.z_t, pair.t, batch[i].cond);
        BackboneInput<T> in{in32.noisy.template cast<T>(), in32.z0.template cast<T>(), in32.z1.template cast<T>(),
                            in32.semantic.template cast<T>(), pair.t};
        const Mat<T> target = tokenize(pair.v_target, cfg).template cast<T>();
        ForwardCache<T> cache;
        const Mat<T> pred = forward_tokens(base, ad, in, grads != nullptr ? &cache : nullptr);
        const Mat<T> diff = pred - target;
        const double elems = static_cast<double>(diff.size());
        losses[i] = static_cast<double>(diff.squaredNorm()) / elems;
        if (grads != nullptr) {
            const Mat<T> d_out = diff * static_cast<T>(2.0 / (elems * static_cast<double>(n)));
            backward_tokens(base, ad, cache, d_out, static_cast<NamedTensors<T>*>(nullptr), &per_sample[i]);
        }
    });

    if (grads != nullptr) {
        for (auto& g : per_sample) {
            accumulate(*grads, g);
        }
    }
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
}

template double fm_loss_and_grad(const BackboneParams<float>&, const AdapterMap<float>&,
                                 std::span<const TrainingExample>, std::span<const NoiseDraw>,
                                 AdapterMap<float>*, int);
template double fm_loss_and_grad(const BackboneParams<double>&, const AdapterMap<double>&,
                                 std::span<const TrainingExample>, std::span<const NoiseDraw>,
                                 AdapterMap<double>*, int);

LossResult fm_loss(const AdaptedModel& model, std::span<const TrainingExample> batch, Rng& rng, TimestepDist dist,
                   int threads) {
    if (batch.empty()) {
        throw DimensionError("flow-matching loss needs a non-empty batch");
    }
    const auto draws = draw_noise(batch, dist, rng);
    LossResult r;
    r.loss = fm_loss_and_grad(*model.base, model.adapters, batch, draws, &r.grads, threads);
    return r;
}

AdamW::AdamW(double learning_rate, const AdamWConfig& cfg) : lr_(learning_rate), cfg_(cfg) {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning_rate must be > 0");
    }
}

void AdamW::step(AdapterMap<float>& params, const AdapterMap<float>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto update = [&](Mat<float>& p, const Mat<float>& g, Mat<float>& m, Mat<float>& v) {
        if (m.size() == 0) {
            m = Mat<float>::Zero(p.rows(), p.cols());
            v = Mat<float>::Zero(p.rows(), p.cols());
        }
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double gi = g.data()[i];
            double mi = cfg_.beta1 * m.data()[i] + (1.0 - cfg_.beta1) * gi;
            double vi = cfg_.beta2 * v.data()[i] + (1.0 - cfg_.beta2) * gi * gi;
            m.data()[i] = static_cast<float>(mi);
            v.data()[i] = static_cast<float>(vi);
            double pi = p.data()[i] * (1.0 - lr_ * cfg_.weight_decay);
            pi -= lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
            p.data()[i] = static_cast<float>(pi);
        }
    };
    for (auto& [name, ad] : params) {
        const auto it = grads.find(name);
        if (it == grads.end()) {
            continue;
        }
        auto& m = m_[name];
        auto& v = v_[name];
        update(ad.a, it->second.a, m.a, v.a);
        update(ad.b, it->second.b, m.b, v.b);
    }
}

double TrainResult::epoch_mean_loss(int epoch) const {
    if (steps_per_epoch <= 0) {
        return 0.0;
    }
    const auto begin = static_cast<std::size_t>(epoch) * static_cast<std::size_t>(steps_per_epoch);
    const auto end = std::min(loss_history.size(), begin + static_cast<std::size_t>(steps_per_epoch));
    if (begin >= end) {
        throw std::out_of_range("epoch index outside the loss history");
    }
    return std::accumulate(loss_history.begin() + static_cast<std::ptrdiff_t>(begin),
                           loss_history.begin() + static_cast<std::ptrdiff_t>(end), 0.0) /
           static_cast<double>(end - begin);
}

int steps_per_epoch(std::size_t dataset_size, int batch_size) {
    return static_cast<int>((dataset_size + static_cast<std::size_t>(batch_size) - 1) /
                            static_cast<std::size_t>(batch_size));
}

TrainResult train(AdaptedModel model, std::span<const TrainingExample> dataset, const TrainConfig& cfg,
                  const StepCallback& on_step) {
    if (dataset.empty()) {
        throw DimensionError("train: dataset is empty");
    }
    if (cfg.epochs < 1) {
        throw ConfigError("epochs must be >= 1");
    }
    if (cfg.batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    TrainResult result;
    result.steps_per_epoch = steps_per_epoch(dataset.size(), cfg.batch_size);
    AdamW opt(cfg.learning_rate, cfg.adamw);
    Rng order_rng(derive_seed(cfg.grad_seed, "train.order"));
    Rng noise_rng(derive_seed(cfg.grad_seed, "train.noise"));
    std::vector<std::size_t> order(dataset.size());
    std::vector<TrainingExample> batch;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        order_rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(dataset[order[i]]);
            }
            auto loss = fm_loss(model, batch, noise_rng, cfg.timestep_dist, cfg.threads);
            if (!std::isfinite(loss.loss)) {
                std::ostringstream msg;
                msg << "non-finite loss " << loss.loss << " at epoch " << epoch << ", step " << step
                    << " (learning rate " << cfg.learning_rate << ")";
                throw NumericError(msg.str());
            }
            opt.step(model.adapters, loss.grads);
            result.loss_history.push_back(loss.loss);
            if (on_step) {
                on_step(step, loss.loss);
            }
            ++step;
        }
    }
    result.model = std::move(model);
    return result;
}

Latent euler_sample(const VelocityFn& velocity, const ConditioningSet& c, int channels, int height, int width,
                    const SamplerConfig& cfg) {
    if (cfg.steps < 1) {
        throw ConfigError("sampler steps must be >= 1");
    }
    Latent z = sample_noise(channels, height, width, cfg.noise_seed);
    const bool guided = cfg.guidance_scale != 1.0;
    const ConditioningSet null_c = guided ? null_conditioning(c) : ConditioningSet{};
    const double dt = 1.0 / cfg.steps;
    for (int k = 0; k < cfg.steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) / cfg.steps;
        Latent v = velocity(z, t, c);
        if (guided) {
            const Latent v_null = velocity(z, t, null_c);
            for (std::size_t i = 0; i < v.size(); ++i) {
                v.values[i] = static_cast<float>(v_null.values[i] +
                                                 cfg.guidance_scale * (v.values[i] - v_null.values[i]));
            }
        }
        if (!v.same_shape(z)) {
            throw DimensionError("velocity field returned a latent of the wrong shape");
        }
        for (std::size_t i = 0; i < z.size(); ++i) {
            z.values[i] = static_cast<float>(z.values[i] - dt * v.values[i]);
        }
    }
    return z;
}

Image clamp_unit(Image img) {
    for (auto& v : img.pixels) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return img;
}

Image interpolate(const AdaptedModel& model, const Image& i0, const Image& i1, const ConditioningEncoder& encoder,
                  const SamplerConfig& cfg) {
    const ConditioningSet c = encoder.build(i0, i1);
    const VelocityFn velocity = [&model](const Latent& z, double t, const ConditioningSet& cond) {
        return model.forward(z, t, cond);
    };
    const Latent z = euler_sample(velocity, c, c.z0.channels, c.z0.height, c.z0.width, cfg);
    return clamp_unit(encoder.codec().decode(z));
}

Image interpolate(const AdaptedModel& model, const Image& i0, const Image& i1, std::string_view prompt,
                  const CodecConfig& codec, const SamplerConfig& cfg, std::uint64_t semantic_seed) {
    SemanticConfig sem;
    sem.tokens = model.backbone_config().semantic_tokens;
    sem.width = model.backbone_config().d_model;
    const ConditioningEncoder encoder(codec, sem, std::string(prompt), semantic_seed);
    return interpolate(model, i0, i1, encoder, cfg);
}

}  // namespace e2i
