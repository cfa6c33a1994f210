#include "doctest.h"

#include <cmath>
#include <limits>

#include "e2i/flow_matching.hpp"
#include "e2i/metrics.hpp"
#include "helpers.hpp"

using namespace e2i;
using e2i::test::random_conditioning;
using e2i::test::random_latent;
using e2i::test::tiny_backbone;

namespace {

std::shared_ptr<const BackboneParams<float>> shared_base(const BackboneConfig& cfg) {
    return std::make_shared<const BackboneParams<float>>(init_backbone(cfg));
}

std::vector<TrainingExample> toy_dataset(const BackboneConfig& cfg, std::size_t n, std::uint64_t seed) {
    std::vector<TrainingExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto c = random_conditioning(cfg, seed + 10 * i);
        Latent target(c.z0.channels, c.z0.height, c.z0.width);
        for (std::size_t k = 0; k < target.size(); ++k) {
            target.values[k] = 0.5f * (c.z0.values[k] + c.z1.values[k]);
        }
        out.push_back({target, std::move(c)});
    }
    return out;
}

double max_abs_diff(const Latent& a, const Latent& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, static_cast<double>(std::abs(a.values[i] - b.values[i])));
    return d;
}

}  // namespace

TEST_SUITE("flow_matching") {

TEST_CASE("training pair endpoints and velocity identity") {
    const Latent z = random_latent(12, 3, 3, 1);
    const Latent eps = random_latent(12, 3, 3, 2);
    const auto p0 = make_training_pair(z, eps, 0.0);
    CHECK(p0.z_t.values == z.values);
    const auto p1 = make_training_pair(z, eps, 1.0);
    CHECK(p1.z_t.values == eps.values);
    for (double t : {0.0, 0.25, 0.7, 1.0}) {
        const auto p = make_training_pair(z, eps, t);
        for (std::size_t i = 0; i < z.size(); ++i) {
            CHECK(p.v_target.values[i] + z.values[i] == doctest::Approx(eps.values[i]).epsilon(1e-6));
        }
    }
    Latent zero(1, 2, 2, 0.0f), two(1, 2, 2, 2.0f);
    const auto half = make_training_pair(zero, two, 0.5);
    for (float v : half.z_t.values) CHECK(v == 1.0f);
    for (float v : half.v_target.values) CHECK(v == 2.0f);
    CHECK_THROWS_AS(make_training_pair(zero, Latent(1, 3, 2), 0.5), DimensionError);
}

TEST_CASE("loss of stub predictors") {
    const auto cfg = tiny_backbone();
    const auto batch = toy_dataset(cfg, 3, 5);
    Rng rng(9);
    const auto draws = draw_noise(batch, TimestepDist::uniform, rng);
    const auto target_of = [&](const Latent& z_t, double t, const ConditioningSet& c) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (batch[i].cond.z1.values == c.z1.values && draws[i].t == t) {
                return make_training_pair(batch[i].z_target, draws[i].eps, t).v_target;
            }
        }
        (void)z_t;
        FAIL("unknown sample");
        return Latent{};
    };
    CHECK(fm_loss_value(target_of, batch, draws) == doctest::Approx(0.0).epsilon(1e-12));
    const double c = 0.3;
    const auto offset = [&](const Latent& z_t, double t, const ConditioningSet& cond) {
        Latent v = target_of(z_t, t, cond);
        for (auto& x : v.values) x = static_cast<float>(x + c);
        return v;
    };
    CHECK(fm_loss_value(offset, batch, draws) == doctest::Approx(c * c).epsilon(1e-5));
    CHECK_THROWS(fm_loss_value(offset, std::span<const TrainingExample>{}, {}));
}

TEST_CASE("loss is non-negative and zero only on exact predictions") {
    const Latent a = random_latent(2, 2, 2, 1);
    Latent b = a;
    CHECK(velocity_mse(a, b) == 0.0);
    b.values[3] += 0.1f;
    CHECK(velocity_mse(a, b) > 0.0);
}

TEST_CASE("timestep distributions stay in the unit interval") {
    Rng rng(4);
    double mean_u = 0.0, mean_l = 0.0;
    for (int i = 0; i < 4000; ++i) {
        const double u = sample_timestep(TimestepDist::uniform, rng);
        const double l = sample_timestep(TimestepDist::logit_normal, rng);
        REQUIRE(u >= 0.0);
        REQUIRE(u <= 1.0);
        REQUIRE(l > 0.0);
        REQUIRE(l < 1.0);
        mean_u += u / 4000;
        mean_l += l / 4000;
    }
    CHECK(mean_u == doctest::Approx(0.5).epsilon(0.05));
    CHECK(mean_l == doctest::Approx(0.5).epsilon(0.05));
    CHECK(parse_timestep_dist("logit_normal") == TimestepDist::logit_normal);
    CHECK(to_string(TimestepDist::uniform) == "uniform");
    CHECK_THROWS_AS(parse_timestep_dist("beta"), ConfigError);
}

TEST_CASE("adapter gradient matches central differences") {
    const auto cfg = tiny_backbone();
    const auto base = shared_base(cfg);
    auto model = inject(base, LoraConfig{2, 0.0, default_lora_targets(), 5});
    Rng brng(8);
    for (auto& [name, ad] : model.adapters)
        for (Eigen::Index i = 0; i < ad.b.size(); ++i) ad.b.data()[i] = static_cast<float>(brng.normal() * 0.2);

    const auto batch = toy_dataset(cfg, 2, 40);
    Rng rng(3);
    const auto draws = draw_noise(batch, TimestepDist::uniform, rng);
    const auto base_d = base->cast<double>();
    auto adapters = cast_adapters<double>(model.adapters);
    AdapterMap<double> grads;
    (void)fm_loss_and_grad<double>(base_d, adapters, batch, draws, &grads);

    const double h = 1e-4;
    double worst = 0.0;
    int checked = 0;
    for (auto& [name, ad] : adapters) {
        for (int which = 0; which < 2; ++which) {
            Mat<double>& m = which == 0 ? ad.a : ad.b;
            const Mat<double>& g = which == 0 ? grads.at(name).a : grads.at(name).b;
            const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(m.size())));
            const double keep = m.data()[idx];
            m.data()[idx] = keep + h;
            const double lp = fm_loss_and_grad<double>(base_d, adapters, batch, draws, nullptr);
            m.data()[idx] = keep - h;
            const double lm = fm_loss_and_grad<double>(base_d, adapters, batch, draws, nullptr);
            m.data()[idx] = keep;
            const double fd = (lp - lm) / (2 * h);
            const double an = g.data()[idx];
            worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}));
            ++checked;
        }
    }
    CHECK(checked == static_cast<int>(2 * adapters.size()));
    CHECK(worst <= 1e-3);
}

TEST_CASE("gradients do not depend on the worker count") {
    const auto cfg = tiny_backbone();
    auto model = inject(shared_base(cfg), LoraConfig{});
    const auto batch = toy_dataset(cfg, 4, 1);
    Rng r1(2), r2(2);
    const auto a = fm_loss(model, batch, r1, TimestepDist::uniform, 0);
    const auto b = fm_loss(model, batch, r2, TimestepDist::uniform, 3);
    CHECK(a.loss == b.loss);
    for (const auto& [name, g] : a.grads) {
        CHECK(g.a == b.grads.at(name).a);
        CHECK(g.b == b.grads.at(name).b);
    }
    Rng r3(2);
    CHECK_THROWS(fm_loss(model, std::span<const TrainingExample>{}, r3));
}

TEST_CASE("AdamW update matches the decoupled-decay formula") {
    AdamWConfig c;
    AdamW opt(0.1, c);
    AdapterMap<float> params, grads;
    params["w"] = {Mat<float>::Constant(1, 1, 2.0f), Mat<float>::Constant(1, 1, -1.0f), 1.0f};
    grads["w"] = {Mat<float>::Constant(1, 1, 0.5f), Mat<float>::Constant(1, 1, 0.0f), 1.0f};
    opt.step(params, grads);
    // First step: m_hat = g, v_hat = g^2, so the Adam step is lr * g / (|g| + eps).
    const double a = 2.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
    const double b = -1.0 * (1 - 0.1 * 0.01);
    CHECK(params["w"].a(0, 0) == doctest::Approx(a).epsilon(1e-6));
    CHECK(params["w"].b(0, 0) == doctest::Approx(b).epsilon(1e-6));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("training") {
    const auto cfg = tiny_backbone();
    const auto base = shared_base(cfg);
    const auto checksum = weights_checksum(base->tensors);

    SUBCASE("step count, frozen base and decreasing loss") {
        const auto data = toy_dataset(cfg, 8, 100);
        TrainConfig tc;
        tc.learning_rate = 3e-3;
        tc.epochs = 10;
        tc.batch_size = 4;
        const auto r = train(inject(base, LoraConfig{}), data, tc);
        CHECK(r.loss_history.size() == 20);
        CHECK(r.steps_per_epoch == 2);
        CHECK(r.epoch_mean_loss(9) < r.epoch_mean_loss(0));
        CHECK(weights_checksum(base->tensors) == checksum);
        CHECK(weights_checksum(r.model.base->tensors) == checksum);
    }
    SUBCASE("ten epochs over 64 examples at batch 4 take 160 steps") {
        CHECK(steps_per_epoch(64, 4) == 16);
        CHECK(steps_per_epoch(65, 4) == 17);
        const auto data = toy_dataset(cfg, 64, 7);
        TrainConfig tc;
        tc.epochs = 10;
        int calls = 0;
        const auto r = train(inject(base, LoraConfig{}), data, tc, [&](int, double) { ++calls; });
        CHECK(r.loss_history.size() == 160);
        CHECK(calls == 160);
    }
    SUBCASE("deterministic under fixed seeds") {
        const auto data = toy_dataset(cfg, 6, 3);
        TrainConfig tc;
        tc.epochs = 2;
        tc.learning_rate = 1e-3;
        const auto r1 = train(inject(base, LoraConfig{}), data, tc);
        const auto r2 = train(inject(base, LoraConfig{}), data, tc);
        CHECK(r1.loss_history == r2.loss_history);
        for (const auto& [name, ad] : r1.model.adapters) CHECK(ad.b == r2.model.adapters.at(name).b);
    }
    SUBCASE("non-finite loss aborts with a diagnostic") {
        auto broken = std::make_shared<BackboneParams<float>>(*base);
        broken->tensors.at("head")(0, 0) = std::numeric_limits<float>::quiet_NaN();
        const auto data = toy_dataset(cfg, 4, 3);
        try {
            (void)train(inject(broken, LoraConfig{}), data, TrainConfig{});
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
        }
    }
    SUBCASE("empty dataset") {
        CHECK_THROWS(train(inject(base, LoraConfig{}), std::span<const TrainingExample>{}, TrainConfig{}));
    }
}

TEST_CASE("Euler sampler") {
    const auto c = random_conditioning(tiny_backbone(), 1);
    const int C = 12, H = 4, W = 4;

    SUBCASE("constant oracle field is integrated exactly") {
        const Latent target = random_latent(C, H, W, 77);
        for (int steps : {1, 10, 40}) {
            SamplerConfig sc;
            sc.steps = steps;
            sc.noise_seed = 5;
            const Latent eps0 = sample_noise(C, H, W, sc.noise_seed);
            const auto v = [&](const Latent&, double, const ConditioningSet&) {
                Latent out(C, H, W);
                for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = eps0.values[i] - target.values[i];
                return out;
            };
            CHECK(max_abs_diff(euler_sample(v, c, C, H, W, sc), target) <= 1e-5);
        }
    }
    SUBCASE("zero field returns the starting noise") {
        SamplerConfig sc;
        sc.noise_seed = 8;
        const auto v = [&](const Latent& z, double, const ConditioningSet&) { return Latent(z.channels, z.height, z.width); };
        CHECK(euler_sample(v, c, C, H, W, sc).values == sample_noise(C, H, W, 8).values);
    }
    SUBCASE("uniform grid from one towards zero") {
        SamplerConfig sc;
        std::vector<double> times;
        const auto v = [&](const Latent& z, double t, const ConditioningSet&) {
            times.push_back(t);
            return Latent(z.channels, z.height, z.width);
        };
        (void)euler_sample(v, c, C, H, W, sc);
        REQUIRE(times.size() == 40);
        for (int k = 0; k < 40; ++k) CHECK(times[k] == doctest::Approx(1.0 - k / 40.0).epsilon(1e-12));
        sc.steps = 0;
        CHECK_THROWS_AS(euler_sample(v, c, C, H, W, sc), ConfigError);
    }
    SUBCASE("guidance scale one skips the null branch") {
        int null_calls = 0, calls = 0;
        const auto v = [&](const Latent& z, double, const ConditioningSet& cond) {
            ++calls;
            if (cond.h.tokens.cwiseAbs().maxCoeff() == 0.0f) ++null_calls;
            return Latent(z.channels, z.height, z.width, cond.h.tokens.cwiseAbs().maxCoeff() == 0.0f ? 1.0f : 2.0f);
        };
        SamplerConfig sc;
        sc.steps = 4;
        const Latent plain = euler_sample(v, c, C, H, W, sc);
        CHECK(null_calls == 0);
        CHECK(calls == 4);
        sc.guidance_scale = 3.0;
        calls = 0;
        const Latent guided = euler_sample(v, c, C, H, W, sc);
        CHECK(null_calls == 4);
        CHECK(calls == 8);
        // v = 1 + 3 (2 - 1) = 4 per step against 2 unguided.
        const Latent noise = sample_noise(C, H, W, sc.noise_seed);
        CHECK(guided.values[0] == doctest::Approx(noise.values[0] - 4.0).epsilon(1e-5));
        CHECK(plain.values[0] == doctest::Approx(noise.values[0] - 2.0).epsilon(1e-5));
    }
}

TEST_CASE("interpolate") {
    const auto cfg = tiny_backbone();
    const auto model = inject(shared_base(cfg), LoraConfig{});
    const Image i0 = test::random_image(8, 8, 1);
    const Image i1 = test::random_image(8, 8, 2);
    SamplerConfig sc;
    sc.steps = 3;
    sc.noise_seed = 4;
    const Image a = interpolate(model, i0, i1, "between", CodecConfig{}, sc, 1);
    const Image b = interpolate(model, i0, i1, "between", CodecConfig{}, sc, 1);
    CHECK(a.same_shape(i0));
    CHECK(a.pixels == b.pixels);
    for (float v : a.pixels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    sc.noise_seed = 5;
    CHECK(interpolate(model, i0, i1, "between", CodecConfig{}, sc, 1).pixels != a.pixels);
    CHECK_THROWS(interpolate(model, i0, test::random_image(6, 8, 3), "between", CodecConfig{}, sc, 1));
}

}  // TEST_SUITE
