#include "doctest.h"

#include <cmath>

#include "e2i/conditioning.hpp"
#include "e2i/image_io.hpp"
#include "helpers.hpp"

using namespace e2i;
using e2i::test::random_image;

TEST_SUITE("conditioning") {

TEST_CASE("mixing matrix is orthogonal for any seed and patch factor") {
    for (int p : {1, 2, 3}) {
        for (std::uint64_t seed : {0ULL, 7ULL, 12345ULL}) {
            const LatentCodec codec(CodecConfig{p, seed});
            const Mat<double>& q = codec.mixing_matrix();
            REQUIRE(q.rows() == 3 * p * p);
            const Mat<double> gram = q.transpose() * q;
            const double err = (gram - Mat<double>::Identity(q.rows(), q.cols())).cwiseAbs().maxCoeff();
            CHECK(err <= 1e-6);
        }
    }
}

TEST_CASE("round trip over 100 seeded images stays within 1e-5") {
    const LatentCodec codec(CodecConfig{});
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const Image img = random_image(16, 24, 1000 + s);
        const Image back = codec.decode(codec.encode(img));
        REQUIRE(back.same_shape(img));
        for (std::size_t i = 0; i < img.size(); ++i) {
            worst = std::max(worst, static_cast<double>(std::abs(back.pixels[i] - img.pixels[i])));
        }
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("constant image maps every cell to Q times the constant vector") {
    const LatentCodec codec(CodecConfig{2, 7});
    const Image img(6, 4, 0.5f);
    const Latent z = codec.encode(img);
    const Mat<double>& q = codec.mixing_matrix();
    for (int c = 0; c < 12; ++c) {
        double expected = 0.0;
        for (int k = 0; k < 12; ++k) expected += q(c, k) * 0.5;
        for (int y = 0; y < z.height; ++y) {
            for (int x = 0; x < z.width; ++x) {
                CHECK(z.at(c, y, x) == doctest::Approx(expected).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("latent channels follow the space-to-depth cell order") {
    const LatentCodec codec(CodecConfig{2, 11});
    const Image img = random_image(4, 6, 5);
    const Latent z = codec.encode(img);
    const Mat<double>& q = codec.mixing_matrix();
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 3; ++x) {
            for (int c = 0; c < 12; ++c) {
                double expected = 0.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        for (int ch = 0; ch < 3; ++ch)
                            expected += q(c, (dy * 2 + dx) * 3 + ch) * img.at(2 * y + dy, 2 * x + dx, ch);
                CHECK(z.at(c, y, x) == doctest::Approx(expected).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("latent shape arithmetic") {
    const Latent z = encode_image(Image(2, 2, 0.3f), CodecConfig{});
    CHECK(z.channels == 12);
    CHECK(z.height == 1);
    CHECK(z.width == 1);
    const Latent w = encode_image(random_image(6, 12, 1), CodecConfig{3, 1});
    CHECK(w.channels == 27);
    CHECK(w.height == 2);
    CHECK(w.width == 4);
}

TEST_CASE("sizes not divisible by the patch factor are rejected") {
    CHECK_THROWS_AS(encode_image(Image(5, 4), CodecConfig{}), DimensionError);
    CHECK_THROWS_AS(encode_image(Image(4, 7), CodecConfig{}), DimensionError);
    CHECK_THROWS_AS(decode_latent(Latent(11, 2, 2), CodecConfig{}), DimensionError);
}

TEST_CASE("zero latent decodes to a zero image") {
    const Image img = decode_latent(Latent(12, 3, 5), CodecConfig{});
    CHECK(img.height == 6);
    CHECK(img.width == 10);
    for (float v : img.pixels) CHECK(v == 0.0f);
}

TEST_CASE("round trip preserves the checksum of quantized pixels") {
    const LatentCodec codec(CodecConfig{});
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Image img = quantize(random_image(16, 16, 77 + s));
        const auto before = encode_ppm(img);
        const auto after = encode_ppm(quantize(codec.decode(codec.encode(img))));
        CHECK(crc32(before) == crc32(after));
    }
}

TEST_CASE("average pool matches block means") {
    const Image img = random_image(8, 8, 3);
    const auto pooled = average_pool(img, 2);
    REQUIRE(pooled.size() == 2 * 2 * 3);
    for (int gy = 0; gy < 2; ++gy) {
        for (int gx = 0; gx < 2; ++gx) {
            for (int c = 0; c < 3; ++c) {
                double sum = 0.0;
                for (int y = 0; y < 4; ++y)
                    for (int x = 0; x < 4; ++x) sum += img.at(gy * 4 + y, gx * 4 + x, c);
                CHECK(pooled[(gy * 2 + gx) * 3 + c] == doctest::Approx(sum / 16.0).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("semantic tokens") {
    const Image a = random_image(16, 16, 10);
    const Image b = random_image(16, 16, 11);
    const SemanticConfig cfg;

    SUBCASE("deterministic") {
        const auto t1 = encode_semantics("interpolate", a, b, 4, cfg);
        const auto t2 = encode_semantics("interpolate", a, b, 4, cfg);
        CHECK(t1.tokens.rows() == cfg.tokens);
        CHECK(t1.tokens.cols() == cfg.width);
        CHECK(t1.tokens == t2.tokens);
    }
    SUBCASE("order sensitive") {
        const auto fwd = encode_semantics("interpolate", a, b, 4, cfg);
        const auto rev = encode_semantics("interpolate", b, a, 4, cfg);
        CHECK((fwd.tokens - rev.tokens).cwiseAbs().maxCoeff() > 1e-8);
    }
    SUBCASE("empty prompt gives a zero prompt embedding and finite tokens") {
        const auto h = hash_prompt("", cfg.prompt_dim);
        for (float v : h) CHECK(v == 0.0f);
        const auto t = encode_semantics("", a, b, 4, cfg);
        CHECK(t.tokens.allFinite());
    }
    SUBCASE("prompt words change the tokens") {
        const auto t1 = encode_semantics("move left", a, b, 4, cfg);
        const auto t2 = encode_semantics("move right", a, b, 4, cfg);
        CHECK((t1.tokens - t2.tokens).cwiseAbs().maxCoeff() > 1e-8);
    }
    SUBCASE("frame size mismatch") {
        CHECK_THROWS_AS(encode_semantics("x", a, random_image(8, 16, 1), 4, cfg), DimensionError);
    }
    SUBCASE("encoder weights are fixed by the seed") {
        const SemanticEncoder e1(cfg, 9), e2(cfg, 9), e3(cfg, 10);
        CHECK(e1.checksum() == e2.checksum());
        CHECK(e1.checksum() != e3.checksum());
        (void)e1.encode("x", a, b);
        CHECK(e1.checksum() == e2.checksum());
    }
}

TEST_CASE("conditioning set") {
    const Image i = random_image(16, 16, 20);
    const Image j = random_image(16, 16, 21);

    SUBCASE("identical frames give identical latents") {
        const auto c = build_conditioning(i, i, kDefaultPrompt, CodecConfig{}, 1);
        CHECK(c.z0.values == c.z1.values);
    }
    SUBCASE("latent dims") {
        const auto c = build_conditioning(i, j, kDefaultPrompt, CodecConfig{}, 1);
        CHECK(c.z0.channels == 12);
        CHECK(c.z0.height == 8);
        CHECK(c.z0.width == 8);
        CHECK(c.z1.same_shape(c.z0));
    }
    SUBCASE("pure function of its arguments") {
        const auto c1 = build_conditioning(i, j, kDefaultPrompt, CodecConfig{}, 1);
        const auto c2 = build_conditioning(i, j, kDefaultPrompt, CodecConfig{}, 1);
        CHECK(c1.z0.values == c2.z0.values);
        CHECK(c1.z1.values == c2.z1.values);
        CHECK(c1.h.tokens == c2.h.tokens);
        const ConditioningEncoder enc(CodecConfig{}, SemanticConfig{}, std::string(kDefaultPrompt), 1);
        const auto c3 = enc.build(i, j);
        CHECK(c3.h.tokens == c1.h.tokens);
        CHECK(c3.z1.values == c1.z1.values);
    }
    SUBCASE("z0 is the first frame and z1 the last") {
        const auto c = build_conditioning(i, j, kDefaultPrompt, CodecConfig{}, 1);
        CHECK(c.z0.values == encode_image(i, CodecConfig{}).values);
        CHECK(c.z1.values == encode_image(j, CodecConfig{}).values);
    }
    SUBCASE("null conditioning zeroes every input") {
        const auto n = null_conditioning(build_conditioning(i, j, kDefaultPrompt, CodecConfig{}, 1));
        CHECK(n.h.tokens.cwiseAbs().maxCoeff() == 0.0f);
        for (float v : n.z0.values) CHECK(v == 0.0f);
        for (float v : n.z1.values) CHECK(v == 0.0f);
    }
}

}  // TEST_SUITE
