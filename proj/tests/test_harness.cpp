#include "doctest.h"

#include <fstream>
#include <sstream>

#include "e2i/checkpoint.hpp"
#include "e2i/harness.hpp"
#include "e2i/image_io.hpp"
#include "helpers.hpp"

using namespace e2i;
using e2i::test::TempDir;
using nlohmann::json;

namespace {

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "e2i");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

const std::vector<std::string> kTiny = {
    "--set", "backbone.d_model=16",      "--set", "backbone.n_blocks=1", "--set", "backbone.n_heads=2",
    "--set", "backbone.semantic_tokens=2", "--set", "lora.rank=2",       "--set", "train.epochs=2",
    "--set", "sampler.steps=2",          "--set", "data.n_holdout=4",    "--set", "data.n_train=8",
    "--set", "train.learning_rate=1e-3"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
    args.insert(args.end(), kTiny.begin(), kTiny.end());
    return args;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunConfig tiny_run() {
    RunConfig c;
    for (std::size_t i = 0; i + 1 < kTiny.size(); i += 2) {
        const auto& kv = kTiny[i + 1];
        apply_override(c, kv.substr(0, kv.find('=')), kv.substr(kv.find('=') + 1));
    }
    return c;
}

LoraCheckpoint tiny_checkpoint() {
    auto bcfg = test::tiny_backbone();
    auto model = inject(std::make_shared<const BackboneParams<float>>(init_backbone(bcfg)), LoraConfig{2});
    for (auto& [name, ad] : model.adapters) ad.b.setConstant(0.25f);
    return make_checkpoint(model, json{{"note", "unit"}});
}

MetricReport report_with_psnr(double psnr) {
    MetricReport r;
    r.psnr_db = psnr;
    r.n_samples = 4;
    return r;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("run configuration files") {
    SUBCASE("sections, prompt and defaults") {
        const auto c = parse_run_config(
            "prompt = interpolate please\n"
            "[backbone]\nd_model = 32\nn_heads = 2\n"
            "[lora]\nrank = 4\ntargets = *.attn.q, *.attn.v\n"
            "[train]\nlearning_rate = 3e-3\ntimestep_dist = logit_normal\n"
            "[data]\npan = true\n"
            "[seeds]\nnoise = 9\n");
        CHECK(c.prompt == "interpolate please");
        CHECK(c.backbone.d_model == 32);
        CHECK(c.backbone.n_blocks == BackboneConfig{}.n_blocks);
        CHECK(c.lora.rank == 4);
        CHECK(c.lora.target_patterns == std::vector<std::string>{"*.attn.q", "*.attn.v"});
        CHECK(c.train.learning_rate == 3e-3);
        CHECK(c.train.timestep_dist == TimestepDist::logit_normal);
        CHECK(c.data.gen.pan_mode);
        CHECK(c.sampler_resolved().noise_seed == 9);
    }
    SUBCASE("unknown keys and bad values are rejected") {
        CHECK_THROWS_AS(parse_run_config("[lora]\nranks = 4\n"), ConfigError);
        CHECK_THROWS_AS(parse_run_config("[optimizer]\nlr = 1\n"), ConfigError);
        CHECK_THROWS_AS(parse_run_config("[lora]\nrank = four\n"), ConfigError);
        CHECK_THROWS_AS(parse_run_config("[data]\npan = maybe\n"), ConfigError);
        RunConfig c;
        CHECK_THROWS_AS(apply_override(c, "train.momentum", "0.9"), ConfigError);
        CHECK_THROWS_AS(load_run_config("/nonexistent/run.ini"), IoError);
    }
    SUBCASE("overrides and JSON round trip") {
        RunConfig c;
        apply_override(c, "train.learning_rate", "2e-3");
        apply_override(c, "lora.alpha", "16");
        apply_override(c, "seeds.train", "5");
        CHECK(c.train.learning_rate == 2e-3);
        CHECK(c.lora.effective_alpha() == 16.0);
        CHECK(c.train_resolved().grad_seed == 5);
        const auto back = run_config_from_json(c.to_json());
        CHECK(back.to_json() == c.to_json());
    }
    SUBCASE("geometry follows the frames and codec") {
        RunConfig c;
        const auto b = c.backbone_for(32, 32);
        CHECK(b.latent_height == 16);
        CHECK(b.latent_channels == 12);
        CHECK_THROWS_AS(c.backbone_for(31, 32), DimensionError);
    }
}

TEST_CASE("checkpoint format") {
    TempDir dir("ckpt");
    const auto ckpt = tiny_checkpoint();

    SUBCASE("save, load, save is byte-identical") {
        save_checkpoint(ckpt, dir.path() / "a.e2i");
        const auto loaded = load_checkpoint(dir.path() / "a.e2i");
        save_checkpoint(loaded, dir.path() / "b.e2i");
        CHECK(slurp(dir.path() / "a.e2i") == slurp(dir.path() / "b.e2i"));
        CHECK(loaded.base_checksum == ckpt.base_checksum);
        CHECK(loaded.extra == ckpt.extra);
        CHECK(loaded.lora.rank == 2);
        REQUIRE(loaded.adapters.size() == ckpt.adapters.size());
        for (const auto& [name, ad] : ckpt.adapters) {
            CHECK(loaded.adapters.at(name).a == ad.a);
            CHECK(loaded.adapters.at(name).b == ad.b);
        }
    }
    SUBCASE("arrays carry the LoRA suffixes") {
        const auto bytes = serialize_checkpoint(ckpt);
        const std::string text(bytes.begin(), bytes.end());
        CHECK(text.compare(0, 4, "E2I1") == 0);
        CHECK(text.find(lora_a_name("block0.attn.q")) != std::string::npos);
        CHECK(text.find(lora_b_name("block0.attn.q")) != std::string::npos);
    }
    SUBCASE("a flipped payload byte fails the integrity check") {
        auto bytes = serialize_checkpoint(ckpt);
        bytes[bytes.size() - 3] ^= 0x40;
        try {
            (void)parse_checkpoint(bytes);
            FAIL("expected ChecksumError");
        } catch (const ChecksumError& e) {
            CHECK(std::string(e.what()).find("integrity") != std::string::npos);
        }
    }
    SUBCASE("foreign and truncated files") {
        auto bytes = serialize_checkpoint(ckpt);
        auto wrong_magic = bytes;
        wrong_magic[0] = 'X';
        CHECK_THROWS_AS(parse_checkpoint(wrong_magic), FormatError);
        const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 20);
        CHECK_THROWS_AS(parse_checkpoint(cut), FormatError);
        auto longer = bytes;
        longer.push_back(0);
        CHECK_THROWS(parse_checkpoint(longer));
        CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.e2i"), IoError);
    }
    SUBCASE("attach checks the base") {
        const auto same = std::make_shared<const BackboneParams<float>>(init_backbone(test::tiny_backbone()));
        const auto model = attach(ckpt, same);
        CHECK(model.adapters.size() == ckpt.adapters.size());
        const auto other = std::make_shared<const BackboneParams<float>>(init_backbone(test::tiny_backbone(4)));
        try {
            (void)attach(ckpt, other);
            FAIL("expected ChecksumError");
        } catch (const ChecksumError& e) {
            CHECK(std::string(e.what()).find("different base") != std::string::npos);
        }
    }
}

TEST_CASE("trend warnings") {
    std::vector<AblationRow> rows = {{0, 0, report_with_psnr(10.0)},
                                     {4, 64, report_with_psnr(20.0)},
                                     {4, 128, report_with_psnr(19.95)},
                                     {4, 256, report_with_psnr(19.8)},
                                     {8, 64, report_with_psnr(21.0)},
                                     {8, 256, report_with_psnr(22.0)}};
    const auto w = trend_warnings(rows);
    REQUIRE(w.size() == 1);
    CHECK(w[0].find("rank 4") != std::string::npos);
    CHECK(w[0].find("N=256") != std::string::npos);
    rows[3].report.psnr_db = 19.91;
    CHECK(trend_warnings(rows).empty());
}

TEST_CASE("command line pipeline") {
    TempDir dir("cli");
    const auto p = [&](const std::string& name) { return (dir.path() / name).string(); };

    SUBCASE("gen-data") {
        REQUIRE(cli({"gen-data", "--out", p("a"), "--n", "5", "--size", "20", "--seed", "3"}).code == 0);
        REQUIRE(cli({"gen-data", "--out", p("b"), "--n", "5", "--size", "20", "--seed", "3"}).code == 0);
        CHECK(slurp(p("a/manifest.json")) == slurp(p("b/manifest.json")));
        const auto m = load_manifest(p("a"));
        CHECK(m.size() == 5);
        CHECK(slurp(m.resolve(m.entries[4].mid)) == slurp(p("b/") + m.entries[4].mid));

        const auto zero = cli({"gen-data", "--out", p("c"), "--n", "0"});
        CHECK(zero.code != 0);
        CHECK(zero.err.find("n must be ≥ 1") != std::string::npos);
        CHECK(cli({"gen-data", "--out", p("d"), "--n", "2", "--size", "20", "--shapes", "2-3", "--pan"}).code == 0);
        CHECK(cli({"frobnicate"}).code != 0);
    }

    SUBCASE("train, interpolate and evaluate") {
        REQUIRE(cli({"gen-data", "--out", p("data"), "--n", "16", "--size", "20", "--seed", "1"}).code == 0);

        const auto first = cli(with_tiny({"train", "--data", p("data"), "--out", p("m1.e2i")}));
        INFO(first.err);
        REQUIRE(first.code == 0);
        REQUIRE(cli(with_tiny({"train", "--data", p("data"), "--out", p("m2.e2i")})).code == 0);
        CHECK(slurp(p("m1.e2i")) == slurp(p("m2.e2i")));

        const auto history = json::parse(slurp(p("m1.e2i.loss.json")));
        CHECK(history.at("steps").get<int>() == 4);
        CHECK(history.at("loss").size() == 4);
        CHECK(history.at("epoch_mean_loss").size() == 2);

        const auto ckpt = load_checkpoint(p("m1.e2i"));
        CHECK(ckpt.lora.rank == 2);
        CHECK(ckpt.extra.at("n_train") == 8);
        CHECK(ckpt.extra.at("run").at("backbone").at("d_model") == 16);

        const auto too_many = cli(with_tiny({"train", "--data", p("data"), "--out", p("m3.e2i"), "--n-train", "13"}));
        CHECK(too_many.code != 0);
        CHECK(too_many.err.find("exceeds the 12 triplets available") != std::string::npos);
        CHECK(cli(with_tiny({"train", "--data", p("data"), "--out", p("m4.e2i"), "--n-train", "any", "--epochs",
                             "1"})).code == 0);
        CHECK(load_checkpoint(p("m4.e2i")).extra.at("n_train") == 12);

        const auto m = load_manifest(p("data"));
        const auto f0 = m.resolve(m.entries[0].prev).string();
        const auto f1 = m.resolve(m.entries[0].next).string();
        REQUIRE(cli({"interpolate", "--ckpt", p("m1.e2i"), "--frame0", f0, "--frame1", f1, "--out", p("i1.ppm")}).code == 0);
        REQUIRE(cli({"interpolate", "--ckpt", p("m1.e2i"), "--frame0", f0, "--frame1", f1, "--out", p("i2.ppm")}).code == 0);
        const Image mid = read_image(p("i1.ppm"));
        CHECK(mid.height == 20);
        CHECK(mid.width == 20);
        CHECK(slurp(p("i1.ppm")).rfind("P6\n20 20\n255\n", 0) == 0);
        CHECK(slurp(p("i1.ppm")) == slurp(p("i2.ppm")));
        REQUIRE(cli({"interpolate", "--ckpt", p("m1.e2i"), "--frame0", f0, "--frame1", f1, "--out", p("i3.ppm"),
                     "--noise-seed", "7"}).code == 0);
        CHECK(slurp(p("i3.ppm")) != slurp(p("i1.ppm")));

        const auto frozen = cli(with_tiny({"interpolate", "--frame0", f0, "--frame1", f1, "--out", p("i0.ppm")}));
        CHECK(frozen.code == 0);
        CHECK(frozen.err.find("frozen baseline") != std::string::npos);

        const auto ev = cli({"evaluate", "--ckpt", p("m1.e2i"), "--data", p("data"), "--report", p("r.json"),
                             "--split", "holdout", "--with-baseline"});
        INFO(ev.err);
        REQUIRE(ev.code == 0);
        const auto rows = json::parse(slurp(p("r.json")));
        REQUIRE(rows.size() == 2);
        for (const auto& r : rows) {
            CHECK_NOTHROW(validate_report_json(r));
            CHECK(r.at("n_samples") == 4);
        }
        CHECK(rows[0].at("config").at("model") == "lora");
        CHECK(rows[1].at("config").at("model") == "baseline");

        REQUIRE(cli({"evaluate", "--ckpt", p("m1.e2i"), "--data", p("data"), "--report", p("r2.json"), "--split",
                     "holdout", "--metrics", "psnr"}).code == 0);
        const auto only = json::parse(slurp(p("r2.json")));
        REQUIRE(only.size() == 1);
        CHECK(only[0].contains("psnr_db"));
        CHECK_FALSE(only[0].contains("lpips"));
        CHECK_FALSE(only[0].contains("fid"));
        CHECK(cli({"evaluate", "--ckpt", p("m1.e2i"), "--data", p("data"), "--report", p("r3.json"), "--metrics",
                   "ssim"}).code != 0);
        CHECK(cli({"evaluate", "--ckpt", p("nope.e2i"), "--data", p("data"), "--report", p("r4.json")}).code != 0);
    }

    SUBCASE("ablate") {
        REQUIRE(cli({"gen-data", "--out", p("pool"), "--n", "68", "--size", "20", "--seed", "2"}).code == 0);
        auto args = with_tiny({"ablate", "--ranks", "4,8", "--sizes", "16,32,64", "--data", p("pool"), "--out", p("grid")});
        // Later --set flags win.
        args.insert(args.end(), {"--set", "train.epochs=1", "--set", "sampler.steps=1"});
        const auto r = cli(args);
        INFO(r.err);
        REQUIRE(r.code == 0);
        const auto result = json::parse(slurp(p("grid/ablation.json")));
        const auto& rows = result.at("rows");
        REQUIRE(rows.size() == 7);
        CHECK(rows[0].at("rank") == 0);
        CHECK(rows[1].at("rank") == 4);
        CHECK(rows[1].at("n_train") == 16);
        CHECK(rows[6].at("rank") == 8);
        CHECK(rows[6].at("n_train") == 64);
        CHECK(std::filesystem::exists(p("grid/cells/r8_n64/adapter.e2i")));
        CHECK(std::filesystem::exists(p("grid/cells/r4_n16/report.json")));
        const std::string md = slurp(p("grid/ablation.md"));
        CHECK(md.find("frozen baseline") != std::string::npos);
        CHECK(md.find("LoRA-r8-N64") != std::string::npos);

        const auto bad = cli(with_tiny({"ablate", "--ranks", "4", "--sizes", "65", "--data", p("pool"), "--out",
                                        p("grid2")}));
        CHECK(bad.code != 0);
        CHECK(bad.err.find("r4_n65") != std::string::npos);
    }
}

}  // TEST_SUITE
