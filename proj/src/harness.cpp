#include "e2i/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <boost/algorithm/string.hpp>

#include "CLI11.hpp"

#include "e2i/image_io.hpp"

namespace e2i {

using nlohmann::json;

std::shared_ptr<const BackboneParams<float>> make_base(const BackboneConfig& cfg) {
    return std::make_shared<const BackboneParams<float>>(init_backbone(cfg));
}

ConditioningEncoder make_encoder(const RunConfig& cfg, const BackboneConfig& backbone) {
    return ConditioningEncoder(cfg.codec, cfg.semantic_for(backbone), cfg.prompt, cfg.seeds.init);
}

std::vector<TrainingExample> build_examples(std::span<const Triplet> triplets, const ConditioningEncoder& encoder,
                                            int threads) {
    std::vector<TrainingExample> out(triplets.size());
    parallel_for(triplets.size(), threads, [&](std::size_t i) {
        out[i].z_target = encoder.codec().encode(triplets[i].mid);
        out[i].cond = encoder.build(triplets[i].prev, triplets[i].next);
    });
    return out;
}

InterpolateFn make_interpolator(const AdaptedModel& model, const ConditioningEncoder& encoder,
                                const SamplerConfig& sampler) {
    return [model, encoder, sampler](const Image& prev, const Image& next) {
        return interpolate(model, prev, next, encoder, sampler);
    };
}

json loss_history_json(const TrainResult& r) {
    json epochs = json::array();
    const int n_epochs = r.steps_per_epoch > 0 ? static_cast<int>(r.loss_history.size()) / r.steps_per_epoch : 0;
    for (int e = 0; e < n_epochs; ++e) {
        epochs.push_back(r.epoch_mean_loss(e));
    }
    return {{"steps_per_epoch", r.steps_per_epoch},
            {"steps", r.loss_history.size()},
            {"loss", r.loss_history},
            {"epoch_mean_loss", epochs}};
}

TrainRun train_lora(const RunConfig& cfg, std::span<const Triplet> train_set, int threads, const LogFn& log) {
    if (train_set.empty()) {
        throw ConfigError("training set is empty");
    }
    const BackboneConfig bcfg = cfg.backbone_for(train_set.front().prev.height, train_set.front().prev.width);
    const auto base = make_base(bcfg);
    const auto encoder = make_encoder(cfg, bcfg);
    const auto examples = build_examples(train_set, encoder, threads);

    TrainConfig tcfg = cfg.train_resolved();
    tcfg.threads = threads;
    const int per_epoch = steps_per_epoch(examples.size(), tcfg.batch_size);
    double epoch_sum = 0.0;
    const auto on_step = [&](int step, double loss) {
        epoch_sum += loss;
        if ((step + 1) % per_epoch == 0) {
            if (log) {
                std::ostringstream msg;
                msg << "epoch " << (step + 1) / per_epoch << "/" << tcfg.epochs << " mean loss " << std::setprecision(6)
                    << epoch_sum / per_epoch;
                log(msg.str());
            }
            epoch_sum = 0.0;
        }
    };

    TrainRun run{train(inject(base, cfg.lora_resolved()), examples, tcfg, on_step), {}};
    run.checkpoint = make_checkpoint(run.result.model, {{"run", cfg.to_json()}, {"n_train", train_set.size()}});
    return run;
}

namespace {

std::string cell_id(int rank, std::size_t n) { return "r" + std::to_string(rank) + "_n" + std::to_string(n); }

json row_config(const RunConfig& cfg, int rank, std::size_t n) {
    return {{"model", rank == 0 ? "baseline" : "lora"},
            {"rank", rank},
            {"n_train", n},
            {"epochs", cfg.train.epochs},
            {"learning_rate", cfg.train.learning_rate},
            {"steps", cfg.sampler.steps}};
}

std::string fmt(double v, int precision) {
    if (!std::isfinite(v)) return "n/a";
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

}  // namespace

std::vector<std::string> trend_warnings(std::span<const AblationRow> rows) {
    std::map<int, std::vector<const AblationRow*>> by_rank;
    for (const auto& r : rows) {
        if (r.rank > 0) by_rank[r.rank].push_back(&r);
    }
    std::vector<std::string> out;
    for (auto& [rank, cells] : by_rank) {
        std::sort(cells.begin(), cells.end(), [](auto* a, auto* b) { return a->n_train < b->n_train; });
        const AblationRow* smallest = cells.front();
        for (const auto* c : cells) {
            if (c->report.psnr_db < smallest->report.psnr_db - 0.1) {
                std::ostringstream msg;
                msg << "trend: rank " << rank << " PSNR at N=" << c->n_train << " (" << fmt(c->report.psnr_db, 2)
                    << " dB) is below N=" << smallest->n_train << " (" << fmt(smallest->report.psnr_db, 2)
                    << " dB) by more than 0.1 dB";
                out.push_back(msg.str());
            }
        }
    }
    return out;
}

json AblationResult::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
        rows_j.push_back({{"rank", r.rank}, {"n_train", r.n_train}, {"report", report_to_json(r.report)}});
    }
    return {{"rows", rows_j}, {"warnings", warnings}};
}

std::string AblationResult::to_markdown() const {
    std::ostringstream s;
    s << "| model | rank | N | PSNR (dB) | LPIPS proxy | FID | FloLPIPS | PS |\n";
    s << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        const auto& m = r.report;
        s << "| " << (r.rank == 0 ? "frozen baseline" : "LoRA-r" + std::to_string(r.rank) + "-N" + std::to_string(r.n_train))
          << " | " << (r.rank == 0 ? "-" : std::to_string(r.rank)) << " | "
          << (r.rank == 0 ? "-" : std::to_string(r.n_train)) << " | " << fmt(m.psnr_db, 2) << " | " << fmt(m.lpips, 4)
          << " | " << fmt(m.fid, 4) << " | " << fmt(m.flolpips, 4) << " | " << fmt(m.ps, 2) << " |\n";
    }
    for (const auto& w : warnings) {
        s << "\nwarning: " << w << "\n";
    }
    return s.str();
}

AblationResult run_ablation(const RunConfig& cfg, const DatasetManifest& pool, const DatasetManifest& holdout,
                            std::span<const int> ranks, std::span<const std::size_t> sizes,
                            const std::filesystem::path& cell_dir, const LogFn& log) {
    if (ranks.empty() || sizes.empty()) {
        throw ConfigError("ablation needs at least one rank and one size");
    }
    const int threads = configured_threads();
    const auto eval_set = load_triplets(holdout, threads);
    if (eval_set.empty()) {
        throw ConfigError("ablation needs a non-empty holdout set");
    }
    const RandomConvFeatures fx;
    const BackboneConfig bcfg = cfg.backbone_for(eval_set.front().prev.height, eval_set.front().prev.width);
    const auto encoder = make_encoder(cfg, bcfg);
    const SamplerConfig sampler = cfg.sampler_resolved();

    AblationResult result;
    {
        EvalOptions opts;
        opts.threads = threads;
        opts.config = row_config(cfg, 0, 0);
        const auto fn = make_interpolator(frozen_model(make_base(bcfg)), encoder, sampler);
        result.rows.push_back({0, 0, evaluate_dataset(fn, eval_set, fx, opts)});
        if (log) log("baseline PSNR " + fmt(result.rows.back().report.psnr_db, 2) + " dB");
    }

    for (const int rank : ranks) {
        for (const std::size_t n : sizes) {
            const std::string id = cell_id(rank, n);
            try {
                RunConfig cell = cfg;
                cell.lora.rank = rank;
                // Same seed for every size: subsets are nested prefixes of one permutation.
                const auto subset = few_shot_sample(pool, n, cfg.seeds.data);
                const auto train_set = load_triplets(subset, threads);
                const auto run = train_lora(cell, train_set, threads, log ? [&](const std::string& m) {
                    log(id + ": " + m);
                } : LogFn{});
                EvalOptions opts;
                opts.threads = threads;
                opts.config = row_config(cell, rank, n);
                const auto fn = make_interpolator(run.result.model, encoder, sampler);
                result.rows.push_back({rank, n, evaluate_dataset(fn, eval_set, fx, opts)});
                if (!cell_dir.empty()) {
                    save_checkpoint(run.checkpoint, cell_dir / id / "adapter.e2i");
                    const std::string text = report_to_json(result.rows.back().report).dump(2) + "\n";
                    write_file(cell_dir / id / "report.json",
                               std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
                }
                if (log) log(id + ": PSNR " + fmt(result.rows.back().report.psnr_db, 2) + " dB");
            } catch (const std::exception& e) {
                throw Error("ablation cell " + id + " failed: " + e.what());
            }
        }
    }
    result.warnings = trend_warnings(result.rows);
    return result;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <typename T>
std::vector<T> parse_csv_numbers(const std::string& csv, const char* flag) {
    std::vector<std::string> parts;
    boost::algorithm::split(parts, csv, boost::algorithm::is_any_of(","));
    std::vector<T> out;
    for (auto& p : parts) {
        boost::algorithm::trim(p);
        if (p.empty()) continue;
        try {
            const long long v = std::stoll(p);
            if (v < 1) throw std::invalid_argument("non-positive");
            out.push_back(static_cast<T>(v));
        } catch (const std::exception&) {
            throw ConfigError(std::string(flag) + " expects positive integers, got '" + p + "'");
        }
    }
    if (out.empty()) {
        throw ConfigError(std::string(flag) + " is empty");
    }
    return out;
}

struct CommonFlags {
    std::string config;
    std::vector<std::string> sets;

    void add(CLI::App* app) {
        app->add_option("--config", config, "INI run configuration");
        app->add_option("--set", sets, "Override one key, e.g. train.learning_rate=3e-3");
    }

    RunConfig resolve(RunConfig cfg = {}) const {
        if (!config.empty()) {
            cfg = load_run_config(config, std::move(cfg));
        }
        apply_sets(cfg);
        return cfg;
    }

    void apply_sets(RunConfig& cfg) const {
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got '" + s + "'");
            }
            apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
        }
    }
};

std::pair<DatasetManifest, DatasetManifest> training_split(const DatasetManifest& m, const RunConfig& cfg) {
    const auto n_holdout = static_cast<std::size_t>(cfg.data.n_holdout);
    if (n_holdout == 0) {
        return {m, DatasetManifest{}};
    }
    if (n_holdout >= m.size()) {
        throw ConfigError("holdout of " + std::to_string(n_holdout) + " leaves no training data in a dataset of " +
                          std::to_string(m.size()));
    }
    return split_holdout(m, n_holdout, cfg.seeds.data);
}

LoraCheckpoint read_checkpoint_with_config(const std::string& path, const CommonFlags& flags, RunConfig& cfg) {
    auto ckpt = load_checkpoint(path);
    if (!ckpt.extra.contains("run")) {
        throw FormatError("checkpoint " + path + " carries no run configuration");
    }
    cfg = run_config_from_json(ckpt.extra.at("run"));
    flags.apply_sets(cfg);
    return ckpt;
}

AdaptedModel model_for(const RunConfig& cfg, const BackboneConfig& bcfg, const LoraCheckpoint* ckpt) {
    if (ckpt == nullptr) {
        return frozen_model(make_base(bcfg));
    }
    if (backbone_config_to_json(bcfg) != backbone_config_to_json(ckpt->backbone)) {
        throw DimensionError("frames give backbone geometry " + backbone_config_to_json(bcfg).dump() +
                             " but the checkpoint was trained with " + backbone_config_to_json(ckpt->backbone).dump());
    }
    (void)cfg;
    return attach(*ckpt, make_base(bcfg));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Few-shot LoRA adaptation of a toy flow-matching editor for frame interpolation", "e2i"};
    app.require_subcommand(1);
    const LogFn log = [&err](const std::string& m) { err << m << "\n"; };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic triplet dataset");
    std::string gen_out;
    GenConfig gen_cfg;
    std::string gen_shapes;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n", gen_cfg.n_triplets, "Number of triplets");
    gen->add_option("--size", gen_cfg.image_size, "Frame side in pixels");
    gen->add_option("--seed", gen_cfg.seed, "Generation seed");
    gen->add_option("--shapes", gen_shapes, "Shapes per scene: N or MIN-MAX");
    gen->add_flag("--pan", gen_cfg.pan_mode, "Translate the background (camera pan)");

    // train
    auto* tr = app.add_subcommand("train", "Train a LoRA adapter on a few-shot subset");
    CommonFlags tr_flags;
    std::string tr_data, tr_out, tr_ntrain, tr_history;
    int tr_rank = 0, tr_epochs = 0, tr_batch = 0, tr_holdout = -1;
    double tr_alpha = 0.0, tr_lr = 0.0;
    tr_flags.add(tr);
    tr->add_option("--data", tr_data, "Dataset directory or manifest")->required();
    tr->add_option("--out", tr_out, "Checkpoint path")->required();
    tr->add_option("--n-train", tr_ntrain, "Training triplets (integer or 'any')");
    tr->add_option("--rank", tr_rank, "LoRA rank");
    tr->add_option("--alpha", tr_alpha, "LoRA alpha (default: rank)");
    tr->add_option("--epochs", tr_epochs, "Epochs");
    tr->add_option("--batch", tr_batch, "Batch size");
    tr->add_option("--lr", tr_lr, "Learning rate");
    tr->add_option("--holdout", tr_holdout, "Triplets held out from training");
    tr->add_option("--history", tr_history, "Loss history JSON (default: <out>.loss.json)");

    // interpolate
    auto* in = app.add_subcommand("interpolate", "Synthesize the middle frame of two frames");
    CommonFlags in_flags;
    std::string in_ckpt, in_f0, in_f1, in_out;
    int in_steps = 0;
    std::uint64_t in_noise = 0;
    in_flags.add(in);
    in->add_option("--ckpt", in_ckpt, "LoRA checkpoint (omit for the frozen baseline)");
    in->add_option("--frame0", in_f0, "First frame (PPM)")->required();
    in->add_option("--frame1", in_f1, "Second frame (PPM)")->required();
    in->add_option("--out", in_out, "Output PPM")->required();
    auto* in_steps_opt = in->add_option("--steps", in_steps, "Euler steps (default 40)");
    auto* in_noise_opt = in->add_option("--noise-seed", in_noise, "Sampler noise seed");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Score a model on a dataset");
    CommonFlags ev_flags;
    std::string ev_ckpt, ev_data, ev_report, ev_metrics, ev_split = "all";
    bool ev_baseline = false;
    ev_flags.add(ev);
    ev->add_option("--ckpt", ev_ckpt, "LoRA checkpoint (omit for the frozen baseline)");
    ev->add_option("--data", ev_data, "Dataset directory or manifest")->required();
    ev->add_option("--report", ev_report, "Report JSON path")->required();
    ev->add_option("--metrics", ev_metrics, "Comma-separated subset of psnr,lpips,fid,flolpips,ps");
    ev->add_flag("--with-baseline", ev_baseline, "Also score the frozen baseline");
    ev->add_option("--split", ev_split, "all | holdout")->check(CLI::IsMember({"all", "holdout"}));

    // ablate
    auto* ab = app.add_subcommand("ablate", "Rank x data-size grid with a frozen-baseline row");
    CommonFlags ab_flags;
    std::string ab_ranks, ab_sizes, ab_data, ab_out;
    ab_flags.add(ab);
    ab->add_option("--ranks", ab_ranks, "Comma-separated LoRA ranks")->required();
    ab->add_option("--sizes", ab_sizes, "Comma-separated training-set sizes")->required();
    ab->add_option("--data", ab_data, "Dataset directory or manifest")->required();
    ab->add_option("--out", ab_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        const int threads = configured_threads();
        if (gen->parsed()) {
            if (!gen_shapes.empty()) {
                const auto dash = gen_shapes.find('-');
                gen_cfg.min_shapes = std::stoi(gen_shapes.substr(0, dash));
                gen_cfg.max_shapes = dash == std::string::npos ? gen_cfg.min_shapes : std::stoi(gen_shapes.substr(dash + 1));
            }
            const auto m = generate_synthetic(gen_cfg, gen_out);
            out << "wrote " << m.size() << " triplets to " << gen_out << "\n";
            return 0;
        }

        if (tr->parsed()) {
            RunConfig cfg = tr_flags.resolve();
            if (tr->count("--rank")) cfg.lora.rank = tr_rank;
            if (tr->count("--alpha")) cfg.lora.alpha = tr_alpha;
            if (tr->count("--epochs")) cfg.train.epochs = tr_epochs;
            if (tr->count("--batch")) cfg.train.batch_size = tr_batch;
            if (tr->count("--lr")) cfg.train.learning_rate = tr_lr;
            if (tr->count("--holdout")) cfg.data.n_holdout = tr_holdout;
            const auto manifest = load_manifest(tr_data);
            const auto [pool, holdout] = training_split(manifest, cfg);
            std::size_t n_train = static_cast<std::size_t>(cfg.data.n_train);
            if (!tr_ntrain.empty()) {
                n_train = tr_ntrain == "any" ? pool.size() : parse_csv_numbers<std::size_t>(tr_ntrain, "--n-train").at(0);
            }
            if (n_train > pool.size()) {
                throw ConfigError("--n-train " + std::to_string(n_train) + " exceeds the " +
                                  std::to_string(pool.size()) + " triplets available for training");
            }
            cfg.data.n_train = static_cast<int>(n_train);
            const auto subset = few_shot_sample(pool, n_train, cfg.seeds.data);
            const auto triplets = load_triplets(subset, threads);
            const auto run = train_lora(cfg, triplets, threads, log);
            save_checkpoint(run.checkpoint, tr_out);
            const std::string history = tr_history.empty() ? tr_out + ".loss.json" : tr_history;
            write_text(history, loss_history_json(run.result).dump(2) + "\n");
            out << "checkpoint " << tr_out << " (" << trainable_count(run.result.model) << " trainable parameters, "
                << run.result.loss_history.size() << " steps)\n";
            return 0;
        }

        if (in->parsed()) {
            RunConfig cfg;
            LoraCheckpoint ckpt;
            const bool adapted = !in_ckpt.empty();
            if (adapted) {
                ckpt = read_checkpoint_with_config(in_ckpt, in_flags, cfg);
            } else {
                cfg = in_flags.resolve();
                err << "no --ckpt given: running the frozen baseline\n";
            }
            if (in_steps_opt->count()) cfg.sampler.steps = in_steps;
            if (in_noise_opt->count()) cfg.seeds.noise = in_noise;
            if (cfg.sampler.steps < 1) throw ConfigError("--steps must be >= 1");
            const Image f0 = read_image(in_f0);
            const Image f1 = read_image(in_f1);
            if (!f0.same_shape(f1)) {
                throw DimensionError("frame0 and frame1 differ in size");
            }
            const BackboneConfig bcfg = cfg.backbone_for(f0.height, f0.width);
            const AdaptedModel model = model_for(cfg, bcfg, adapted ? &ckpt : nullptr);
            const Image mid = interpolate(model, f0, f1, make_encoder(cfg, bcfg), cfg.sampler_resolved());
            write_image(mid, in_out);
            out << "wrote " << in_out << "\n";
            return 0;
        }

        if (ev->parsed()) {
            RunConfig cfg;
            LoraCheckpoint ckpt;
            const bool adapted = !ev_ckpt.empty();
            if (adapted) {
                ckpt = read_checkpoint_with_config(ev_ckpt, ev_flags, cfg);
            } else {
                cfg = ev_flags.resolve();
            }
            const auto metrics = parse_metric_list(ev_metrics);
            auto manifest = load_manifest(ev_data);
            if (ev_split == "holdout") {
                manifest = training_split(manifest, cfg).second;
            }
            if (manifest.entries.empty()) {
                throw ConfigError("dataset " + ev_data + " is empty");
            }
            const auto triplets = load_triplets(manifest, threads);
            const BackboneConfig bcfg = cfg.backbone_for(triplets.front().prev.height, triplets.front().prev.width);
            const auto encoder = make_encoder(cfg, bcfg);
            const RandomConvFeatures fx;
            json rows = json::array();
            const auto score = [&](const AdaptedModel& model, int rank, std::size_t n) {
                EvalOptions opts;
                opts.metrics = metrics;
                opts.threads = threads;
                opts.config = row_config(cfg, rank, n);
                opts.config["data"] = ev_data;
                const auto report =
                    evaluate_dataset(make_interpolator(model, encoder, cfg.sampler_resolved()), triplets, fx, opts);
                rows.push_back(report_to_json(report, metrics));
            };
            if (adapted) {
                score(model_for(cfg, bcfg, &ckpt), ckpt.lora.rank, ckpt.extra.value("n_train", std::size_t{0}));
            }
            if (!adapted || ev_baseline) {
                score(model_for(cfg, bcfg, nullptr), 0, 0);
            }
            write_text(ev_report, rows.dump(2) + "\n");
            out << rows.dump(2) << "\n";
            return 0;
        }

        if (ab->parsed()) {
            RunConfig cfg = ab_flags.resolve();
            const auto ranks = parse_csv_numbers<int>(ab_ranks, "--ranks");
            const auto sizes = parse_csv_numbers<std::size_t>(ab_sizes, "--sizes");
            const auto manifest = load_manifest(ab_data);
            const auto [pool, holdout] = training_split(manifest, cfg);
            if (holdout.entries.empty()) {
                throw ConfigError("ablation needs data.n_holdout >= 1");
            }
            const std::filesystem::path dir = ab_out;
            const auto result = run_ablation(cfg, pool, holdout, ranks, sizes, dir / "cells", log);
            write_text(dir / "ablation.json", result.to_json().dump(2) + "\n");
            write_text(dir / "ablation.md", result.to_markdown());
            for (const auto& w : result.warnings) {
                err << "warning: " << w << "\n";
            }
            out << result.to_markdown();
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace e2i
