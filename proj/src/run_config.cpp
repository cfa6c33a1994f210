#include "e2i/run_config.hpp"

#include <functional>
#include <map>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "e2i/checkpoint.hpp"
#include "e2i/image_io.hpp"

namespace e2i {

using nlohmann::json;

BackboneConfig RunConfig::backbone_for(int frame_height, int frame_width) const {
    const int p = codec.patch_factor;
    if (frame_height % p != 0 || frame_width % p != 0) {
        throw DimensionError("frame size " + std::to_string(frame_height) + "x" + std::to_string(frame_width) +
                             " is not divisible by the codec patch factor " + std::to_string(p));
    }
    BackboneConfig b = backbone;
    b.latent_channels = codec.latent_channels();
    b.latent_height = frame_height / p;
    b.latent_width = frame_width / p;
    b.init_seed = seeds.init;
    b.validate();
    return b;
}

SemanticConfig RunConfig::semantic_for(const BackboneConfig& b) const {
    SemanticConfig s = semantic;
    s.tokens = b.semantic_tokens;
    s.width = b.d_model;
    return s;
}

LoraConfig RunConfig::lora_resolved() const {
    LoraConfig l = lora;
    l.init_seed = seeds.init;
    return l;
}

TrainConfig RunConfig::train_resolved() const {
    TrainConfig t = train;
    t.grad_seed = seeds.train;
    return t;
}

SamplerConfig RunConfig::sampler_resolved() const {
    SamplerConfig s = sampler;
    s.noise_seed = seeds.noise;
    return s;
}

json RunConfig::to_json() const {
    json j;
    j["prompt"] = prompt;
    j["codec"] = {{"patch_factor", codec.patch_factor}, {"mix_seed", codec.mix_seed}};
    j["backbone"] = {{"d_model", backbone.d_model},     {"n_blocks", backbone.n_blocks},
                     {"n_heads", backbone.n_heads},     {"mlp_ratio", backbone.mlp_ratio},
                     {"token_patch", backbone.token_patch}, {"semantic_tokens", backbone.semantic_tokens},
                     {"pool_grid", semantic.pool_grid},     {"prompt_dim", semantic.prompt_dim}};
    j["lora"] = {{"rank", lora.rank}, {"alpha", lora.effective_alpha()}, {"targets", lora.target_patterns}};
    j["train"] = {{"learning_rate", train.learning_rate},
                  {"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"timestep_dist", to_string(train.timestep_dist)},
                  {"beta1", train.adamw.beta1},
                  {"beta2", train.adamw.beta2},
                  {"weight_decay", train.adamw.weight_decay},
                  {"eps", train.adamw.eps}};
    j["sampler"] = {{"steps", sampler.steps}, {"guidance_scale", sampler.guidance_scale}};
    j["data"] = {{"image_size", data.gen.image_size}, {"n_triplets", data.gen.n_triplets},
                 {"min_shapes", data.gen.min_shapes}, {"max_shapes", data.gen.max_shapes},
                 {"min_speed", data.gen.min_speed},   {"max_speed", data.gen.max_speed},
                 {"pan", data.gen.pan_mode},          {"n_train", data.n_train},
                 {"n_holdout", data.n_holdout}};
    j["seeds"] = {{"init", seeds.init}, {"data", seeds.data}, {"noise", seeds.noise}, {"train", seeds.train}};
    return j;
}

namespace {

template <typename T>
T parse_value(const std::string& key, const std::string& raw) {
    const std::string v = boost::algorithm::trim_copy(raw);
    if constexpr (std::is_same_v<T, bool>) {
        const std::string lower = boost::algorithm::to_lower_copy(v);
        if (lower == "1" || lower == "true" || lower == "yes" || lower == "on") return true;
        if (lower == "0" || lower == "false" || lower == "no" || lower == "off") return false;
        throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
    } else {
        try {
            return boost::lexical_cast<T>(v);
        } catch (const boost::bad_lexical_cast&) {
            throw ConfigError("config key '" + key + "' has an invalid value '" + v + "'");
        }
    }
}

std::vector<std::string> parse_list(const std::string& raw) {
    std::vector<std::string> parts;
    boost::algorithm::split(parts, raw, boost::algorithm::is_any_of(","));
    std::vector<std::string> out;
    for (auto& p : parts) {
        boost::algorithm::trim(p);
        if (!p.empty()) out.push_back(p);
    }
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T, typename F>
Setter field(F select) {
    return [select](RunConfig& c, const std::string& key, const std::string& v) {
        select(c) = parse_value<T>(key, v);
    };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"prompt", [](RunConfig& c, const std::string&, const std::string& v) {
             c.prompt = boost::algorithm::trim_copy(v);
         }},
        {"codec.patch_factor", field<int>([](RunConfig& c) -> int& { return c.codec.patch_factor; })},
        {"codec.mix_seed", field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.codec.mix_seed; })},
        {"backbone.d_model", field<int>([](RunConfig& c) -> int& { return c.backbone.d_model; })},
        {"backbone.n_blocks", field<int>([](RunConfig& c) -> int& { return c.backbone.n_blocks; })},
        {"backbone.n_heads", field<int>([](RunConfig& c) -> int& { return c.backbone.n_heads; })},
        {"backbone.mlp_ratio", field<int>([](RunConfig& c) -> int& { return c.backbone.mlp_ratio; })},
        {"backbone.token_patch", field<int>([](RunConfig& c) -> int& { return c.backbone.token_patch; })},
        {"backbone.semantic_tokens", field<int>([](RunConfig& c) -> int& { return c.backbone.semantic_tokens; })},
        {"backbone.pool_grid", field<int>([](RunConfig& c) -> int& { return c.semantic.pool_grid; })},
        {"backbone.prompt_dim", field<int>([](RunConfig& c) -> int& { return c.semantic.prompt_dim; })},
        {"lora.rank", field<int>([](RunConfig& c) -> int& { return c.lora.rank; })},
        {"lora.alpha", field<double>([](RunConfig& c) -> double& { return c.lora.alpha; })},
        {"lora.targets", [](RunConfig& c, const std::string& key, const std::string& v) {
             c.lora.target_patterns = parse_list(v);
             if (c.lora.target_patterns.empty()) {
                 throw ConfigError("config key '" + key + "' needs at least one pattern");
             }
         }},
        {"train.learning_rate", field<double>([](RunConfig& c) -> double& { return c.train.learning_rate; })},
        {"train.epochs", field<int>([](RunConfig& c) -> int& { return c.train.epochs; })},
        {"train.batch_size", field<int>([](RunConfig& c) -> int& { return c.train.batch_size; })},
        {"train.timestep_dist", [](RunConfig& c, const std::string&, const std::string& v) {
             c.train.timestep_dist = parse_timestep_dist(boost::algorithm::trim_copy(v));
         }},
        {"train.beta1", field<double>([](RunConfig& c) -> double& { return c.train.adamw.beta1; })},
        {"train.beta2", field<double>([](RunConfig& c) -> double& { return c.train.adamw.beta2; })},
        {"train.weight_decay", field<double>([](RunConfig& c) -> double& { return c.train.adamw.weight_decay; })},
        {"train.eps", field<double>([](RunConfig& c) -> double& { return c.train.adamw.eps; })},
        {"sampler.steps", field<int>([](RunConfig& c) -> int& { return c.sampler.steps; })},
        {"sampler.guidance_scale", field<double>([](RunConfig& c) -> double& { return c.sampler.guidance_scale; })},
        {"data.image_size", field<int>([](RunConfig& c) -> int& { return c.data.gen.image_size; })},
        {"data.n_triplets", field<int>([](RunConfig& c) -> int& { return c.data.gen.n_triplets; })},
        {"data.min_shapes", field<int>([](RunConfig& c) -> int& { return c.data.gen.min_shapes; })},
        {"data.max_shapes", field<int>([](RunConfig& c) -> int& { return c.data.gen.max_shapes; })},
        {"data.min_speed", field<double>([](RunConfig& c) -> double& { return c.data.gen.min_speed; })},
        {"data.max_speed", field<double>([](RunConfig& c) -> double& { return c.data.gen.max_speed; })},
        {"data.pan", field<bool>([](RunConfig& c) -> bool& { return c.data.gen.pan_mode; })},
        {"data.n_train", field<int>([](RunConfig& c) -> int& { return c.data.n_train; })},
        {"data.n_holdout", field<int>([](RunConfig& c) -> int& { return c.data.n_holdout; })},
        {"seeds.init", field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.seeds.init; })},
        {"seeds.data", field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.seeds.data; })},
        {"seeds.noise", field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.seeds.noise; })},
        {"seeds.train", field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.seeds.train; })},
    };
    return table;
}

void check(const RunConfig& c) {
    if (c.train.learning_rate <= 0.0) throw ConfigError("train.learning_rate must be > 0");
    if (c.train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (c.train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (c.sampler.steps < 1) throw ConfigError("sampler.steps must be >= 1");
    if (c.lora.rank < 1) throw ConfigError("lora.rank must be >= 1");
    if (c.codec.patch_factor < 1) throw ConfigError("codec.patch_factor must be >= 1");
    if (c.data.n_train < 1) throw ConfigError("data.n_train must be >= 1");
    if (c.data.n_holdout < 0) throw ConfigError("data.n_holdout must be >= 0");
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto it = setters().find(key);
    if (it == setters().end()) {
        throw ConfigError("unknown config key '" + key + "'");
    }
    it->second(cfg, key, value);
}

RunConfig parse_run_config(const std::string& text, RunConfig cfg) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config file: ") + e.what());
    }
    for (const auto& [name, node] : tree) {
        if (node.empty()) {
            apply_override(cfg, name, node.data());
            continue;
        }
        for (const auto& [key, leaf] : node) {
            if (!leaf.empty()) {
                throw ConfigError("config section [" + name + "] nests too deeply at '" + key + "'");
            }
            apply_override(cfg, name + "." + key, leaf.data());
        }
    }
    check(cfg);
    return cfg;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    if (!j.is_object()) {
        throw ConfigError("run config echo must be a JSON object");
    }
    for (const auto& [section, body] : j.items()) {
        if (!body.is_object()) {
            apply_override(cfg, section, body.is_string() ? body.get<std::string>() : body.dump());
            continue;
        }
        for (const auto& [key, value] : body.items()) {
            std::string text;
            if (value.is_string()) {
                text = value.get<std::string>();
            } else if (value.is_array()) {
                for (const auto& item : value) {
                    text += (text.empty() ? "" : ",") + item.get<std::string>();
                }
            } else {
                text = value.dump();
            }
            apply_override(cfg, section + "." + key, text);
        }
    }
    check(cfg);
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
    const auto bytes = read_file(path);
    return parse_run_config(std::string(bytes.begin(), bytes.end()), std::move(base));
}

}  // namespace e2i
