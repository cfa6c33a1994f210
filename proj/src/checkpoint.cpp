#include "e2i/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "e2i/image_io.hpp"

namespace e2i {

using nlohmann::json;

json backbone_config_to_json(const BackboneConfig& c) {
    return {{"d_model", c.d_model},
            {"n_blocks", c.n_blocks},
            {"n_heads", c.n_heads},
            {"mlp_ratio", c.mlp_ratio},
            {"token_patch", c.token_patch},
            {"semantic_tokens", c.semantic_tokens},
            {"latent_channels", c.latent_channels},
            {"latent_height", c.latent_height},
            {"latent_width", c.latent_width},
            {"init_seed", c.init_seed}};
}

BackboneConfig backbone_config_from_json(const json& j) {
    BackboneConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_blocks = j.at("n_blocks").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.token_patch = j.at("token_patch").get<int>();
    c.semantic_tokens = j.at("semantic_tokens").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.latent_height = j.at("latent_height").get<int>();
    c.latent_width = j.at("latent_width").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.validate();
    return c;
}

json lora_config_to_json(const LoraConfig& c) {
    return {{"rank", c.rank},
            {"alpha", c.effective_alpha()},
            {"targets", c.target_patterns},
            {"init_seed", c.init_seed}};
}

LoraConfig lora_config_from_json(const json& j) {
    LoraConfig c;
    c.rank = j.at("rank").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.target_patterns = j.at("targets").get<std::vector<std::string>>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    if (c.rank < 1) {
        throw FormatError("checkpoint: LoRA rank must be >= 1");
    }
    return c;
}

LoraCheckpoint make_checkpoint(const AdaptedModel& model, json extra) {
    LoraCheckpoint ckpt;
    ckpt.lora = model.config;
    ckpt.backbone = model.backbone_config();
    ckpt.base_checksum = weights_checksum(model.base->tensors);
    ckpt.adapters = model.adapters;
    ckpt.extra = std::move(extra);
    return ckpt;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_bytes(std::vector<std::uint8_t>& out, std::string_view s) {
    out.insert(out.end(), s.begin(), s.end());
}

void put_array(std::vector<std::uint8_t>& out, const std::string& name, const Mat<float>& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name);
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i]));
    }
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (remaining() < n) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what);
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const LoraCheckpoint& ckpt) {
    std::vector<std::uint8_t> payload;
    put_u32(payload, static_cast<std::uint32_t>(2 * ckpt.adapters.size()));
    for (const auto& [name, ad] : ckpt.adapters) {
        put_array(payload, lora_a_name(name), ad.a);
        put_array(payload, lora_b_name(name), ad.b);
    }

    json header = {{"magic", "E2I1"},
                   {"format_version", kCheckpointVersion},
                   {"lora", lora_config_to_json(ckpt.lora)},
                   {"backbone", backbone_config_to_json(ckpt.backbone)},
                   {"base_checksum", hex32(ckpt.base_checksum)},
                   {"payload_crc32", hex32(crc32(payload))},
                   {"extra", ckpt.extra}};
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(12 + text.size() + payload.size());
    put_bytes(out, std::string_view(kCheckpointMagic, 4));
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    put_bytes(out, text);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

LoraCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.str(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
        throw FormatError("not a LoRA checkpoint (magic mismatch)");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t header_len = r.u32("header length");
    json header;
    try {
        header = json::parse(r.str(header_len, "header"));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    const auto payload = bytes.subspan(r.pos());
    const std::string stored_crc = header.value("payload_crc32", "");
    if (hex32(crc32(payload)) != stored_crc) {
        throw ChecksumError("checkpoint payload integrity check failed (crc " + hex32(crc32(payload)) +
                            ", header says " + stored_crc + ")");
    }

    LoraCheckpoint ckpt;
    try {
        ckpt.lora = lora_config_from_json(header.at("lora"));
        ckpt.backbone = backbone_config_from_json(header.at("backbone"));
        ckpt.base_checksum = static_cast<std::uint32_t>(std::stoul(header.at("base_checksum").get<std::string>(), nullptr, 16));
        ckpt.extra = header.value("extra", json::object());
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
    }

    const std::uint32_t count = r.u32("array count");
    std::map<std::string, Mat<float>> arrays;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32("name length"), "array name");
        const std::uint32_t rows = r.u32("rows");
        const std::uint32_t cols = r.u32("cols");
        if (static_cast<std::uint64_t>(rows) * cols * 4 > r.remaining()) {
            throw FormatError("checkpoint truncated in array '" + name + "'");
        }
        Mat<float> m(rows, cols);
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            m.data()[k] = std::bit_cast<float>(r.u32("array data"));
        }
        if (!arrays.emplace(name, std::move(m)).second) {
            throw FormatError("checkpoint repeats array '" + name + "'");
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("checkpoint has trailing bytes");
    }

    const auto scale = static_cast<float>(ckpt.lora.scale());
    for (auto it = arrays.begin(); it != arrays.end(); ++it) {
        const std::string& name = it->first;
        constexpr std::string_view suffix_a = ".lora_A";
        if (name.size() <= suffix_a.size() || !name.ends_with(suffix_a)) {
            if (!name.ends_with(".lora_B")) {
                throw FormatError("checkpoint array '" + name + "' is not a LoRA factor");
            }
            continue;
        }
        const std::string base = name.substr(0, name.size() - suffix_a.size());
        const auto b = arrays.find(lora_b_name(base));
        if (b == arrays.end()) {
            throw FormatError("checkpoint has " + name + " without " + lora_b_name(base));
        }
        ckpt.adapters.emplace(base, LoraAdapter<float>{it->second, b->second, scale});
    }
    if (2 * ckpt.adapters.size() != arrays.size()) {
        throw FormatError("checkpoint has unpaired LoRA factors");
    }
    return ckpt;
}

void save_checkpoint(const LoraCheckpoint& ckpt, const std::filesystem::path& path) {
    write_file(path, serialize_checkpoint(ckpt));
}

LoraCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse_checkpoint(bytes);
}

AdaptedModel attach(const LoraCheckpoint& ckpt, std::shared_ptr<const BackboneParams<float>> base) {
    const std::uint32_t actual = weights_checksum(base->tensors);
    if (actual != ckpt.base_checksum) {
        throw ChecksumError("checkpoint was trained against a different base (expected " +
                            hex32(ckpt.base_checksum) + ", got " + hex32(actual) + ")");
    }
    for (const auto& [name, ad] : ckpt.adapters) {
        if (!base->tensors.contains(name)) {
            throw FormatError("checkpoint adapts unknown weight '" + name + "'");
        }
        const auto& w = base->tensors.at(name);
        if (ad.a.cols() != w.cols() || ad.b.rows() != w.rows() || ad.a.rows() != ad.b.cols()) {
            throw DimensionError("checkpoint adapter '" + name + "' does not fit the base weight");
        }
    }
    AdaptedModel model;
    model.base = std::move(base);
    model.adapters = ckpt.adapters;
    model.config = ckpt.lora;
    return model;
}

}  // namespace e2i
