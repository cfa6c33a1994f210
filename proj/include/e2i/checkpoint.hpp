#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"

#include "e2i/backbone.hpp"
#include "e2i/lora.hpp"

namespace e2i {

inline constexpr char kCheckpointMagic[4] = {'E', '2', 'I', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers u32 little-endian):
//   "E2I1" | version | header length | header JSON (UTF-8)
//   | array count | per array: name length, name, rows, cols, rows*cols f32
// The header records the CRC of everything after it.
struct LoraCheckpoint {
    LoraConfig lora;
    BackboneConfig backbone;
    std::uint32_t base_checksum = 0;
    AdapterMap<float> adapters;
    nlohmann::json extra = nlohmann::json::object();  // run echo, not interpreted
};

nlohmann::json backbone_config_to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json lora_config_to_json(const LoraConfig& c);
LoraConfig lora_config_from_json(const nlohmann::json& j);

LoraCheckpoint make_checkpoint(const AdaptedModel& model, nlohmann::json extra = nlohmann::json::object());

std::vector<std::uint8_t> serialize_checkpoint(const LoraCheckpoint& ckpt);
// Verifies magic, version and payload CRC.
LoraCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const LoraCheckpoint& ckpt, const std::filesystem::path& path);
LoraCheckpoint load_checkpoint(const std::filesystem::path& path);

// Re-attaches the adapters to a base. Throws ChecksumError when the base
// weights differ from the ones the adapters were trained against.
AdaptedModel attach(const LoraCheckpoint& ckpt, std::shared_ptr<const BackboneParams<float>> base);

}  // namespace e2i
