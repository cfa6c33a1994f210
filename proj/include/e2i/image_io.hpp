#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "e2i/conditioning.hpp"

namespace e2i {

// Binary PPM (P6), 8-bit, maxval 255. Writing emits the canonical header
// "P6\n<w> <h>\n255\n" and quantizes with round-half-up after clamping.
std::vector<std::uint8_t> encode_ppm(const Image& img);
Image decode_ppm(std::span<const std::uint8_t> bytes);

Image read_image(const std::filesystem::path& path);
void write_image(const Image& img, const std::filesystem::path& path);

std::uint8_t quantize_channel(float v);
// Snap to the 8-bit grid, as a write/read round trip would.
Image quantize(const Image& img);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace e2i
