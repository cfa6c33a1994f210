#include "e2i/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

namespace e2i {

std::uint8_t quantize_channel(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

Image quantize(const Image& img) {
    Image out = img;
    for (auto& v : out.pixels) {
        v = static_cast<float>(quantize_channel(v)) / 255.0f;
    }
    return out;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
    const std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(header.size() + img.pixels.size());
    for (float v : img.pixels) {
        bytes.push_back(quantize_channel(v));
    }
    return bytes;
}

namespace {

class HeaderReader {
public:
    explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const auto c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') {
                    ++pos_;
                }
            } else if (std::isspace(c) != 0) {
                ++pos_;
            } else {
                return;
            }
        }
    }

    long read_uint(const char* what) {
        skip_space_and_comments();
        long value = 0;
        std::size_t digits = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_]) != 0) {
            value = value * 10 + (bytes_[pos_] - '0');
            if (value > 1'000'000'000L) {
                throw FormatError(std::string("PPM header: ") + what + " is too large");
            }
            ++pos_;
            ++digits;
        }
        if (digits == 0) {
            throw FormatError(std::string("PPM header: expected ") + what);
        }
        return value;
    }

    std::size_t pos_ = 0;

private:
    std::span<const std::uint8_t> bytes_;
};

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
        throw FormatError("not a binary PPM: magic number P6 missing");
    }
    HeaderReader r(bytes);
    r.pos_ = 2;
    const long width = r.read_uint("width");
    const long height = r.read_uint("height");
    const long maxval = r.read_uint("maxval");
    if (width < 1 || height < 1) {
        throw FormatError("PPM header: dimensions must be positive");
    }
    if (maxval != 255) {
        throw FormatError("unsupported PPM maxval " + std::to_string(maxval) + " (only 255 is supported)");
    }
    if (r.pos_ >= bytes.size() || std::isspace(bytes[r.pos_]) == 0) {
        throw FormatError("PPM header: missing whitespace before payload");
    }
    ++r.pos_;
    const std::size_t expected = static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3;
    const std::size_t actual = bytes.size() - r.pos_;
    if (actual < expected) {
        std::ostringstream msg;
        msg << "PPM payload truncated: expected " << expected << " bytes, got " << actual;
        throw FormatError(msg.str());
    }
    Image img(static_cast<int>(height), static_cast<int>(width));
    for (std::size_t i = 0; i < expected; ++i) {
        img.pixels[i] = static_cast<float>(bytes[r.pos_ + i]) / 255.0f;
    }
    return img;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

Image read_image(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_ppm(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_image(const Image& img, const std::filesystem::path& path) { write_file(path, encode_ppm(img)); }

}  // namespace e2i
