#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/crc.hpp>

namespace e2i {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Error taxonomy shared by every module. Callers that only care about
// "something went wrong" can catch e2i::Error.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ChecksumError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// Seeded generator with platform-independent uniform/normal transforms
// (std::normal_distribution is implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    // Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);
std::uint64_t derive_seed(std::uint64_t base, const std::string& tag);

// CRC-32 over raw bytes, used for weight and payload integrity checks.
std::uint32_t crc32(std::span<const std::uint8_t> bytes);

class Crc32 {
public:
    void update(const void* data, std::size_t n);
    void update_f32(float v);
    void update_u32(std::uint32_t v);
    void update_str(const std::string& s);
    std::uint32_t value() const;

private:
    boost::crc_32_type crc_;
};

std::string hex32(std::uint32_t v);

// Number of worker threads from E2I_THREADS (0 or unset = run inline).
int configured_threads();

// Runs fn(i) for i in [0, n). With threads <= 1 the calls happen inline in
// index order; otherwise indices are distributed over worker threads. Callers
// write results into per-index slots so reductions stay order-fixed.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace e2i
