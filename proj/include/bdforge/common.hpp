#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bdforge {

// Error taxonomy. The CLI maps ConfigError to exit code 2 and everything
// else that escapes to exit code 3.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class PipelineError : public Error {
public:
    explicit PipelineError(const std::string& msg) : Error("pipeline error: " + msg) {}
};

// Half-up rounding used everywhere a fraction is turned into a count
// (poison ratio, noise fraction, split sizes). Ties round up: 2.5 -> 3.
long long round_half_up(double x);

// 64-bit seed mixer (splitmix64 finalizer). Bijective on u64.
std::uint64_t mix64(std::uint64_t x);

// Derive a stream seed from a base seed and a stream id. Used for
// per-sample and per-cell sub-seeds; injective in `id` for a fixed seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t id);

// Deterministic RNG (xoshiro256** seeded via splitmix64). We avoid the
// std <random> distributions so that identical seeds produce identical
// streams regardless of the standard library in use.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    // Uniform double in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n);
    // Standard normal via Box-Muller (one cached spare).
    double normal();
    double normal(double mean, double stddev);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Independent generator for stream `id`, derived from this Rng's seed.
    Rng child(std::uint64_t id) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit over raw bytes, rendered as 16 hex digits. Used for store
// checksums.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);

// Base64 (RFC 4648, with padding).
std::string base64_encode(const void* data, std::size_t len);
std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::string base64_encode(const std::string& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// float32 little-endian packing for payload serialization.
std::string pack_f32_le(const std::vector<double>& values);
std::vector<double> unpack_f32_le(const std::vector<std::uint8_t>& bytes);
std::vector<double> unpack_f32_le(const std::string& bytes);

// float64 little-endian IO helpers for checkpoint files.
void append_f64_le(std::string& out, double v);
void append_u32_le(std::string& out, std::uint32_t v);
double read_f64_le(const std::uint8_t* p);
std::uint32_t read_u32_le(const std::uint8_t* p);

}  // namespace bdforge
