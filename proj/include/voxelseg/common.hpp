#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace voxelseg {

// User-facing misconfiguration: bad shapes, invalid hyperparameters, unknown
// config keys. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File problems: missing, truncated, wrong magic/version. Exit code 2.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken internal contract (architecture bug, missing gradient). Exit code 1.
struct InternalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runtime domain failure (divergence, failed scan). Exit code 1.
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i16 = 3 };

template <typename T> constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::f32; }
template <> constexpr DType dtype_of<double>() { return DType::f64; }
template <> constexpr DType dtype_of<std::uint8_t>() { return DType::u8; }
template <> constexpr DType dtype_of<std::int16_t>() { return DType::i16; }

std::size_t dtype_size(DType t);
const char* dtype_name(DType t);

// Deterministic random stream. mt19937_64 output is fully specified by the
// standard; the scalar draws below avoid std::*_distribution, whose results
// are implementation-defined, so identical seeds give identical streams on
// every platform and standard library.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; the pair is consumed one value at a time.
    double normal();

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n);

    // Derives a decorrelated child seed (splitmix64 finalizer over both words).
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Global worker cap for data-parallel loops; 0 or 1 means sequential.
void set_max_threads(int n);
int max_threads();

// Runs fn(begin, end) over a partition of [0, n). Each index is handled by
// exactly one worker, so results are bit-identical to the sequential order
// whenever iterations write disjoint outputs. Falls back to a single call
// when the workload is below min_per_thread or only one thread is allowed.
void parallel_for(std::size_t n, std::size_t min_per_thread,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace voxelseg
