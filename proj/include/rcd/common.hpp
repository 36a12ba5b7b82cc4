#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcd {

using Vec = std::vector<double>;

// Error categories map onto CLI exit codes (usage=1, data=2, divergence=3).
class InvalidArgument : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
  public:
    DivergenceError(const std::string& what, long step)
        : std::runtime_error(what), step_(step) {}
    long step() const { return step_; }

  private:
    long step_;
};

/// Seeded generator. The engine comes from <random>; the transforms are
/// written out so that generated files are identical across standard
/// library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Standard normal (Box-Muller, second value cached).
    double normal();

    /// Index drawn from an unnormalized non-negative weight vector.
    std::size_t categorical(std::span<const double> weights);

  private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

/// Derives an independent seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag_a, std::uint64_t tag_b);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

}  // namespace rcd
