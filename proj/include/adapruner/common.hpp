#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace adapruner {

// Invalid configuration, bad arguments, malformed input files. The CLI maps
// this to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failures while running a well-formed pipeline (divergence, I/O, mismatched
// artifacts). The CLI maps this to exit code 1.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a, used to fingerprint artifacts and spaces.
class Fingerprint {
 public:
  Fingerprint& add_bytes(const void* data, std::size_t size);
  Fingerprint& add(std::string_view text);
  Fingerprint& add(std::int64_t value);
  Fingerprint& add(double value);
  Fingerprint& add(std::span<const double> values);
  Fingerprint& add(std::span<const int> values);

  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Seeded generator with explicitly defined float conversions so that streams
// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[below(i)]);
    }
  }

 private:
  std::uint64_t s_[4];
};

// Derives an independent stream seed from a base seed and a stream index.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

// Round-trippable decimal rendering of a double ("%.17g", "inf", "nan").
std::string format_double(double value);
double parse_double(std::string_view text);

}  // namespace adapruner
