#pragma once

// Fixtures and independent oracles shared by the unit tests and the
// acceptance runner. Nothing here calls into the code under test for the
// quantity it checks.

#include "adapruner/common.hpp"
#include "adapruner/model.hpp"
#include "adapruner/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace testsupport {

using adapruner::ModelConfig;
using adapruner::Rng;
using adapruner::Sequence;
using adapruner::TransformerLM;

inline ModelConfig tiny_config(std::uint64_t seed = 0) {
  return {.vocab_size = 32, .d_model = 16, .n_layers = 2, .n_heads = 2, .d_ff = 32,
          .max_seq_len = 16, .prune_begin = 0, .prune_end = 2, .seed = seed};
}

// A noisy second-order recurrence over the vocabulary: 80% of tokens follow
// (5 a + 3 b + 1) mod V from the previous two, the rest are uniform.
inline Sequence synthetic_sequence(Rng& rng, int vocab, int len) {
  Sequence s(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    if (i >= 2 && rng.uniform() < 0.8) {
      s[i] = (5 * s[i - 1] + 3 * s[i - 2] + 1) % vocab;
    } else {
      s[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    }
  }
  return s;
}

inline std::vector<Sequence> synthetic_batch(Rng& rng, int vocab, int count, int len) {
  std::vector<Sequence> out;
  for (int i = 0; i < count; ++i) out.push_back(synthetic_sequence(rng, vocab, len));
  return out;
}

inline std::vector<Sequence> uniform_batch(Rng& rng, int vocab, int count, int len) {
  std::vector<Sequence> out(static_cast<std::size_t>(count), Sequence(static_cast<std::size_t>(len)));
  for (auto& s : out) {
    for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  }
  return out;
}

// Tiny model after a short fit to the synthetic language.
inline TransformerLM trained_tiny_model(std::uint64_t seed, int steps = 300) {
  TransformerLM model = adapruner::init_model(tiny_config(seed));
  Rng rng(adapruner::mix_seed(seed, 0x7a11));
  const auto windows = synthetic_batch(rng, model.config.vocab_size, 256, model.config.max_seq_len);
  adapruner::train_model(model, windows, {.steps = steps, .batch_size = 8, .lr = 1e-2, .seed = seed});
  return model;
}

inline double relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_difference(const adapruner::Matrix& a, const adapruner::Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / std::max(scale, 1e-300);
}

// Average ranks, ties sharing the mean rank.
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Two-sided exact sign test: probability under p = 1/2 of a split at least
// as lopsided as (wins, losses); ties are dropped beforehand.
inline double sign_test_p(int wins, int losses) {
  const int n = wins + losses;
  const int extreme = std::min(wins, losses);
  double tail = 0.0;
  for (int i = 0; i <= extreme; ++i) {
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) -
                     n * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^
            static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() /
            ("adapruner-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007ULL));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
