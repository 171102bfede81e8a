#pragma once

#include "adapruner/common.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

// Tree-structured Parzen estimator over mixed spaces: bounded reals,
// categoricals, and fixed-size subsets of a candidate pool.
namespace adapruner::tpe {

struct Continuous {
  std::string name;
  double lo = 0.0;
  double hi = 1.0;
};

struct Categorical {
  std::string name;
  int choices = 1;
};

// k distinct members of {0, ..., pool_size - 1}; values are kept sorted.
struct Subset {
  std::string name;
  int pool_size = 1;
  int k = 1;
};

using Dimension = std::variant<Continuous, Categorical, Subset>;
using Value = std::variant<double, int, std::vector<int>>;
using Point = std::vector<Value>;

struct Space {
  std::vector<Dimension> dims;

  void validate() const;
  bool contains(const Point& point) const;
  // Canonical text form; its fingerprint identifies the space in histories.
  std::string describe() const;
};

struct Observation {
  Point point;
  double objective = 0.0;  // +inf marks a failed trial
};

// Kernel width for continuous dimensions. neighbor: each kernel spans the
// larger gap to its sorted neighbours (range ends included); scott: one
// shared width, std * n^(-1/5). Both are floored at min_bandwidth * range.
enum class Bandwidth { neighbor, scott };
const char* bandwidth_name(Bandwidth b);
Bandwidth parse_bandwidth(std::string_view name);

struct Settings {
  double gamma = 0.25;
  int n_startup = 10;
  int n_candidates = 24;
  double min_bandwidth = 0.05;  // fraction of a continuous range
  Bandwidth bandwidth = Bandwidth::neighbor;

  void validate() const;
};

struct Split {
  std::vector<std::size_t> good;
  std::vector<std::size_t> bad;
  double threshold = 0.0;  // H*: the ceil(gamma * n)-th smallest objective
  bool promoted = false;   // good was empty and the best trial was moved there
};

// Partition at H*: H < H* is good, the rest bad. Ties on the best objective
// are resolved by promoting the earliest best trial.
Split split_history(std::span<const Observation> history, double gamma);

// Parzen density over the whole space, fit to a subset of observations.
class ParzenDensity {
 public:
  static ParzenDensity fit(const Space& space, std::span<const Observation> history,
                           std::span<const std::size_t> members, double min_bandwidth,
                           Bandwidth rule = Bandwidth::neighbor);

  double log_density(const Point& point) const;
  Point sample(Rng& rng) const;

  // One dimension's marginal.
  double log_density(std::size_t dim, const Value& value) const;
  Value sample(std::size_t dim, Rng& rng) const;

  // Kernel widths of a continuous dimension, one per center.
  std::span<const double> bandwidths(std::size_t dim) const { return dims_.at(dim).widths; }

 private:
  struct DimModel {
    Dimension dim;
    std::vector<double> centers;  // continuous kernels
    std::vector<double> widths;
    std::vector<double> probs;    // categorical choices or subset ids
  };
  std::vector<DimModel> dims_;
};

// (gamma + (1 - gamma) * bad / good)^-1, the quantity EI is proportional to.
double ei_score(double good_density, double bad_density, double gamma);
double ei_score_log(double log_good, double log_bad, double gamma);

Point sample_uniform(const Space& space, Rng& rng);

// Uniform draw during warm-up. Otherwise each dimension takes the best of
// n_candidates draws from its good marginal, ranked by the good/bad ratio;
// with factorized densities this maximizes ei_score over every combination.
Point suggest(const Space& space, std::span<const Observation> history, const Settings& settings,
              Rng& rng);

enum class Strategy { tpe, random };
const char* strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

using Objective = std::function<double(const Point& point, std::size_t trial_index)>;
using CommitHook = std::function<void(const Observation& obs, std::size_t trial_index)>;

struct RunOptions {
  Strategy strategy = Strategy::tpe;
  Settings settings;
  std::uint64_t seed = 0;
  std::size_t budget = 1;
  // Trials evaluated concurrently; suggestions inside one batch share the
  // committed history, and results are committed in trial-index order.
  std::size_t width = 1;
};

// Continues from `history` (resume) until it holds `budget` observations.
// Suggestion i draws from an Rng seeded by mix_seed(seed, i), so a resumed
// run reproduces an uninterrupted one. Objectives that throw RuntimeError or
// return a non-finite value are recorded as +inf.
std::vector<Observation> optimize(const Space& space, const Objective& objective,
                                  const RunOptions& options,
                                  std::vector<Observation> history = {},
                                  const CommitHook& on_commit = {});

std::vector<double> best_so_far(std::span<const Observation> history);

}  // namespace adapruner::tpe
