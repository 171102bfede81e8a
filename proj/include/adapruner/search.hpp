#pragma once

#include "adapruner/data.hpp"
#include "adapruner/importance.hpp"
#include "adapruner/model.hpp"
#include "adapruner/tpe.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace adapruner {

// One (D, I) configuration. objective is NaN until evaluated and +inf for a
// failed evaluation.
struct Trial {
  std::vector<int> calib_ids;  // sorted sample ids
  MetricConfig metric;
  double objective = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;

  bool evaluated() const { return !std::isnan(objective); }
};

// Calibration subspace (k ids out of the filtered pool) times the metric
// subspace. Ablations freeze one side.
struct SolutionSpace {
  std::vector<int> pool;
  int k = 10;
  std::vector<double> align1_choices = {std::exp(5.0), std::exp(6.0), std::exp(7.0)};
  std::vector<double> align2_choices = {std::exp(-2.0), std::exp(-3.0), 1e-4};
  std::vector<Aggregation> agg_choices = {Aggregation::sum, Aggregation::prod, Aggregation::max,
                                          Aggregation::last};
  Composition composition = Composition::granularity;
  std::optional<MetricConfig> fixed_metric;        // metric not searched
  std::optional<std::vector<int>> fixed_calib_ids;  // calibration data not searched

  void validate() const;
  tpe::Space tpe_space() const;
  Trial decode(const tpe::Point& point) const;
  tpe::Point encode(const Trial& trial) const;
  std::string fingerprint() const;
};

// Everything needed to score a trial: the unpruned model, the tokenized
// documents the pool refers to, calibration length, target ratio and D_E.
struct PruningProblem {
  const TransformerLM* base = nullptr;
  std::span<const Sequence> documents;
  int calib_len = 64;
  double ratio = 0.2;
  std::span<const EvalSet> evals;
};

// Gradients on the trial's calibration set, importance under its metric,
// plan at the ratio, structural pruning, then mean perplexity over D_E.
double evaluate_trial(const Trial& trial, const PruningProblem& problem);

// Same pipeline, returning the pruned model instead of its score.
TransformerLM prune_with_trial(const Trial& trial, const PruningProblem& problem);

struct SearchOptions {
  tpe::RunOptions run;
  // Optimize I first with a fixed random D (half the budget), then D with
  // the best I found, instead of searching both jointly.
  bool sequential = false;
  std::string model_fingerprint;
  // When set, records are appended as they commit and an existing file is
  // resumed after its header is checked.
  std::optional<std::filesystem::path> history_path;
};

struct SearchHistory {
  std::vector<Trial> trials;
  std::size_t best_index = 0;

  const Trial& best() const { return trials.at(best_index); }
};

SearchHistory run_search(const PruningProblem& problem, const SolutionSpace& space,
                         const SearchOptions& options);

// A random calibration subset of the pool, for the fixed-D ablation.
std::vector<int> random_calibration(const std::vector<int>& pool, int k, std::uint64_t seed);

// History text format: a "# adapruner-history" header line, then one
// "trial=i calib=a,b,... <metric fields> objective=H seed=S" line per trial.
std::string history_header(const SolutionSpace& space, const SearchOptions& options, double ratio);
std::string format_trial(std::size_t index, const Trial& trial);
Trial parse_trial(const std::string& line, std::size_t* index = nullptr);

struct HistoryFile {
  std::string header;
  std::vector<Trial> trials;
};
HistoryFile read_history(const std::filesystem::path& path);

// "iteration,objective,best_so_far" rows, iterations counted from 1.
void write_convergence_csv(std::ostream& out, std::span<const Trial> trials);

}  // namespace adapruner
