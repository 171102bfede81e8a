#pragma once

#include "adapruner/data.hpp"
#include "adapruner/lora.hpp"
#include "adapruner/model.hpp"
#include "adapruner/pruner.hpp"
#include "adapruner/run_config.hpp"
#include "adapruner/search.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

// Pipeline stages behind the CLI. Each stage reads and writes artifacts in
// RunConfig::out_dir and logs human-readable progress to `log`.
namespace adapruner::commands {

// Corpus, split, vocabulary and evaluation sets for a run.
struct PreparedData {
  Corpus corpus;
  CorpusSplit split;
  std::optional<Vocabulary> vocab;
  std::vector<Sequence> encoded;  // every document, indexed by document id
  std::vector<EvalSet> evals;
};

// Builds the vocabulary from the training split unless one is supplied.
PreparedData prepare_data(const RunConfig& config, std::optional<Vocabulary> vocab = std::nullopt);

struct Artifacts {
  std::filesystem::path dir;
  std::filesystem::path model() const { return dir / "model.ckpt"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
  std::filesystem::path history() const { return dir / "history.txt"; }
  std::filesystem::path best_trial() const { return dir / "best_trial.txt"; }
  std::filesystem::path convergence() const { return dir / "convergence.csv"; }
  std::filesystem::path pruned() const { return dir / "pruned.ckpt"; }
  std::filesystem::path plan() const { return dir / "plan.txt"; }
  std::filesystem::path stats() const { return dir / "stats.txt"; }
  std::filesystem::path recovered() const { return dir / "recovered.ckpt"; }
  std::filesystem::path adapter() const { return dir / "adapter.lora"; }
};

struct TrainOutcome {
  TransformerLM model;
  std::vector<double> step_losses;
};
TrainOutcome train(const RunConfig& config, std::ostream& log);

struct SearchOutcome {
  SearchHistory history;
  SolutionSpace space;
};
SearchOutcome search(const RunConfig& config, std::ostream& log,
                     const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

struct BestTrial {
  Trial trial;
  std::string model_fingerprint;
  double ratio = 0.0;
};
void write_best_trial(const std::filesystem::path& path, const BestTrial& best);
BestTrial read_best_trial(const std::filesystem::path& path);

struct PruneOutcome {
  TransformerLM pruned;
  PruningPlan plan;
  PruningStats stats;
};
PruneOutcome prune(const RunConfig& config, std::ostream& log,
                   const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                   const std::optional<std::filesystem::path>& trial_path = std::nullopt,
                   std::optional<double> ratio = std::nullopt);

struct RecoverOutcome {
  TransformerLM recovered;
  FinetuneResult finetune;
  double ppl_before = 0.0;  // mean eval perplexity without tuning
  double ppl_after = 0.0;   // mean eval perplexity after tuning and merge
};
RecoverOutcome recover(const RunConfig& config, std::ostream& log,
                       const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

struct EvalOutcome {
  std::vector<std::pair<std::string, double>> per_set;
  double mean = 0.0;
};
// split: "eval" for the held-out sets, "train" for a training-split slice.
EvalOutcome evaluate(const RunConfig& config, std::ostream& log,
                     const std::filesystem::path& checkpoint, const std::string& split = "eval");

// Best-so-far curves of one or more histories side by side as CSV.
void report(std::ostream& out, const std::vector<std::filesystem::path>& histories);

}  // namespace adapruner::commands
