#pragma once

#include "adapruner/groups.hpp"
#include "adapruner/importance.hpp"
#include "adapruner/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace adapruner {

struct PruningPlan {
  double target_ratio = 0.0;
  std::vector<int> removed_group_ids;  // lowest importance first
  double achieved_ratio = 0.0;         // removed params / total params
  std::int64_t removed_params = 0;
  std::int64_t total_params = 0;
  // Set when every group was removed and the target still was not reached.
  bool exhausted = false;
  std::string metric_fingerprint;
  std::string model_fingerprint;
  std::size_t group_count = 0;
};

// Greedy prefix of the ascending (score, id) order that keeps
// achieved_ratio <= ratio. Requires 0 <= ratio < 1.
PruningPlan make_plan(const ImportanceReport& report, const TransformerLM& model, double ratio);

// Structurally removes the planned groups; shapes shrink, nothing is masked.
TransformerLM apply_plan(const TransformerLM& model, const PruningPlan& plan);

// Multiply-accumulates for one token at the given context length: all
// projections, attention score/value products, and the output head.
std::int64_t macs_per_token(const TransformerLM& model, int context_len);

struct PruningStats {
  std::int64_t params_before = 0;
  std::int64_t params_after = 0;
  double reduction = 0.0;  // (before - after) / before
  std::int64_t macs_before = 0;
  std::int64_t macs_after = 0;
  int context_len = 0;
};

PruningStats pruning_stats(const TransformerLM& before, const TransformerLM& after);

void write_plan(std::ostream& out, const PruningPlan& plan);
PruningPlan read_plan(std::istream& in);
void write_stats(std::ostream& out, const PruningStats& stats);

}  // namespace adapruner
