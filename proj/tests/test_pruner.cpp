#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "adapruner/checkpoint.hpp"
#include "adapruner/common.hpp"
#include "adapruner/groups.hpp"
#include "adapruner/importance.hpp"
#include "adapruner/pruner.hpp"

#include "reference_model.hpp"
#include "support.hpp"

#include <algorithm>
#include <set>
#include <sstream>

using namespace adapruner;
using namespace testsupport;

namespace {

ModelConfig small_config(std::uint64_t seed = 0) {
  return {.vocab_size = 32, .d_model = 16, .n_layers = 3, .n_heads = 4, .d_ff = 32,
          .max_seq_len = 12, .prune_begin = 1, .prune_end = 3, .seed = seed};
}

ImportanceReport scores_from(std::vector<double> v) {
  ImportanceReport r;
  r.per_group = std::move(v);
  return r;
}

ImportanceReport random_scores(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return scores_from(v);
}

PruningPlan plan_for(const TransformerLM& model, std::vector<int> ids) {
  PruningPlan plan;
  plan.removed_group_ids = std::move(ids);
  plan.group_count = build_groups(model).size();
  plan.model_fingerprint = model_fingerprint(model);
  return plan;
}

}  // namespace

TEST_CASE("lambda zero removes nothing and keeps logits") {
  const TransformerLM model = init_model(small_config());
  Rng rng(1);
  const auto report = random_scores(build_groups(model).size(), rng);
  const PruningPlan plan = make_plan(report, model, 0.0);
  CHECK(plan.removed_group_ids.empty());
  CHECK(plan.achieved_ratio == 0.0);
  const TransformerLM same = apply_plan(model, plan);
  CHECK(count_params(same) == count_params(model));
  const Sequence seq{1, 2, 3, 4};
  CHECK((forward_logits(same, seq) - forward_logits(model, seq)).cwiseAbs().maxCoeff() == 0.0);
  const PruningStats stats = pruning_stats(model, same);
  CHECK(stats.reduction == 0.0);
}

TEST_CASE("plan is a greedy prefix with id tie-break") {
  const TransformerLM model = init_model(small_config());
  const auto groups = build_groups(model);
  std::vector<double> v(groups.size(), 1.0);
  v[10] = 0.5;
  v[7] = 0.5;
  const PruningPlan plan = make_plan(scores_from(v), model, 0.2);
  REQUIRE(plan.removed_group_ids.size() >= 3);
  CHECK(plan.removed_group_ids[0] == 7);
  CHECK(plan.removed_group_ids[1] == 10);
  CHECK(plan.removed_group_ids[2] == 0);

  std::int64_t removed = 0;
  for (int id : plan.removed_group_ids) removed += groups[id].size;
  CHECK(removed == plan.removed_params);
  CHECK(plan.achieved_ratio == static_cast<double>(removed) / static_cast<double>(count_params(model)));
  CHECK(plan.achieved_ratio <= 0.2);
}

TEST_CASE("plan accounting and nesting over random scores") {
  const TransformerLM model = init_model(small_config());
  const auto groups = build_groups(model);
  std::int64_t largest = 0;
  for (const auto& g : groups) largest = std::max(largest, g.size);
  const double total = static_cast<double>(count_params(model));
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const auto report = random_scores(groups.size(), rng);
    std::vector<int> previous;
    for (double lambda : {0.05, 0.1, 0.2, 0.3}) {
      const PruningPlan plan = make_plan(report, model, lambda);
      CHECK(plan.achieved_ratio <= lambda);
      CHECK(plan.achieved_ratio > lambda - largest / total);
      CHECK(std::equal(previous.begin(), previous.end(), plan.removed_group_ids.begin()));
      previous = plan.removed_group_ids;
      const TransformerLM pruned = apply_plan(model, plan);
      CHECK(count_params(model) - count_params(pruned) == plan.removed_params);
      CHECK(pruning_stats(model, pruned).reduction == plan.achieved_ratio);
    }
  }
}

TEST_CASE("exhausted plans carry the flag") {
  const TransformerLM model = init_model(small_config());
  Rng rng(2);
  const auto report = random_scores(build_groups(model).size(), rng);
  const PruningPlan plan = make_plan(report, model, 0.95);
  CHECK(plan.exhausted);
  CHECK(plan.removed_group_ids.size() == build_groups(model).size());
  CHECK_THROWS_AS(make_plan(report, model, 1.0), ConfigError);
  CHECK_THROWS_AS(make_plan(report, model, -0.1), ConfigError);
  CHECK_THROWS_AS(make_plan(scores_from({1.0, 2.0}), model, 0.1), ConfigError);
}

TEST_CASE("pruning equals masking") {
  Rng rng(17);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const TransformerLM model = init_model(small_config(seed));
    const auto groups = build_groups(model);
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<int> ids;
      std::vector<StructureGroup> chosen;
      for (const auto& g : groups) {
        if (rng.uniform() < 0.3) {
          ids.push_back(g.id);
          chosen.push_back(g);
        }
      }
      const TransformerLM pruned = apply_plan(model, plan_for(model, ids));
      const TransformerLM masked = zero_groups(model, chosen);
      for (const auto& seq : uniform_batch(rng, 32, 4, 12)) {
        CHECK(max_relative_difference(forward_logits(pruned, seq), forward_logits(masked, seq)) < 1e-9);
      }
    }
  }
}

TEST_CASE("removing every channel of a layer leaves only the residual path") {
  const TransformerLM model = init_model(small_config(4));
  std::vector<int> ids;
  for (const auto& g : build_groups(model)) {
    if (g.layer == 2 && g.kind == GroupKind::mlp_channel) ids.push_back(g.id);
  }
  const TransformerLM pruned = apply_plan(model, plan_for(model, ids));
  CHECK(pruned.ff(2) == 0);
  CHECK(pruned.ff(1) == 32);
  ReferenceOptions skip;
  skip.skip_mlp = {false, false, true};
  const Sequence seq{3, 1, 4, 1, 5, 9, 2, 6};
  CHECK(max_relative_difference(forward_logits(pruned, seq), to_matrix(reference_logits(model, seq, skip))) < 1e-12);
}

TEST_CASE("removing every head of a layer is allowed") {
  const TransformerLM model = init_model(small_config(4));
  std::vector<int> ids;
  for (const auto& g : build_groups(model)) {
    if (g.layer == 1 && g.kind == GroupKind::attention_head) ids.push_back(g.id);
  }
  const TransformerLM pruned = apply_plan(model, plan_for(model, ids));
  CHECK(pruned.heads(1) == 0);
  ReferenceOptions mask;
  mask.head_mask = {{true, true, true, true}, {false, false, false, false}, {true, true, true, true}};
  const Sequence seq{3, 1, 4, 1, 5};
  CHECK(max_relative_difference(forward_logits(pruned, seq), to_matrix(reference_logits(model, seq, mask))) < 1e-12);

  TempDir dir("pruned");
  save_model(pruned, dir.path() / "p.ckpt");
  const TransformerLM back = load_model(dir.path() / "p.ckpt");
  CHECK(back.heads(1) == 0);
  CHECK(serialize_model(back) == serialize_model(pruned));
  // Groups of the pruned model only describe what is left.
  CHECK(build_groups(back).size() == build_groups(model).size() - 4);
}

TEST_CASE("mismatched plans are refused") {
  const TransformerLM model = init_model(small_config(1));
  const TransformerLM other = init_model(small_config(2));
  CHECK_THROWS_AS(apply_plan(other, plan_for(model, {1})), ConfigError);
  PruningPlan dup = plan_for(model, {1, 1});
  CHECK_THROWS_AS(apply_plan(model, dup), ConfigError);
  PruningPlan out_of_range = plan_for(model, {1000});
  CHECK_THROWS_AS(apply_plan(model, out_of_range), ConfigError);
}

TEST_CASE("MAC estimate") {
  // Output head and MLP dominate, both linear in d_model.
  ModelConfig big{.vocab_size = 50000, .d_model = 64, .n_layers = 2, .n_heads = 1, .d_ff = 8192,
                  .max_seq_len = 4, .prune_begin = 0, .prune_end = 2};
  const std::int64_t full = macs_per_token(init_model(big), 4);
  big.d_model = 32;
  const std::int64_t half = macs_per_token(init_model(big), 4);
  CHECK(static_cast<double>(half) / static_cast<double>(full) == doctest::Approx(0.5).epsilon(0.02));
  // Closed form for one small case: layers * (4 d^2 + 2 d ctx + 2 d ff) + d V.
  const ModelConfig c = small_config();
  CHECK(macs_per_token(init_model(c), 12) == 3 * (4 * 16 * 16 + 2 * 16 * 12 + 2 * 16 * 32) + 16 * 32);
}

TEST_CASE("plan and stats files") {
  const TransformerLM model = init_model(small_config());
  Rng rng(8);
  const auto report = random_scores(build_groups(model).size(), rng);
  PruningPlan plan = make_plan(report, model, 0.2);
  plan.model_fingerprint = model_fingerprint(model);
  std::stringstream ss;
  write_plan(ss, plan);
  const PruningPlan back = read_plan(ss);
  CHECK(back.removed_group_ids == plan.removed_group_ids);
  CHECK(back.achieved_ratio == plan.achieved_ratio);
  CHECK(back.target_ratio == plan.target_ratio);
  CHECK(back.model_fingerprint == plan.model_fingerprint);
  CHECK(back.group_count == plan.group_count);
  CHECK(apply_plan(model, back).config == apply_plan(model, plan).config);

  std::ostringstream stats;
  write_stats(stats, pruning_stats(model, apply_plan(model, plan)));
  CHECK(stats.str().find("reduction=") != std::string::npos);
}
