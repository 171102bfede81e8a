#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "adapruner/common.hpp"
#include "adapruner/groups.hpp"
#include "adapruner/model.hpp"

#include "reference_model.hpp"
#include "support.hpp"

#include <set>
#include <sstream>
#include <tuple>

using namespace adapruner;
using namespace testsupport;

namespace {

ModelConfig four_head_config() {
  return {.vocab_size = 32, .d_model = 16, .n_layers = 3, .n_heads = 4, .d_ff = 64,
          .max_seq_len = 12, .prune_begin = 1, .prune_end = 3, .seed = 21};
}

std::int64_t nonzeros(const TransformerLM& m) {
  std::int64_t n = 0;
  for (auto& t : const_cast<TransformerLM&>(m).params.tensors()) {
    for (double v : t.values()) n += v != 0.0;
  }
  return n;
}

}  // namespace

TEST_CASE("group count and order") {
  const TransformerLM model = init_model(four_head_config());
  const auto groups = build_groups(model);
  CHECK(groups.size() == 2 * 4 + 2 * 64);
  for (std::size_t i = 0; i < groups.size(); ++i) CHECK(groups[i].id == static_cast<int>(i));
  CHECK(groups[0].kind == GroupKind::attention_head);
  CHECK(groups[0].layer == 1);
  CHECK(groups[4].kind == GroupKind::mlp_channel);
  CHECK(groups[0].size == 4 * 16 * 4);
  CHECK(groups[4].size == 2 * 16);
  CHECK(build_groups(model) == groups);

  ModelConfig none = four_head_config();
  none.prune_begin = none.prune_end = 2;
  CHECK(build_groups(init_model(none)).empty());
}

TEST_CASE("groups are disjoint and cover every prunable coordinate") {
  const TransformerLM model = init_model(four_head_config());
  std::set<std::tuple<int, int, Eigen::Index, Eigen::Index>> seen;
  std::int64_t total = 0;
  for (const auto& g : build_groups(model)) {
    std::int64_t covered = 0;
    for (const auto& s : g.slices) {
      const Matrix& w = model.params.layers[g.layer].weight(s.projection);
      const auto block = slice_block(w, s);
      const Eigen::Index r0 = s.axis == SliceAxis::row ? s.begin : 0;
      const Eigen::Index c0 = s.axis == SliceAxis::column ? s.begin : 0;
      for (Eigen::Index r = 0; r < block.rows(); ++r) {
        for (Eigen::Index c = 0; c < block.cols(); ++c) {
          CHECK(seen.emplace(g.layer, static_cast<int>(s.projection), r0 + r, c0 + c).second);
          ++covered;
        }
      }
    }
    CHECK(covered == g.size);
    total += g.size;
  }
  CHECK(total == count_params(model, true));
  CHECK(static_cast<std::int64_t>(seen.size()) == total);
}

TEST_CASE("zeroing a head equals masking it in the reference forward") {
  const TransformerLM model = init_model(four_head_config());
  const auto groups = build_groups(model);
  Rng rng(3);
  const auto inputs = uniform_batch(rng, 32, 4, 10);
  for (const auto& g : groups) {
    if (g.kind != GroupKind::attention_head) continue;
    ReferenceOptions mask;
    mask.head_mask.assign(3, std::vector<bool>(4, true));
    mask.head_mask[g.layer][g.unit] = false;
    const TransformerLM zeroed = zero_group(model, g);
    for (const auto& seq : inputs) {
      CHECK(max_relative_difference(forward_logits(zeroed, seq), to_matrix(reference_logits(model, seq, mask))) <
            1e-12);
    }
  }
}

TEST_CASE("zero_group bookkeeping") {
  const TransformerLM model = init_model(four_head_config());
  const auto groups = build_groups(model);
  const std::int64_t before = nonzeros(model);
  for (const auto& g : {groups[1], groups[40]}) {
    const TransformerLM z = zero_group(model, g);
    CHECK(nonzeros(z) == before - g.size);
  }
  CHECK(nonzeros(model) == before);
}

TEST_CASE("zeroing a channel leaves attention untouched") {
  const TransformerLM model = init_model(four_head_config());
  const auto groups = build_groups(model);
  const TransformerLM z = zero_group(model, groups[10]);
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    for (Projection p : {Projection::query, Projection::key, Projection::value, Projection::output}) {
      CHECK(z.params.layers[l].weight(p) == model.params.layers[l].weight(p));
    }
  }
  // Layer 1's attention output is computed before its MLP, so logits of a
  // model with layer 1's MLP skipped are unaffected by which channel is zero.
  ReferenceOptions skip;
  skip.skip_mlp = {false, true, false};
  const Sequence seq{1, 5, 9, 2, 7};
  CHECK(max_relative_difference(to_matrix(reference_logits(z, seq, skip)),
                                to_matrix(reference_logits(model, seq, skip))) == 0.0);
}

TEST_CASE("stale groups are rejected") {
  const TransformerLM model = init_model(four_head_config());
  StructureGroup g = build_groups(model)[0];
  g.layer = 0;
  CHECK_THROWS_AS(zero_group(model, g), ConfigError);
  g = build_groups(model)[5];
  g.unit = 64;
  CHECK_THROWS_AS(check_group(model, g), ConfigError);
}

TEST_CASE("group listing round-trips") {
  const auto groups = build_groups(init_model(four_head_config()));
  std::stringstream ss;
  write_groups(ss, groups);
  const auto records = read_groups(ss);
  REQUIRE(records.size() == groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    CHECK(records[i] == GroupRecord{groups[i].id, groups[i].kind, groups[i].layer, groups[i].size});
  }
  std::istringstream bad("0 attention_head 1\n");
  CHECK_THROWS_AS(read_groups(bad), ConfigError);
}
