#include "adapruner/pruner.hpp"

#include "adapruner/checkpoint.hpp"
#include "adapruner/common.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace adapruner {

PruningPlan make_plan(const ImportanceReport& report, const TransformerLM& model, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("pruning ratio must lie in [0, 1), got " + format_double(ratio));
  }
  const auto groups = build_groups(model);
  if (report.per_group.size() != groups.size()) {
    throw ConfigError("importance report covers " + std::to_string(report.per_group.size()) +
                      " groups but the model has " + std::to_string(groups.size()));
  }
  for (double s : report.per_group) {
    if (std::isnan(s)) throw RuntimeError("importance report contains NaN scores");
  }

  PruningPlan plan;
  plan.target_ratio = ratio;
  plan.total_params = count_params(model);
  plan.metric_fingerprint = report.fingerprint();
  plan.model_fingerprint = model_fingerprint(model);
  plan.group_count = groups.size();

  std::vector<int> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (report.per_group[a] != report.per_group[b]) return report.per_group[a] < report.per_group[b];
    return a < b;
  });

  const double total = static_cast<double>(plan.total_params);
  for (int id : order) {
    const std::int64_t next = plan.removed_params + groups[id].size;
    if (static_cast<double>(next) / total > ratio) break;
    plan.removed_params = next;
    plan.removed_group_ids.push_back(id);
  }
  plan.achieved_ratio = static_cast<double>(plan.removed_params) / total;
  plan.exhausted = plan.removed_group_ids.size() == groups.size() && plan.achieved_ratio < ratio;
  return plan;
}

namespace {

Matrix keep_columns(const Matrix& m, const std::vector<int>& cols) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(j) = m.col(cols[j]);
  return out;
}

Matrix keep_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = m.row(rows[i]);
  return out;
}

}  // namespace

TransformerLM apply_plan(const TransformerLM& model, const PruningPlan& plan) {
  const auto groups = build_groups(model);
  if (plan.group_count != groups.size() ||
      (!plan.model_fingerprint.empty() && plan.model_fingerprint != model_fingerprint(model))) {
    throw ConfigError("pruning plan was built for a different model");
  }
  const int n_layers = model.config.n_layers;
  std::vector<std::set<int>> drop_heads(n_layers), drop_channels(n_layers);
  for (int id : plan.removed_group_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= groups.size()) {
      throw ConfigError("pruning plan references unknown group " + std::to_string(id));
    }
    const auto& g = groups[id];
    auto& bucket = g.kind == GroupKind::attention_head ? drop_heads[g.layer] : drop_channels[g.layer];
    if (!bucket.insert(g.unit).second) {
      throw ConfigError("pruning plan lists group " + std::to_string(id) + " twice");
    }
  }

  TransformerLM out = model;
  const int hd = model.config.head_dim();
  for (int l = 0; l < n_layers; ++l) {
    if (drop_heads[l].empty() && drop_channels[l].empty()) continue;
    auto& layer = out.params.layers[l];
    std::vector<int> head_dims;
    for (int h = 0; h < model.heads(l); ++h) {
      if (drop_heads[l].count(h)) continue;
      for (int i = 0; i < hd; ++i) head_dims.push_back(h * hd + i);
    }
    std::vector<int> channels;
    for (int ch = 0; ch < model.ff(l); ++ch) {
      if (!drop_channels[l].count(ch)) channels.push_back(ch);
    }
    layer.w_q = keep_columns(layer.w_q, head_dims);
    layer.w_k = keep_columns(layer.w_k, head_dims);
    layer.w_v = keep_columns(layer.w_v, head_dims);
    layer.w_o = keep_rows(layer.w_o, head_dims);
    layer.w_up = keep_columns(layer.w_up, channels);
    layer.w_down = keep_rows(layer.w_down, channels);
  }
  return out;
}

std::int64_t macs_per_token(const TransformerLM& model, int context_len) {
  const std::int64_t d = model.config.d_model;
  const std::int64_t hd = model.config.head_dim();
  std::int64_t macs = 0;
  for (int l = 0; l < model.config.n_layers; ++l) {
    const std::int64_t width = static_cast<std::int64_t>(model.heads(l)) * hd;
    macs += 3 * d * width + width * d;      // Q, K, V, O projections
    macs += 2 * width * context_len;        // scores and weighted values
    macs += 2 * d * model.ff(l);            // up and down
  }
  macs += d * model.config.vocab_size;      // tied output head
  return macs;
}

PruningStats pruning_stats(const TransformerLM& before, const TransformerLM& after) {
  PruningStats s;
  s.params_before = count_params(before);
  s.params_after = count_params(after);
  s.reduction = s.params_before == 0
                    ? 0.0
                    : static_cast<double>(s.params_before - s.params_after) /
                          static_cast<double>(s.params_before);
  s.context_len = before.config.max_seq_len;
  s.macs_before = macs_per_token(before, s.context_len);
  s.macs_after = macs_per_token(after, s.context_len);
  return s;
}

void write_plan(std::ostream& out, const PruningPlan& plan) {
  out << "# plan target_ratio=" << format_double(plan.target_ratio)
      << " achieved_ratio=" << format_double(plan.achieved_ratio)
      << " removed_params=" << plan.removed_params << " total_params=" << plan.total_params
      << " groups=" << plan.group_count << " exhausted=" << (plan.exhausted ? 1 : 0)
      << " metric=" << plan.metric_fingerprint << " model=" << plan.model_fingerprint << '\n';
  for (int id : plan.removed_group_ids) out << id << '\n';
}

PruningPlan read_plan(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# plan ", 0) != 0) {
    throw ConfigError("plan file must start with '# plan'");
  }
  std::map<std::string, std::string> f;
  std::istringstream header(line.substr(7));
  std::string token;
  while (header >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed plan header field '" + token + "'");
    f[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto get = [&](const std::string& key) {
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("plan header missing '" + key + "'");
    return it->second;
  };
  PruningPlan plan;
  plan.target_ratio = parse_double(get("target_ratio"));
  plan.achieved_ratio = parse_double(get("achieved_ratio"));
  plan.removed_params = std::stoll(get("removed_params"));
  plan.total_params = std::stoll(get("total_params"));
  plan.group_count = std::stoull(get("groups"));
  plan.exhausted = get("exhausted") == "1";
  plan.metric_fingerprint = get("metric");
  plan.model_fingerprint = get("model");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    plan.removed_group_ids.push_back(std::stoi(line));
  }
  return plan;
}

void write_stats(std::ostream& out, const PruningStats& s) {
  out << "params_before=" << s.params_before << '\n'
      << "params_after=" << s.params_after << '\n'
      << "reduction=" << format_double(s.reduction) << '\n'
      << "reduction_percent=" << format_double(100.0 * s.reduction) << '\n'
      << "context_len=" << s.context_len << '\n'
      << "macs_per_token_before=" << s.macs_before << '\n'
      << "macs_per_token_after=" << s.macs_after << '\n';
}

}  // namespace adapruner
