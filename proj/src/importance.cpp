#include "adapruner/importance.hpp"

#include "adapruner/common.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace adapruner {

const char* aggregation_name(Aggregation agg) {
  switch (agg) {
    case Aggregation::sum: return "sum";
    case Aggregation::prod: return "prod";
    case Aggregation::max: return "max";
    case Aggregation::last: return "last";
  }
  return "?";
}

Aggregation parse_aggregation(std::string_view name) {
  for (Aggregation a : kAggregations) {
    if (name == aggregation_name(a)) return a;
  }
  throw ConfigError("unknown aggregation '" + std::string(name) + "' (sum|prod|max|last)");
}

const char* composition_name(Composition c) {
  return c == Composition::granularity ? "granularity" : "order";
}

Composition parse_composition(std::string_view name) {
  if (name == "granularity") return Composition::granularity;
  if (name == "order") return Composition::order;
  throw ConfigError("unknown composition '" + std::string(name) + "' (granularity|order)");
}

void MetricConfig::validate() const {
  if (!(alpha1 >= 0.0 && alpha1 <= 1.0) || !(alpha2 >= 0.0 && alpha2 <= 1.0)) {
    throw ConfigError("alpha1 and alpha2 must lie in [0, 1]");
  }
  if (!(align1 > 0.0) || !(align2 > 0.0) || !std::isfinite(align1) || !std::isfinite(align2)) {
    throw ConfigError("align1 and align2 must be positive and finite");
  }
}

std::string format_metric(const MetricConfig& m) {
  std::ostringstream out;
  out << "alpha1=" << format_double(m.alpha1) << " alpha2=" << format_double(m.alpha2)
      << " align1=" << format_double(m.align1) << " align2=" << format_double(m.align2)
      << " agg=" << aggregation_name(m.agg) << " hessian=" << (m.hessian ? 1 : 0)
      << " composition=" << composition_name(m.composition);
  return out.str();
}

namespace {

void require_per_sample(const GradientStore& grads, bool hessian) {
  if (hessian && grads.per_sample.empty()) {
    throw ConfigError("Fisher term requested but per-sample gradients were not computed");
  }
}

}  // namespace

std::vector<double> vector_importance(const TransformerLM& model, const GradientStore& grads,
                                      const StructureGroup& group, bool hessian,
                                      double first_scale, double second_scale) {
  require_per_sample(grads, hessian);
  std::vector<double> out;
  out.reserve(group.slices.size());
  const auto& layer = model.params.layers.at(group.layer);
  for (const auto& s : group.slices) {
    const auto theta = slice_block(layer.weight(s.projection), s);
    const auto grad = slice_block(grads.batch.layers[group.layer].weight(s.projection), s);
    const double first = (grad.array() * theta.array()).sum();
    double fisher = 0.0;
    if (hessian) {
      for (const auto& sample : grads.per_sample) {
        const auto g = slice_block(sample.layers[group.layer].weight(s.projection), s);
        const double dot = (g.array() * theta.array()).sum();
        fisher += dot * dot;
      }
    }
    out.push_back(std::abs(first_scale * first - 0.5 * second_scale * fisher));
  }
  return out;
}

std::vector<double> element_importance(const TransformerLM& model, const GradientStore& grads,
                                       const StructureGroup& group, bool hessian,
                                       double first_scale, double second_scale) {
  require_per_sample(grads, hessian);
  std::vector<double> out;
  out.reserve(group.slices.size());
  const auto& layer = model.params.layers.at(group.layer);
  for (const auto& s : group.slices) {
    const auto theta = slice_block(layer.weight(s.projection), s);
    const auto grad = slice_block(grads.batch.layers[group.layer].weight(s.projection), s);
    Matrix fisher = Matrix::Zero(theta.rows(), theta.cols());
    if (hessian) {
      for (const auto& sample : grads.per_sample) {
        const auto g = slice_block(sample.layers[group.layer].weight(s.projection), s);
        fisher.array() += (g.array() * theta.array()).square();
      }
    }
    const double total =
        (first_scale * (grad.array() * theta.array()) - 0.5 * second_scale * fisher.array())
            .abs()
            .sum();
    out.push_back(total);
  }
  return out;
}

double aggregate(std::span<const double> values, Aggregation agg) {
  if (values.empty()) throw ConfigError("cannot aggregate an empty list");
  switch (agg) {
    case Aggregation::sum: {
      double total = 0.0;
      for (double v : values) total += v;
      return total;
    }
    case Aggregation::prod: {
      double total = 1.0;
      for (double v : values) total *= v;
      return total;
    }
    case Aggregation::max: return *std::max_element(values.begin(), values.end());
    case Aggregation::last: return values.back();
  }
  throw std::logic_error("bad aggregation");
}

std::string ImportanceReport::fingerprint() const {
  Fingerprint fp;
  fp.add(format_metric(metric)).add(calib_fingerprint).add(std::span<const double>(per_group));
  return fp.hex();
}

ImportanceReport combined_importance(const TransformerLM& model, const GradientStore& grads,
                                     std::span<const StructureGroup> groups,
                                     const MetricConfig& metric, std::string calib_fingerprint) {
  metric.validate();
  ImportanceReport report{std::vector<double>(groups.size(), 0.0), metric,
                          std::move(calib_fingerprint)};
  const bool by_order = metric.composition == Composition::order;
  const double first = by_order ? metric.align1 : 1.0;
  const double second = by_order ? metric.align2 : 1.0;
  const double vec_weight = metric.alpha1 * (by_order ? 1.0 : metric.align1);
  const double elem_weight = metric.alpha2 * (by_order ? 1.0 : metric.align2);

  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = groups[i];
    if (g.id != static_cast<int>(i)) throw ConfigError("group ids must be dense and ordered");
    std::vector<double> scores(g.slices.size(), 0.0);
    if (vec_weight != 0.0) {
      const auto v = vector_importance(model, grads, g, metric.hessian, first, second);
      for (std::size_t m = 0; m < scores.size(); ++m) scores[m] += vec_weight * v[m];
    }
    if (elem_weight != 0.0) {
      const auto e = element_importance(model, grads, g, metric.hessian, first, second);
      for (std::size_t m = 0; m < scores.size(); ++m) scores[m] += elem_weight * e[m];
    }
    report.per_group[i] = aggregate(scores, metric.agg);
  }
  return report;
}

void write_report(std::ostream& out, const ImportanceReport& report) {
  out << "# importance " << format_metric(report.metric) << " calib="
      << (report.calib_fingerprint.empty() ? "-" : report.calib_fingerprint) << '\n';
  out << "group_id score\n";
  for (std::size_t i = 0; i < report.per_group.size(); ++i) {
    out << i << ' ' << format_double(report.per_group[i]) << '\n';
  }
}

namespace {

std::map<std::string, std::string> parse_fields(std::istringstream& in) {
  std::map<std::string, std::string> fields;
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed field '" + token + "'");
    fields[token.substr(0, eq)] = token.substr(eq + 1);
  }
  return fields;
}

}  // namespace

ImportanceReport read_report(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# importance ", 0) != 0) {
    throw ConfigError("importance report must start with '# importance'");
  }
  std::istringstream header(line.substr(13));
  auto f = parse_fields(header);
  auto get = [&](const std::string& key) {
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("importance header missing '" + key + "'");
    return it->second;
  };
  ImportanceReport report;
  report.metric.alpha1 = parse_double(get("alpha1"));
  report.metric.alpha2 = parse_double(get("alpha2"));
  report.metric.align1 = parse_double(get("align1"));
  report.metric.align2 = parse_double(get("align2"));
  report.metric.agg = parse_aggregation(get("agg"));
  report.metric.hessian = get("hessian") == "1";
  report.metric.composition = parse_composition(get("composition"));
  report.calib_fingerprint = get("calib") == "-" ? "" : get("calib");
  if (!std::getline(in, line) || line != "group_id score") {
    throw ConfigError("importance report missing column header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::size_t id;
    std::string score;
    if (!(row >> id >> score) || id != report.per_group.size()) {
      throw ConfigError("malformed importance row: " + line);
    }
    report.per_group.push_back(parse_double(score));
  }
  return report;
}

}  // namespace adapruner
