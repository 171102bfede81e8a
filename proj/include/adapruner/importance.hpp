#pragma once

#include "adapruner/groups.hpp"
#include "adapruner/model.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace adapruner {

enum class Aggregation { sum, prod, max, last };
inline constexpr Aggregation kAggregations[] = {Aggregation::sum, Aggregation::prod,
                                                Aggregation::max, Aggregation::last};
const char* aggregation_name(Aggregation agg);
Aggregation parse_aggregation(std::string_view name);

// How alignment factors enter the mix.
//   granularity: slice score = alpha1*align1*I_vector + alpha2*align2*I_element
//   order:       align1 scales every first-order term and align2 every
//                Fisher term inside the absolute values, then
//                slice score = alpha1*I_vector + alpha2*I_element
enum class Composition { granularity, order };
const char* composition_name(Composition c);
Composition parse_composition(std::string_view name);

struct MetricConfig {
  double alpha1 = 0.5;
  double alpha2 = 0.5;
  double align1 = 1.0;
  double align2 = 1.0;
  Aggregation agg = Aggregation::sum;
  bool hessian = true;  // false drops the Fisher term (plain first-order Taylor)
  Composition composition = Composition::granularity;

  void validate() const;
  bool operator==(const MetricConfig&) const = default;
};

// "alpha1=... alpha2=... align1=... align2=... agg=... hessian=... composition=..."
std::string format_metric(const MetricConfig& metric);

// Per-slice |g.theta - 1/2 sum_j (g_j.theta)^2| over whole slices, with the
// quadratic form approximated by the empirical Fisher of per-sample
// gradients.
std::vector<double> vector_importance(const TransformerLM& model, const GradientStore& grads,
                                      const StructureGroup& group, bool hessian = true,
                                      double first_scale = 1.0, double second_scale = 1.0);

// Per-slice sum over elements k of |g_k theta_k - 1/2 sum_j (g_{k,j} theta_k)^2|.
std::vector<double> element_importance(const TransformerLM& model, const GradientStore& grads,
                                       const StructureGroup& group, bool hessian = true,
                                       double first_scale = 1.0, double second_scale = 1.0);

// Throws ConfigError on an empty list.
double aggregate(std::span<const double> values, Aggregation agg);

struct ImportanceReport {
  std::vector<double> per_group;  // indexed by group id
  MetricConfig metric;
  std::string calib_fingerprint;

  std::string fingerprint() const;
};

ImportanceReport combined_importance(const TransformerLM& model, const GradientStore& grads,
                                     std::span<const StructureGroup> groups,
                                     const MetricConfig& metric,
                                     std::string calib_fingerprint = "");

// Header line echoing the metric, then "group_id score" rows.
void write_report(std::ostream& out, const ImportanceReport& report);
ImportanceReport read_report(std::istream& in);

}  // namespace adapruner
