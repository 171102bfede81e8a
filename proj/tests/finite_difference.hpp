#pragma once

#include "adapruner/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace testsupport {

struct GradientCheck {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  std::string worst_name;
};

// Compares analytic against central differences of `objective` for every
// element of the listed buffers. The relative error uses
// max(|analytic|, |numeric|, floor) as its denominator.
inline GradientCheck check_gradients(std::vector<std::span<double>> params,
                                     std::vector<std::span<const double>> analytic,
                                     std::vector<std::string> names,
                                     const std::function<double()>& objective, double h,
                                     double tolerance, double floor) {
  GradientCheck out;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      double& theta = params[b][i];
      const double saved = theta;
      theta = saved + h;
      const double up = objective();
      theta = saved - h;
      const double down = objective();
      theta = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[b][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (err < tolerance) ++out.passed;
      if (err > out.worst) {
        out.worst = err;
        out.worst_name = names[b] + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

// Every base parameter of the model against the mean batch loss.
inline GradientCheck check_model_gradients(adapruner::TransformerLM& model,
                                           std::span<const adapruner::Sequence> batch, double h,
                                           double tolerance, double floor) {
  adapruner::GradientStore grads = adapruner::gradients(model, batch, false);
  std::vector<std::span<double>> params;
  std::vector<std::span<const double>> analytic;
  std::vector<std::string> names;
  auto grad_tensors = grads.batch.tensors();
  auto tensors = model.params.tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    params.push_back(tensors[i].values());
    analytic.push_back(grad_tensors[i].values());
    names.push_back(tensors[i].name);
  }
  return check_gradients(params, analytic, names, [&] { return adapruner::loss(model, batch); }, h,
                         tolerance, floor);
}

}  // namespace testsupport
