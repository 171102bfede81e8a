#include "adapruner/train.hpp"

#include "adapruner/common.hpp"

#include <cmath>
#include <numeric>

namespace adapruner {

Adam::Adam(std::vector<std::span<double>> params, Options options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(const std::vector<std::span<const double>>& grads) {
  if (grads.size() != params_.size()) throw std::logic_error("Adam: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i];
    auto g = grads[i];
    if (g.size() != p.size()) throw std::logic_error("Adam: gradient size mismatch");
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      p[j] -= options_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + options_.eps);
    }
  }
}

std::vector<Sequence> make_windows(std::span<const Sequence> documents, std::span<const int> ids,
                                   int window_len) {
  if (window_len < 2) throw ConfigError("window length must be >= 2");
  std::vector<Sequence> windows;
  for (int id : ids) {
    const Sequence& doc = documents[id];
    for (std::size_t pos = 0; pos < doc.size(); pos += window_len) {
      const std::size_t end = std::min(doc.size(), pos + window_len);
      if (end - pos < 2) break;
      windows.emplace_back(doc.begin() + pos, doc.begin() + end);
    }
  }
  return windows;
}

TrainResult train_model(TransformerLM& model, std::span<const Sequence> windows,
                        const TrainOptions& options) {
  if (windows.empty()) throw ConfigError("no training windows");
  if (options.batch_size < 1 || options.steps < 0) throw ConfigError("invalid training options");
  validate_batch(model.config, windows);

  auto param_refs = model.params.tensors();
  Params grads = zeros_like(model.params);
  auto grad_refs = grads.tensors();
  std::vector<std::span<double>> params;
  std::vector<std::span<const double>> grad_spans;
  for (std::size_t i = 0; i < param_refs.size(); ++i) {
    params.push_back(param_refs[i].values());
    grad_spans.emplace_back(grad_refs[i].values());
  }
  Adam adam(params, {.lr = options.lr});

  Rng rng(options.seed);
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainResult result;
  const std::size_t batch = std::min<std::size_t>(options.batch_size, windows.size());
  for (int step = 0; step < options.steps; ++step) {
    grads.set_zero();
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      total += accumulate_gradients(model, windows[order[cursor++]], 1.0 / static_cast<double>(batch), &grads);
    }
    const double step_loss = total / static_cast<double>(batch);
    if (!std::isfinite(step_loss)) {
      throw RuntimeError("training loss became non-finite at step " + std::to_string(step));
    }
    result.step_losses.push_back(step_loss);
    adam.step(grad_spans);
  }
  return result;
}

}  // namespace adapruner
