#pragma once

#include "adapruner/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace adapruner {

// Adam over a fixed list of parameter buffers. Buffers must outlive the
// optimizer and keep their sizes.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<std::span<double>> params, Options options);

  // grads[i] must match params[i] in size.
  void step(const std::vector<std::span<const double>>& grads);

 private:
  std::vector<std::span<double>> params_;
  std::vector<std::vector<double>> m_, v_;
  Options options_;
  std::int64_t t_ = 0;
};

// Chunks token streams into non-overlapping windows of window_len tokens;
// trailing chunks shorter than 2 tokens are dropped.
std::vector<Sequence> make_windows(std::span<const Sequence> documents, std::span<const int> ids,
                                   int window_len);

struct TrainOptions {
  int steps = 1000;
  int batch_size = 8;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> step_losses;
};

// Full-parameter Adam training on next-token loss. Batches are drawn by a
// seeded reshuffle of the windows each pass. Throws RuntimeError on a
// non-finite loss.
TrainResult train_model(TransformerLM& model, std::span<const Sequence> windows,
                        const TrainOptions& options);

}  // namespace adapruner
