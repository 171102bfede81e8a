#pragma once

// Scalar-loop forward pass written from the architecture description, used
// as an oracle for the Eigen implementation. Weights are read element by
// element; every intermediate is a plain nested vector.

#include "adapruner/model.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace testsupport {

using Grid = std::vector<std::vector<double>>;

struct ReferenceOptions {
  // mask[l][h] == false removes head h of layer l from the attention output.
  std::vector<std::vector<bool>> head_mask;
  // skip_mlp[l] drops layer l's MLP branch entirely.
  std::vector<bool> skip_mlp;
};

inline std::vector<double> ref_layer_norm(const std::vector<double>& x, const adapruner::Vector& gain,
                                          const adapruner::Vector& bias) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * gain(static_cast<Eigen::Index>(i)) +
           bias(static_cast<Eigen::Index>(i));
  }
  return y;
}

// y = x W for W stored [in x out].
inline std::vector<double> ref_matvec(const std::vector<double>& x, const adapruner::Matrix& w) {
  std::vector<double> y(static_cast<std::size_t>(w.cols()), 0.0);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) y[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(i)] * w(i, j);
  }
  return y;
}

inline double ref_gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }

inline Grid reference_logits(const adapruner::TransformerLM& model, std::span<const int> tokens,
                             const ReferenceOptions& options = {}) {
  const auto& p = model.params;
  const std::size_t T = tokens.size();
  const int d = model.config.d_model;
  const int hd = model.config.head_dim();

  Grid x(T, std::vector<double>(static_cast<std::size_t>(d)));
  for (std::size_t t = 0; t < T; ++t) {
    for (int c = 0; c < d; ++c) x[t][c] = p.tok_emb(tokens[t], c) + p.pos_emb(static_cast<Eigen::Index>(t), c);
  }

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const int heads = static_cast<int>(L.w_q.cols()) / hd;
    Grid q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto a = ref_layer_norm(x[t], L.ln1_gain, L.ln1_bias);
      q[t] = ref_matvec(a, L.w_q);
      k[t] = ref_matvec(a, L.w_k);
      v[t] = ref_matvec(a, L.w_v);
    }
    Grid attn(T, std::vector<double>(static_cast<std::size_t>(heads * hd), 0.0));
    for (int h = 0; h < heads; ++h) {
      if (!options.head_mask.empty() && !options.head_mask[l][static_cast<std::size_t>(h)]) continue;
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> score(t + 1);
        double top = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (int c = 0; c < hd; ++c) dot += q[t][h * hd + c] * k[s][h * hd + c];
          score[s] = dot / std::sqrt(static_cast<double>(hd));
          top = std::max(top, score[s]);
        }
        double z = 0.0;
        for (auto& sc : score) z += (sc = std::exp(sc - top));
        for (std::size_t s = 0; s <= t; ++s) {
          for (int c = 0; c < hd; ++c) attn[t][h * hd + c] += score[s] / z * v[s][h * hd + c];
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const auto o = ref_matvec(attn[t], L.w_o);
      for (int c = 0; c < d; ++c) x[t][c] += o[c];
    }
    if (!options.skip_mlp.empty() && options.skip_mlp[l]) continue;
    for (std::size_t t = 0; t < T; ++t) {
      auto u = ref_matvec(ref_layer_norm(x[t], L.ln2_gain, L.ln2_bias), L.w_up);
      for (auto& e : u) e = ref_gelu(e);
      const auto m = ref_matvec(u, L.w_down);
      for (int c = 0; c < d; ++c) x[t][c] += m[c];
    }
  }

  Grid logits(T, std::vector<double>(static_cast<std::size_t>(model.config.vocab_size), 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    const auto f = ref_layer_norm(x[t], p.lnf_gain, p.lnf_bias);
    for (int w = 0; w < model.config.vocab_size; ++w) {
      for (int c = 0; c < d; ++c) logits[t][w] += f[c] * p.tok_emb(w, c);
    }
  }
  return logits;
}

// Mean next-token cross-entropy over positions 0..T-2.
inline double reference_loss(const adapruner::TransformerLM& model, std::span<const int> tokens,
                             const ReferenceOptions& options = {}) {
  const Grid logits = reference_logits(model, tokens, options);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    double top = -INFINITY;
    for (double z : logits[t]) top = std::max(top, z);
    double sum = 0.0;
    for (double z : logits[t]) sum += std::exp(z - top);
    total += top + std::log(sum) - logits[t][static_cast<std::size_t>(tokens[t + 1])];
  }
  return total / static_cast<double>(tokens.size() - 1);
}

inline adapruner::Matrix to_matrix(const Grid& g) {
  adapruner::Matrix m(static_cast<Eigen::Index>(g.size()), static_cast<Eigen::Index>(g.empty() ? 0 : g[0].size()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[i][j];
  }
  return m;
}

}  // namespace testsupport
