#include "adapruner/model.hpp"

#include "adapruner/common.hpp"

#include <cmath>
#include <numbers>

namespace adapruner {

namespace {

constexpr double kLayerNormEps = 1e-5;

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void ModelConfig::validate() const {
  check(vocab_size >= 2, "vocab_size must be >= 2");
  check(d_model >= 1, "d_model must be >= 1");
  check(n_layers >= 1, "n_layers must be >= 1");
  check(n_heads >= 1, "n_heads must be >= 1");
  check(d_model % n_heads == 0, "d_model (" + std::to_string(d_model) +
                                    ") must be divisible by n_heads (" +
                                    std::to_string(n_heads) + ")");
  check(d_ff >= 1, "d_ff must be >= 1");
  check(max_seq_len >= 2, "max_seq_len must be >= 2");
  check(0 <= prune_begin && prune_begin <= prune_end && prune_end <= n_layers,
        "prune range [" + std::to_string(prune_begin) + ", " + std::to_string(prune_end) +
            ") must lie within [0, " + std::to_string(n_layers) + "]");
}

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::query: return "w_q";
    case Projection::key: return "w_k";
    case Projection::value: return "w_v";
    case Projection::output: return "w_o";
    case Projection::up: return "w_up";
    case Projection::down: return "w_down";
  }
  return "?";
}

Matrix& LayerParams::weight(Projection p) {
  switch (p) {
    case Projection::query: return w_q;
    case Projection::key: return w_k;
    case Projection::value: return w_v;
    case Projection::output: return w_o;
    case Projection::up: return w_up;
    case Projection::down: return w_down;
  }
  throw std::logic_error("bad projection");
}

const Matrix& LayerParams::weight(Projection p) const {
  return const_cast<LayerParams*>(this)->weight(p);
}

namespace {

TensorRef ref(std::string name, Matrix& m) { return {std::move(name), m.data(), m.rows(), m.cols()}; }
TensorRef ref(std::string name, Vector& v) { return {std::move(name), v.data(), v.size(), 1}; }

}  // namespace

std::vector<TensorRef> Params::tensors() {
  std::vector<TensorRef> out;
  out.push_back(ref("tok_emb", tok_emb));
  out.push_back(ref("pos_emb", pos_emb));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back(ref(p + "ln1_gain", layer.ln1_gain));
    out.push_back(ref(p + "ln1_bias", layer.ln1_bias));
    out.push_back(ref(p + "w_q", layer.w_q));
    out.push_back(ref(p + "w_k", layer.w_k));
    out.push_back(ref(p + "w_v", layer.w_v));
    out.push_back(ref(p + "w_o", layer.w_o));
    out.push_back(ref(p + "ln2_gain", layer.ln2_gain));
    out.push_back(ref(p + "ln2_bias", layer.ln2_bias));
    out.push_back(ref(p + "w_up", layer.w_up));
    out.push_back(ref(p + "w_down", layer.w_down));
  }
  out.push_back(ref("lnf_gain", lnf_gain));
  out.push_back(ref("lnf_bias", lnf_bias));
  return out;
}

std::vector<TensorRef> Params::tensors() const { return const_cast<Params*>(this)->tensors(); }

void Params::set_zero() {
  for (auto& t : tensors()) std::fill(t.values().begin(), t.values().end(), 0.0);
}

Params& Params::operator+=(const Params& other) {
  auto mine = tensors();
  auto theirs = other.tensors();
  if (mine.size() != theirs.size()) throw std::logic_error("Params shape mismatch");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].size() != theirs[i].size()) throw std::logic_error("Params shape mismatch");
    for (Eigen::Index j = 0; j < mine[i].size(); ++j) mine[i].data[j] += theirs[i].data[j];
  }
  return *this;
}

Params& Params::operator*=(double factor) {
  for (auto& t : tensors()) {
    for (double& v : t.values()) v *= factor;
  }
  return *this;
}

Params zeros_like(const Params& params) {
  Params out = params;
  out.set_zero();
  return out;
}

int TransformerLM::heads(int layer) const {
  return static_cast<int>(params.layers.at(layer).w_q.cols()) / config.head_dim();
}

int TransformerLM::ff(int layer) const {
  return static_cast<int>(params.layers.at(layer).w_up.cols());
}

const LowRankDelta* AdapterSet::find(int layer, Projection p) const {
  if (layer < 0 || static_cast<std::size_t>(layer) >= layers.size()) return nullptr;
  const auto& slot = layers[layer][static_cast<std::size_t>(p)];
  return slot ? &*slot : nullptr;
}

LowRankDelta* AdapterSet::find(int layer, Projection p) {
  return const_cast<LowRankDelta*>(std::as_const(*this).find(layer, p));
}

TransformerLM init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
    return m;
  };
  const int d = config.d_model;

  TransformerLM model{config, {}};
  auto& p = model.params;
  p.tok_emb = uniform(config.vocab_size, d);
  p.pos_emb = uniform(config.max_seq_len, d);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams layer;
    layer.ln1_gain = Vector::Ones(d);
    layer.ln1_bias = Vector::Zero(d);
    layer.w_q = uniform(d, d);
    layer.w_k = uniform(d, d);
    layer.w_v = uniform(d, d);
    layer.w_o = uniform(d, d);
    layer.ln2_gain = Vector::Ones(d);
    layer.ln2_bias = Vector::Zero(d);
    layer.w_up = uniform(d, config.d_ff);
    layer.w_down = uniform(config.d_ff, d);
    p.layers.push_back(std::move(layer));
  }
  p.lnf_gain = Vector::Ones(d);
  p.lnf_bias = Vector::Zero(d);
  return model;
}

void validate_batch(const ModelConfig& config, std::span<const Sequence> batch) {
  if (batch.empty()) throw ConfigError("empty batch");
  for (const auto& seq : batch) {
    if (seq.size() < 2 || seq.size() > static_cast<std::size_t>(config.max_seq_len)) {
      throw ConfigError("sequence length " + std::to_string(seq.size()) + " outside [2, " +
                        std::to_string(config.max_seq_len) + "]");
    }
    for (int tok : seq) {
      if (tok < 0 || tok >= config.vocab_size) {
        throw ConfigError("token id " + std::to_string(tok) + " outside vocabulary of size " +
                          std::to_string(config.vocab_size));
      }
    }
  }
}

namespace {

void validate_sequence(const ModelConfig& config, std::span<const int> tokens) {
  Sequence seq(tokens.begin(), tokens.end());
  validate_batch(config, std::span<const Sequence>(&seq, 1));
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct LayerNormCache {
  Matrix xhat;
  Vector rstd;
};

Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, LayerNormCache& cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  cache.xhat.resize(rows, d);
  cache.rstd.resize(rows);
  Matrix y(rows, d);
  for (Eigen::Index t = 0; t < rows; ++t) {
    const double mean = x.row(t).mean();
    const double var = (x.row(t).array() - mean).square().sum() / static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd(t) = rstd;
    cache.xhat.row(t) = (x.row(t).array() - mean) * rstd;
    y.row(t) = cache.xhat.row(t).array() * gain.transpose().array() + bias.transpose().array();
  }
  return y;
}

// Accumulates gain/bias gradients (when requested) and returns dL/dx.
Matrix layer_norm_backward(const Matrix& dy, const Vector& gain, const LayerNormCache& cache,
                           double weight, Vector* dgain, Vector* dbias) {
  const Eigen::Index rows = dy.rows();
  const Eigen::Index d = dy.cols();
  if (dgain) *dgain += weight * (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  if (dbias) *dbias += weight * dy.colwise().sum().transpose();
  Matrix dx(rows, d);
  for (Eigen::Index t = 0; t < rows; ++t) {
    Eigen::RowVectorXd dxhat = dy.row(t).array() * gain.transpose().array();
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = (dxhat.array() * cache.xhat.row(t).array()).mean();
    dx.row(t) = cache.rstd(t) *
                (dxhat.array() - mean_dxhat - cache.xhat.row(t).array() * mean_dxhat_xhat);
  }
  return dx;
}

Matrix project(const Matrix& x, const Matrix& w, const LowRankDelta* delta) {
  Matrix y = x * w;
  if (delta) y += delta->scale * ((x * delta->a.transpose()) * delta->b.transpose());
  return y;
}

// Backward of project(); returns dL/dx.
Matrix project_backward(const Matrix& x, const Matrix& w, const LowRankDelta* delta,
                        const Matrix& dy, double weight, Matrix* dw, LowRankDelta* ddelta) {
  if (dw) dw->noalias() += weight * (x.transpose() * dy);
  Matrix dx = dy * w.transpose();
  if (delta) {
    const Matrix dy_b = dy * delta->b;  // [T x r]
    dx += delta->scale * (dy_b * delta->a);
    if (ddelta) {
      ddelta->a.noalias() += (weight * delta->scale) * (dy_b.transpose() * x);
      ddelta->b.noalias() += (weight * delta->scale) * (dy.transpose() * (x * delta->a.transpose()));
    }
  }
  return dx;
}

struct LayerCache {
  Matrix x_in;
  LayerNormCache ln1;
  Matrix a1, q, k, v;
  std::vector<Matrix> probs;  // per head, [T x T]
  Matrix attn;                // concatenated head outputs
  Matrix x_mid;
  LayerNormCache ln2;
  Matrix a2, u, g;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix x_final;
  LayerNormCache lnf;
  Matrix af;
};

// Runs the decoder over one sequence and returns the final normalized hidden
// states [T x d]; logits are af * tok_emb^T.
Matrix run_forward(const TransformerLM& model, std::span<const int> tokens,
                   const AdapterSet* adapters, ForwardCache& cache) {
  const auto& p = model.params;
  const int seq_len = static_cast<int>(tokens.size());
  const int d = model.config.d_model;
  const int hd = model.config.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix x(seq_len, d);
  for (int t = 0; t < seq_len; ++t) x.row(t) = p.tok_emb.row(tokens[t]) + p.pos_emb.row(t);

  cache.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    auto& c = cache.layers[l];
    const int li = static_cast<int>(l);
    auto delta = [&](Projection proj) { return adapters ? adapters->find(li, proj) : nullptr; };
    const int heads = model.heads(li);

    c.x_in = x;
    c.a1 = layer_norm(x, layer.ln1_gain, layer.ln1_bias, c.ln1);
    c.q = project(c.a1, layer.w_q, delta(Projection::query));
    c.k = project(c.a1, layer.w_k, delta(Projection::key));
    c.v = project(c.a1, layer.w_v, delta(Projection::value));
    c.attn.setZero(seq_len, static_cast<Eigen::Index>(heads) * hd);
    c.probs.resize(heads);
    for (int h = 0; h < heads; ++h) {
      Matrix scores = (c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose()) * inv_sqrt_hd;
      Matrix& prob = c.probs[h];
      prob.setZero(seq_len, seq_len);
      for (int t = 0; t < seq_len; ++t) {
        const double mx = scores.row(t).head(t + 1).maxCoeff();
        double z = 0.0;
        for (int s = 0; s <= t; ++s) {
          prob(t, s) = std::exp(scores(t, s) - mx);
          z += prob(t, s);
        }
        prob.row(t).head(t + 1) /= z;
      }
      c.attn.middleCols(h * hd, hd) = prob * c.v.middleCols(h * hd, hd);
    }
    x += project(c.attn, layer.w_o, delta(Projection::output));
    c.x_mid = x;

    c.a2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias, c.ln2);
    c.u = project(c.a2, layer.w_up, delta(Projection::up));
    c.g = c.u.unaryExpr([](double z) { return gelu(z); });
    x += project(c.g, layer.w_down, delta(Projection::down));
  }
  cache.x_final = x;
  cache.af = layer_norm(x, p.lnf_gain, p.lnf_bias, cache.lnf);
  return cache.af;
}

// Row-wise log-softmax negative log likelihood of targets; fills probs with
// the softmax when non-null.
double nll_rows(const Matrix& logits, std::span<const int> tokens, Matrix* probs) {
  const Eigen::Index rows = logits.rows();
  double total = 0.0;
  if (probs) probs->resize(rows, logits.cols());
  for (Eigen::Index t = 0; t < rows; ++t) {
    const double mx = logits.row(t).maxCoeff();
    const double z = (logits.row(t).array() - mx).exp().sum();
    const double log_z = mx + std::log(z);
    total += log_z - logits(t, tokens[t + 1]);
    if (probs) probs->row(t) = (logits.row(t).array() - log_z).exp();
  }
  return total;
}

}  // namespace

Matrix forward_logits(const TransformerLM& model, std::span<const int> tokens,
                      const AdapterSet* adapters) {
  validate_sequence(model.config, tokens);
  ForwardCache cache;
  const Matrix af = run_forward(model, tokens, adapters, cache);
  return af * model.params.tok_emb.transpose();
}

NllSum sequence_nll(const TransformerLM& model, std::span<const int> tokens,
                    const AdapterSet* adapters) {
  validate_sequence(model.config, tokens);
  ForwardCache cache;
  const Matrix af = run_forward(model, tokens, adapters, cache);
  const Eigen::Index predicted = static_cast<Eigen::Index>(tokens.size()) - 1;
  const Matrix logits = af.topRows(predicted) * model.params.tok_emb.transpose();
  return {nll_rows(logits, tokens, nullptr), predicted};
}

double sequence_loss(const TransformerLM& model, std::span<const int> tokens,
                     const AdapterSet* adapters) {
  const NllSum nll = sequence_nll(model, tokens, adapters);
  return nll.total / static_cast<double>(nll.count);
}

double loss(const TransformerLM& model, std::span<const Sequence> batch) {
  validate_batch(model.config, batch);
  double total = 0.0;
  for (const auto& seq : batch) total += sequence_loss(model, seq);
  return total / static_cast<double>(batch.size());
}

double accumulate_gradients(const TransformerLM& model, std::span<const int> tokens,
                            double weight, Params* base_grads, const AdapterSet* adapters,
                            AdapterSet* adapter_grads) {
  validate_sequence(model.config, tokens);
  const auto& p = model.params;
  const int seq_len = static_cast<int>(tokens.size());
  const int predicted = seq_len - 1;
  const int hd = model.config.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardCache cache;
  const Matrix af = run_forward(model, tokens, adapters, cache);
  const Matrix logits = af.topRows(predicted) * p.tok_emb.transpose();
  Matrix dlogits;
  const double seq_loss = nll_rows(logits, tokens, &dlogits) / predicted;
  for (int t = 0; t < predicted; ++t) dlogits(t, tokens[t + 1]) -= 1.0;
  dlogits /= static_cast<double>(predicted);

  Matrix daf = Matrix::Zero(seq_len, model.config.d_model);
  daf.topRows(predicted) = dlogits * p.tok_emb;
  if (base_grads) base_grads->tok_emb.noalias() += weight * (dlogits.transpose() * af.topRows(predicted));

  Matrix dx = layer_norm_backward(daf, p.lnf_gain, cache.lnf, weight,
                                  base_grads ? &base_grads->lnf_gain : nullptr,
                                  base_grads ? &base_grads->lnf_bias : nullptr);

  for (int l = static_cast<int>(p.layers.size()) - 1; l >= 0; --l) {
    const auto& layer = p.layers[l];
    const auto& c = cache.layers[l];
    LayerParams* gl = base_grads ? &base_grads->layers[l] : nullptr;
    auto delta = [&](Projection proj) { return adapters ? adapters->find(l, proj) : nullptr; };
    auto ddelta = [&](Projection proj) { return adapter_grads ? adapter_grads->find(l, proj) : nullptr; };
    auto dweight = [&](Projection proj) { return gl ? &gl->weight(proj) : nullptr; };

    // MLP branch: x_out = x_mid + gelu(a2 W_up) W_down
    Matrix dg = project_backward(c.g, layer.w_down, delta(Projection::down), dx, weight,
                                 dweight(Projection::down), ddelta(Projection::down));
    Matrix du = dg.array() * c.u.unaryExpr([](double z) { return gelu_grad(z); }).array();
    Matrix da2 = project_backward(c.a2, layer.w_up, delta(Projection::up), du, weight,
                                  dweight(Projection::up), ddelta(Projection::up));
    dx += layer_norm_backward(da2, layer.ln2_gain, c.ln2, weight, gl ? &gl->ln2_gain : nullptr,
                              gl ? &gl->ln2_bias : nullptr);

    // Attention branch: x_mid = x_in + attn W_o
    Matrix dattn = project_backward(c.attn, layer.w_o, delta(Projection::output), dx, weight,
                                    dweight(Projection::output), ddelta(Projection::output));
    Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
    Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
    Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
    for (int h = 0; h < static_cast<int>(c.probs.size()); ++h) {
      const Matrix& prob = c.probs[h];
      const Matrix dout = dattn.middleCols(h * hd, hd);
      dv.middleCols(h * hd, hd) = prob.transpose() * dout;
      const Matrix dprob = dout * c.v.middleCols(h * hd, hd).transpose();
      Matrix dscores = Matrix::Zero(seq_len, seq_len);
      for (int t = 0; t < seq_len; ++t) {
        const double dot = (dprob.row(t).head(t + 1).array() * prob.row(t).head(t + 1).array()).sum();
        dscores.row(t).head(t + 1) =
            prob.row(t).head(t + 1).array() * (dprob.row(t).head(t + 1).array() - dot);
      }
      dscores *= inv_sqrt_hd;
      dq.middleCols(h * hd, hd) = dscores * c.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd) = dscores.transpose() * c.q.middleCols(h * hd, hd);
    }
    Matrix da1 = project_backward(c.a1, layer.w_q, delta(Projection::query), dq, weight,
                                  dweight(Projection::query), ddelta(Projection::query));
    da1 += project_backward(c.a1, layer.w_k, delta(Projection::key), dk, weight,
                            dweight(Projection::key), ddelta(Projection::key));
    da1 += project_backward(c.a1, layer.w_v, delta(Projection::value), dv, weight,
                            dweight(Projection::value), ddelta(Projection::value));
    dx += layer_norm_backward(da1, layer.ln1_gain, c.ln1, weight, gl ? &gl->ln1_gain : nullptr,
                              gl ? &gl->ln1_bias : nullptr);
  }

  if (base_grads) {
    for (int t = 0; t < seq_len; ++t) {
      base_grads->tok_emb.row(tokens[t]) += weight * dx.row(t);
      base_grads->pos_emb.row(t) += weight * dx.row(t);
    }
  }
  return seq_loss;
}

GradientStore gradients(const TransformerLM& model, std::span<const Sequence> batch,
                        bool per_sample) {
  validate_batch(model.config, batch);
  GradientStore store{zeros_like(model.params), {}};
  Params sample = zeros_like(model.params);
  for (const auto& seq : batch) {
    sample.set_zero();
    accumulate_gradients(model, seq, 1.0, &sample);
    store.batch += sample;
    if (per_sample) store.per_sample.push_back(sample);
  }
  store.batch *= 1.0 / static_cast<double>(batch.size());
  return store;
}

std::int64_t count_params(const TransformerLM& model, bool prunable_only) {
  std::int64_t total = 0;
  if (!prunable_only) {
    for (const auto& t : model.params.tensors()) total += t.size();
    return total;
  }
  for (int l = model.config.prune_begin; l < model.config.prune_end; ++l) {
    for (Projection p : kProjections) total += model.params.layers[l].weight(p).size();
  }
  return total;
}

}  // namespace adapruner
