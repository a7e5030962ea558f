#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nn_batch.hpp"
#include "rds/errors.hpp"
#include "rds/runtime.hpp"
#include "rds/toymodel.hpp"

namespace rds {

using detail::layer_norm_rows;
using detail::layer_norm_rows_backward;
using detail::NormCache;

namespace {

struct LayerCache {
  NormCache attn_norm;
  Matrix a;  // attn-norm output
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T (upper triangle zero)
  Matrix attended;
  NormCache mlp_norm;
  Matrix m;    // mlp-norm output
  Matrix pre;  // T x d_ff
  Matrix act;
};

struct SequenceCache {
  std::vector<LayerCache> layers;
  NormCache final_norm;
  Matrix hidden;
  Matrix logits;
};

// Batched forward over one sequence. Numerically equivalent to the incremental
// path in ToyTransformer::evaluate (agreement is covered by tests, not bit-exact).
void forward_sequence(const ToyTransformer& model, const std::vector<TokenId>& tokens,
                      SequenceCache& cache) {
  const ModelConfig& cfg = model.config();
  const TransformerWeights& w = model.weights();
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto n_heads = static_cast<Eigen::Index>(cfg.n_heads);
  const Eigen::Index head_dim = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    x.row(t) = w.token_embedding.row(tokens[static_cast<std::size_t>(t)]) + w.position_embedding.row(t);
  }
  cache.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const DecoderLayerWeights& layer = w.layers[l];
    LayerCache& lc = cache.layers[l];
    lc.a = layer_norm_rows(x, layer.attn_norm, lc.attn_norm);
    lc.q = (lc.a * layer.wq).rowwise() + layer.bq.transpose();
    lc.k = (lc.a * layer.wk).rowwise() + layer.bk.transpose();
    lc.v = (lc.a * layer.wv).rowwise() + layer.bv.transpose();
    lc.attended = Matrix::Zero(T, d);
    lc.probs.assign(static_cast<std::size_t>(n_heads), Matrix::Zero(T, T));
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      const Eigen::Index off = h * head_dim;
      Matrix& p = lc.probs[static_cast<std::size_t>(h)];
      const Matrix scores =
          (lc.q.middleCols(off, head_dim) * lc.k.middleCols(off, head_dim).transpose()) * scale;
      for (Eigen::Index t = 0; t < T; ++t) {
        const double max_score = scores.row(t).head(t + 1).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j <= t; ++j) {
          p(t, j) = std::exp(scores(t, j) - max_score);
          total += p(t, j);
        }
        p.row(t).head(t + 1) /= total;
      }
      lc.attended.middleCols(off, head_dim) = p * lc.v.middleCols(off, head_dim);
    }
    x += (lc.attended * layer.wo).rowwise() + layer.bo.transpose();
    lc.m = layer_norm_rows(x, layer.mlp_norm, lc.mlp_norm);
    lc.pre = (lc.m * layer.w_in).rowwise() + layer.b_in.transpose();
    lc.act = lc.pre.unaryExpr([](double z) { return gelu(z); });
    x += (lc.act * layer.w_out).rowwise() + layer.b_out.transpose();
  }
  cache.hidden = layer_norm_rows(x, w.final_norm, cache.final_norm);
  cache.logits = cache.hidden * w.token_embedding.transpose();
}

// Returns the summed (unnormalized) cross-entropy of this sequence and adds
// inv_count-scaled gradients into grad.
double backward_sequence(const ToyTransformer& model, const std::vector<TokenId>& tokens,
                         double inv_count, TransformerWeights& grad) {
  SequenceCache cache;
  forward_sequence(model, tokens, cache);
  const ModelConfig& cfg = model.config();
  const TransformerWeights& w = model.weights();
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto n_heads = static_cast<Eigen::Index>(cfg.n_heads);
  const Eigen::Index head_dim = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  double loss = 0.0;
  Matrix dlogits = Matrix::Zero(T, cache.logits.cols());
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const Vector probs = softmax(cache.logits.row(t).transpose());
    const TokenId target = tokens[static_cast<std::size_t>(t + 1)];
    loss -= std::log(std::max(probs[target], 1e-300));
    dlogits.row(t) = probs.transpose() * inv_count;
    dlogits(t, target) -= inv_count;
  }

  grad.token_embedding += dlogits.transpose() * cache.hidden;
  Matrix dx = layer_norm_rows_backward(dlogits * w.token_embedding, w.final_norm,
                                       cache.final_norm, grad.final_norm);

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const DecoderLayerWeights& layer = w.layers[li];
    DecoderLayerWeights& g = grad.layers[li];
    const LayerCache& lc = cache.layers[li];

    // MLP branch.
    g.w_out += lc.act.transpose() * dx;
    g.b_out += dx.colwise().sum().transpose();
    Matrix dpre = dx * layer.w_out.transpose();
    for (Eigen::Index i = 0; i < dpre.size(); ++i) dpre.data()[i] *= gelu_derivative(lc.pre.data()[i]);
    g.w_in += lc.m.transpose() * dpre;
    g.b_in += dpre.colwise().sum().transpose();
    dx += layer_norm_rows_backward(dpre * layer.w_in.transpose(), layer.mlp_norm, lc.mlp_norm,
                                   g.mlp_norm);

    // Attention branch.
    g.wo += lc.attended.transpose() * dx;
    g.bo += dx.colwise().sum().transpose();
    const Matrix dattended = dx * layer.wo.transpose();
    Matrix dq = Matrix::Zero(T, d), dk = Matrix::Zero(T, d), dv = Matrix::Zero(T, d);
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      const Eigen::Index off = h * head_dim;
      const Matrix& p = lc.probs[static_cast<std::size_t>(h)];
      const auto dout = dattended.middleCols(off, head_dim);
      dv.middleCols(off, head_dim) = p.transpose() * dout;
      const Matrix dp = dout * lc.v.middleCols(off, head_dim).transpose();
      Matrix ds = Matrix::Zero(T, T);
      for (Eigen::Index t = 0; t < T; ++t) {
        double row_dot = 0.0;
        for (Eigen::Index j = 0; j <= t; ++j) row_dot += dp(t, j) * p(t, j);
        for (Eigen::Index j = 0; j <= t; ++j) ds(t, j) = p(t, j) * (dp(t, j) - row_dot) * scale;
      }
      dq.middleCols(off, head_dim) = ds * lc.k.middleCols(off, head_dim);
      dk.middleCols(off, head_dim) = ds.transpose() * lc.q.middleCols(off, head_dim);
    }
    g.wq += lc.a.transpose() * dq;
    g.wk += lc.a.transpose() * dk;
    g.wv += lc.a.transpose() * dv;
    g.bq += dq.colwise().sum().transpose();
    g.bk += dk.colwise().sum().transpose();
    g.bv += dv.colwise().sum().transpose();
    const Matrix da = dq * layer.wq.transpose() + dk * layer.wk.transpose() + dv * layer.wv.transpose();
    dx += layer_norm_rows_backward(da, layer.attn_norm, lc.attn_norm, g.attn_norm);
  }

  for (Eigen::Index t = 0; t < T; ++t) {
    grad.token_embedding.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    grad.position_embedding.row(t) += dx.row(t);
  }
  return loss;
}

std::size_t predicted_positions(const ToyTransformer& model,
                                const std::vector<std::vector<TokenId>>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("training corpus is empty");
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    if (seq.empty() || seq.size() > model.config().max_seq) {
      throw std::invalid_argument("training sequence length " + std::to_string(seq.size()) +
                                  " outside [1, max_seq]");
    }
    for (TokenId t : seq) {
      if (t < 0 || static_cast<std::size_t>(t) >= model.config().vocab_size) {
        throw std::invalid_argument("training token outside vocabulary");
      }
    }
    count += seq.size() - 1;
  }
  if (count == 0) throw std::invalid_argument("training corpus has no next-token targets");
  return count;
}

void add_into(TransformerWeights& dst, const TransformerWeights& src) {
  auto d = parameter_views(dst);
  const auto s = parameter_views(src);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d[i].values.size(); ++j) d[i].values[j] += s[i].values[j];
  }
}

// Fixed partition of sequences into chunks; each chunk is reduced in order and
// chunks are summed in order, so the result is independent of thread count.
constexpr std::size_t kGradientChunks = 16;

}  // namespace

double lm_loss(const ToyTransformer& model, const std::vector<std::vector<TokenId>>& sequences) {
  const std::size_t count = predicted_positions(model, sequences);
  std::vector<double> per_sequence(sequences.size(), 0.0);
  parallel_for(sequences.size(), [&](std::size_t i) {
    const ForwardOutput out = model.forward(sequences[i]);
    double loss = 0.0;
    for (std::size_t t = 0; t + 1 < sequences[i].size(); ++t) {
      const Vector probs = softmax(out.logits.row(static_cast<Eigen::Index>(t)).transpose());
      loss -= std::log(std::max(probs[sequences[i][t + 1]], 1e-300));
    }
    per_sequence[i] = loss;
  });
  double total = 0.0;
  for (double l : per_sequence) total += l;
  return total / static_cast<double>(count);
}

double lm_loss_and_grad(const ToyTransformer& model,
                        const std::vector<std::vector<TokenId>>& sequences,
                        TransformerWeights& grad) {
  const std::size_t count = predicted_positions(model, sequences);
  const double inv_count = 1.0 / static_cast<double>(count);
  const std::size_t chunks = std::min(kGradientChunks, sequences.size());
  std::vector<TransformerWeights> chunk_grads(chunks, zeros_like(model.weights()));
  std::vector<double> chunk_loss(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    for (std::size_t i = c; i < sequences.size(); i += chunks) {
      chunk_loss[c] += backward_sequence(model, sequences[i], inv_count, chunk_grads[c]);
    }
  });
  grad = zeros_like(model.weights());
  double loss = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    add_into(grad, chunk_grads[c]);
    loss += chunk_loss[c];
  }
  return loss * inv_count;
}

LmTrainResult train_lm(const ToyTransformer& model,
                       const std::vector<std::vector<TokenId>>& sequences,
                       const LmTrainConfig& config) {
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("train_lm: learning rate must be > 0");
  LmTrainResult result{model, {}};
  ToyTransformer& current = result.model;

  TransformerWeights first_moment = zeros_like(current.weights());
  TransformerWeights second_moment = zeros_like(current.weights());
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  TransformerWeights grad;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double loss = lm_loss_and_grad(current, sequences, grad);
    if (!std::isfinite(loss)) {
      throw TrainingFailure("train_lm: loss diverged at epoch " + std::to_string(epoch));
    }
    result.loss_curve.push_back(loss);

    auto params = parameter_views(current.mutable_weights());
    const auto grads = parameter_views(std::as_const(grad));
    if (config.optimizer == Optimizer::kGradientDescent) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].values.size(); ++j) {
          params[i].values[j] -= config.learning_rate * grads[i].values[j];
        }
      }
    } else {
      auto m = parameter_views(first_moment);
      auto v = parameter_views(second_moment);
      const double t = static_cast<double>(epoch + 1);
      const double correction1 = 1.0 - std::pow(kBeta1, t);
      const double correction2 = 1.0 - std::pow(kBeta2, t);
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].values.size(); ++j) {
          const double g = grads[i].values[j];
          m[i].values[j] = kBeta1 * m[i].values[j] + (1.0 - kBeta1) * g;
          v[i].values[j] = kBeta2 * v[i].values[j] + (1.0 - kBeta2) * g * g;
          const double m_hat = m[i].values[j] / correction1;
          const double v_hat = v[i].values[j] / correction2;
          params[i].values[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + kAdamEps);
        }
      }
    }
  }
  const double final_loss = lm_loss(current, sequences);
  if (!std::isfinite(final_loss)) throw TrainingFailure("train_lm: final loss is not finite");
  result.loss_curve.push_back(final_loss);
  return result;
}

}  // namespace rds
