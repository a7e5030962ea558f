#include "rds/spechead.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "nn_batch.hpp"
#include "rds/errors.hpp"

namespace rds {

namespace {

template <typename Weights, typename View>
std::vector<View> collect_views(Weights& w) {
  std::vector<View> out;
  auto add_matrix = [&out](std::string name, auto& m) {
    out.push_back(View{std::move(name),
                       {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                       {m.data(), static_cast<std::size_t>(m.size())}});
  };
  auto add_vector = [&out](std::string name, auto& v) {
    out.push_back(View{std::move(name),
                       {static_cast<std::size_t>(v.size())},
                       {v.data(), static_cast<std::size_t>(v.size())}});
  };
  add_matrix("fuse.w", w.fuse_w);
  add_vector("fuse.b", w.fuse_b);
  add_vector("attn_norm.gain", w.attn_norm.gain);
  add_vector("attn_norm.bias", w.attn_norm.bias);
  add_matrix("wv", w.wv);
  add_vector("bv", w.bv);
  add_matrix("wo", w.wo);
  add_vector("bo", w.bo);
  add_vector("mlp_norm.gain", w.mlp_norm.gain);
  add_vector("mlp_norm.bias", w.mlp_norm.bias);
  add_matrix("w_in", w.w_in);
  add_vector("b_in", w.b_in);
  add_matrix("w_out", w.w_out);
  add_vector("b_out", w.b_out);
  add_vector("out_norm.gain", w.out_norm.gain);
  add_vector("out_norm.bias", w.out_norm.bias);
  return out;
}

SpecHeadWeights zeros_like(const SpecHeadWeights& w) {
  SpecHeadWeights out = w;
  for (auto& view : parameter_views(out)) std::fill(view.values.begin(), view.values.end(), 0.0);
  return out;
}

}  // namespace

std::vector<NamedTensor> parameter_views(SpecHeadWeights& w) {
  return collect_views<SpecHeadWeights, NamedTensor>(w);
}

std::vector<ConstNamedTensor> parameter_views(const SpecHeadWeights& w) {
  return collect_views<const SpecHeadWeights, ConstNamedTensor>(w);
}

SpecHead::SpecHead(SpecHeadWeights weights) : weights_(std::move(weights)) {
  const Eigen::Index d = weights_.fuse_b.size();
  if (d == 0 || weights_.fuse_w.rows() != 2 * d || weights_.fuse_w.cols() != d ||
      weights_.wv.rows() != d || weights_.wv.cols() != d || weights_.wo.rows() != d ||
      weights_.wo.cols() != d || weights_.w_in.rows() != d || weights_.w_out.cols() != d ||
      weights_.w_in.cols() != weights_.w_out.rows() || weights_.out_norm.gain.size() != d) {
    throw std::invalid_argument("SpecHead: inconsistent parameter shapes");
  }
  for (const auto& view : parameter_views(weights_)) {
    for (double x : view.values) {
      if (!std::isfinite(x)) throw std::invalid_argument("SpecHead: non-finite parameter " + view.name);
    }
  }
}

SpecHead SpecHead::init(const ToyTransformer& teacher, std::uint64_t seed) {
  const auto& tw = teacher.weights();
  const DecoderLayerWeights& top = tw.layers.back();
  const auto d = static_cast<Eigen::Index>(teacher.config().d_model);

  SpecHeadWeights w;
  w.fuse_w.resize(2 * d, d);
  w.fuse_w.topRows(d).setIdentity();
  w.fuse_w.bottomRows(d).setIdentity();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (Eigen::Index i = 0; i < w.fuse_w.size(); ++i) w.fuse_w.data()[i] += normal(rng);
  w.fuse_b = Vector::Zero(d);
  w.attn_norm = top.attn_norm;
  w.wv = top.wv;
  w.bv = top.bv;
  w.wo = top.wo;
  w.bo = top.bo;
  w.mlp_norm = top.mlp_norm;
  w.w_in = top.w_in;
  w.b_in = top.b_in;
  w.w_out = top.w_out;
  w.b_out = top.b_out;
  w.out_norm = tw.final_norm;
  return SpecHead(std::move(w));
}

Vector SpecHead::predict_hidden(const Vector& h_prev, const Vector& embedding) const {
  const Eigen::Index d = weights_.fuse_b.size();
  if (h_prev.size() != d || embedding.size() != d) {
    throw std::invalid_argument("SpecHead: inputs must have dim " + std::to_string(d));
  }
  const auto& w = weights_;
  Vector z = w.fuse_w.topRows(d).transpose() * h_prev + w.fuse_w.bottomRows(d).transpose() * embedding +
             w.fuse_b;
  // A single position attends only to itself, so attention is its value path.
  const Vector a = layer_norm(z, w.attn_norm);
  const Vector v = w.wv.transpose() * a + w.bv;
  z += w.wo.transpose() * v + w.bo;

  Vector pre = w.w_in.transpose() * layer_norm(z, w.mlp_norm) + w.b_in;
  for (Eigen::Index i = 0; i < pre.size(); ++i) pre[i] = gelu(pre[i]);
  z += w.w_out.transpose() * pre + w.b_out;
  return layer_norm(z, w.out_norm);
}

Matrix SpecHead::predict_batch(const Vector& h_prev, const Matrix& embeddings) const {
  const Eigen::Index d = weights_.fuse_b.size();
  if (embeddings.cols() != d && embeddings.rows() > 0) {
    throw std::invalid_argument("SpecHead: embeddings must have " + std::to_string(d) + " columns");
  }
  if (h_prev.size() != d) throw std::invalid_argument("SpecHead: h_prev has wrong dim");
  Matrix out(embeddings.rows(), d);
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    out.row(r) = predict_hidden(h_prev, embeddings.row(r).transpose()).transpose();
  }
  return out;
}

TensorStore SpecHead::to_store() const {
  TensorStore store;
  for (const auto& view : parameter_views(weights_)) {
    std::vector<float> data(view.values.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(view.values[i]);
    store.put(view.name, view.shape, std::move(data));
  }
  return store;
}

SpecHead SpecHead::from_store(const TensorStore& store) {
  SpecHeadWeights w;
  const auto& fuse = store.at("fuse.w");
  const auto& w_in = store.at("w_in");
  if (fuse.shape.size() != 2 || w_in.shape.size() != 2) {
    throw std::invalid_argument("spechead store: weight matrices must be rank 2");
  }
  const auto d = static_cast<Eigen::Index>(fuse.shape[1]);
  const auto ff = static_cast<Eigen::Index>(w_in.shape[1]);
  w.fuse_w.resize(2 * d, d);
  w.fuse_b.resize(d);
  w.attn_norm = {Vector(d), Vector(d)};
  w.wv.resize(d, d);
  w.wo.resize(d, d);
  w.bv.resize(d);
  w.bo.resize(d);
  w.mlp_norm = {Vector(d), Vector(d)};
  w.w_in.resize(d, ff);
  w.b_in.resize(ff);
  w.w_out.resize(ff, d);
  w.b_out.resize(d);
  w.out_norm = {Vector(d), Vector(d)};
  for (auto& view : parameter_views(w)) {
    const auto& entry = store.at(view.name);
    if (entry.shape != view.shape) {
      throw std::invalid_argument("spechead store: shape mismatch for '" + view.name + "'");
    }
    for (std::size_t i = 0; i < entry.data.size(); ++i) view.values[i] = entry.data[i];
  }
  return SpecHead(std::move(w));
}

// ---- traces ---------------------------------------------------------------------

TraceSet harvest_traces(const ToyTransformer& model,
                        const std::vector<std::vector<TokenId>>& sequences, double val_fraction,
                        std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("harvest_traces: val_fraction must be in (0, 1)");
  }
  const auto d = static_cast<Eigen::Index>(model.config().d_model);
  std::vector<Vector> prev, next;
  std::vector<TokenId> tokens;
  for (const auto& seq : sequences) {
    if (seq.size() > model.config().max_seq) {
      throw std::invalid_argument("harvest_traces: sequence longer than max_seq");
    }
    if (seq.size() < 2) continue;
    const ForwardOutput out = model.forward(seq);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      prev.push_back(out.hidden.row(static_cast<Eigen::Index>(t - 1)).transpose());
      next.push_back(out.hidden.row(static_cast<Eigen::Index>(t)).transpose());
      tokens.push_back(seq[t]);
    }
  }
  if (tokens.empty()) throw std::invalid_argument("harvest_traces: no sequence of length >= 2");

  std::vector<std::size_t> order(tokens.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(tokens.size())));

  auto fill = [&](TraceSplit& split, std::size_t begin, std::size_t end) {
    // Original order within each split keeps the set independent of shuffle details.
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(idx.begin(), idx.end());
    const auto n = static_cast<Eigen::Index>(idx.size());
    split.prev.resize(n, d);
    split.embedding.resize(n, d);
    split.next.resize(n, d);
    split.tokens.clear();
    for (Eigen::Index r = 0; r < n; ++r) {
      const std::size_t i = idx[static_cast<std::size_t>(r)];
      split.prev.row(r) = prev[i].transpose();
      split.next.row(r) = next[i].transpose();
      split.embedding.row(r) = model.embed(tokens[i]).transpose();
      split.tokens.push_back(tokens[i]);
    }
  };
  TraceSet set;
  fill(set.validation, 0, n_val);
  fill(set.train, n_val, tokens.size());
  return set;
}

double smooth_l1(const Matrix& predicted, const Matrix& target) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
    throw std::invalid_argument("smooth_l1: shape mismatch");
  }
  if (predicted.size() == 0) throw std::invalid_argument("smooth_l1: empty input");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < predicted.size(); ++i) {
    const double r = std::abs(predicted.data()[i] - target.data()[i]);
    acc += r < 1.0 ? 0.5 * r * r : r - 0.5;
  }
  return acc / static_cast<double>(predicted.size());
}

Matrix predict_split(const SpecHead& head, const TraceSplit& split) {
  Matrix out(split.prev.rows(), split.prev.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    out.row(r) = head.predict_hidden(split.prev.row(r).transpose(), split.embedding.row(r).transpose())
                     .transpose();
  }
  return out;
}

double spechead_loss(const SpecHead& head, const TraceSplit& split) {
  return smooth_l1(predict_split(head, split), split.next);
}

double mean_relative_error(const Matrix& predicted, const Matrix& target) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols() || target.rows() == 0) {
    throw std::invalid_argument("mean_relative_error: shape mismatch or empty input");
  }
  double acc = 0.0;
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    acc += (predicted.row(r) - target.row(r)).norm() / target.row(r).norm();
  }
  return acc / static_cast<double>(target.rows());
}

Matrix mean_state_prediction(const TraceSplit& train, std::size_t rows) {
  if (train.size() == 0) throw std::invalid_argument("mean_state_prediction: empty train split");
  const Eigen::RowVectorXd mean = train.next.colwise().mean();
  return mean.replicate(static_cast<Eigen::Index>(rows), 1);
}

double spechead_loss_and_grad(const SpecHead& head, const TraceSplit& split, SpecHeadWeights& grad) {
  using detail::NormCache;
  const auto& w = head.weights();
  const Eigen::Index n = split.prev.rows();
  const Eigen::Index d = split.prev.cols();
  if (n == 0) throw std::invalid_argument("spechead_loss_and_grad: empty split");
  if (static_cast<std::size_t>(d) != head.dim()) {
    throw std::invalid_argument("spechead_loss_and_grad: trace dim does not match head");
  }

  Matrix x(n, 2 * d);
  x << split.prev, split.embedding;
  const Eigen::RowVectorXd ones_n = Eigen::RowVectorXd::Ones(n);
  auto add_bias = [](Matrix m, const Vector& b) {
    m.rowwise() += b.transpose();
    return m;
  };

  const Matrix z0 = add_bias(x * w.fuse_w, w.fuse_b);
  NormCache c_attn, c_mlp, c_out;
  const Matrix a = detail::layer_norm_rows(z0, w.attn_norm, c_attn);
  const Matrix v = add_bias(a * w.wv, w.bv);
  const Matrix z1 = z0 + add_bias(v * w.wo, w.bo);
  const Matrix c = detail::layer_norm_rows(z1, w.mlp_norm, c_mlp);
  const Matrix pre = add_bias(c * w.w_in, w.b_in);
  const Matrix act = pre.unaryExpr([](double t) { return gelu(t); });
  const Matrix z2 = z1 + add_bias(act * w.w_out, w.b_out);
  const Matrix y = detail::layer_norm_rows(z2, w.out_norm, c_out);

  const double loss = smooth_l1(y, split.next);
  const double scale = 1.0 / static_cast<double>(y.size());
  const Matrix dy = (y - split.next).unaryExpr([scale](double r) {
    return std::clamp(r, -1.0, 1.0) * scale;
  });

  grad = zeros_like(w);
  Matrix dz2 = detail::layer_norm_rows_backward(dy, w.out_norm, c_out, grad.out_norm);
  grad.w_out = act.transpose() * dz2;
  grad.b_out = (ones_n * dz2).transpose();
  Matrix dpre = (dz2 * w.w_out.transpose()).array() * pre.unaryExpr([](double t) { return gelu_derivative(t); }).array();
  grad.w_in = c.transpose() * dpre;
  grad.b_in = (ones_n * dpre).transpose();
  Matrix dz1 = dz2 + detail::layer_norm_rows_backward(dpre * w.w_in.transpose(), w.mlp_norm, c_mlp,
                                                      grad.mlp_norm);
  grad.wo = v.transpose() * dz1;
  grad.bo = (ones_n * dz1).transpose();
  const Matrix dv = dz1 * w.wo.transpose();
  grad.wv = a.transpose() * dv;
  grad.bv = (ones_n * dv).transpose();
  const Matrix dz0 = dz1 + detail::layer_norm_rows_backward(dv * w.wv.transpose(), w.attn_norm,
                                                            c_attn, grad.attn_norm);
  grad.fuse_w = x.transpose() * dz0;
  grad.fuse_b = (ones_n * dz0).transpose();
  return loss;
}

nlohmann::json SpecHeadTrainResult::metadata(const SpecHeadTrainConfig& config) const {
  return {{"epochs", config.epochs},
          {"learning_rate", config.learning_rate},
          {"seed", config.seed},
          {"final_train_loss", loss_curve.empty() ? 0.0 : loss_curve.back()},
          {"final_validation_loss", validation_curve.empty() ? 0.0 : validation_curve.back()},
          {"mean_baseline_validation_loss", mean_baseline_validation_loss},
          {"validation_curve", validation_curve}};
}

SpecHeadTrainResult train_spechead(const SpecHead& head, const TraceSet& traces,
                                   const SpecHeadTrainConfig& config) {
  if (traces.train.size() == 0) throw std::invalid_argument("train_spechead: empty train split");
  if (!(config.learning_rate > 0.0)) {
    throw std::invalid_argument("train_spechead: learning rate must be > 0");
  }
  SpecHeadTrainResult result;
  result.head = head;
  const bool has_val = traces.validation.size() > 0;
  if (has_val) {
    result.mean_baseline_validation_loss =
        smooth_l1(mean_state_prediction(traces.train, traces.validation.size()), traces.validation.next);
  }

  SpecHeadWeights grad;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double loss = spechead_loss_and_grad(result.head, traces.train, grad);
    if (!std::isfinite(loss)) {
      throw TrainingFailure("train_spechead: loss is not finite at epoch " + std::to_string(epoch));
    }
    result.loss_curve.push_back(loss);
    if (has_val) result.validation_curve.push_back(spechead_loss(result.head, traces.validation));
    auto params = parameter_views(result.head.mutable_weights());
    const auto grads = parameter_views(std::as_const(grad));
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (std::size_t i = 0; i < params[p].values.size(); ++i) {
        params[p].values[i] -= config.learning_rate * grads[p].values[i];
      }
    }
  }
  const double final_loss = spechead_loss_and_grad(result.head, traces.train, grad);
  if (!std::isfinite(final_loss)) throw TrainingFailure("train_spechead: diverged");
  result.loss_curve.push_back(final_loss);
  if (has_val) result.validation_curve.push_back(spechead_loss(result.head, traces.validation));
  return result;
}

}  // namespace rds
