#include "rds/toymodel.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace rds {

void ModelConfig::validate() const {
  if (vocab_size < 32) throw std::invalid_argument("ModelConfig: vocab_size must be >= 32");
  if (max_seq < 16) throw std::invalid_argument("ModelConfig: max_seq must be >= 16");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (d_ff == 0) throw std::invalid_argument("ModelConfig: d_ff must be >= 1");
}

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
  add_matrix("tok_emb", w.token_embedding);
  add_matrix("pos_emb", w.position_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& layer = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    add_vector(p + "attn_norm.gain", layer.attn_norm.gain);
    add_vector(p + "attn_norm.bias", layer.attn_norm.bias);
    add_matrix(p + "wq", layer.wq);
    add_vector(p + "bq", layer.bq);
    add_matrix(p + "wk", layer.wk);
    add_vector(p + "bk", layer.bk);
    add_matrix(p + "wv", layer.wv);
    add_vector(p + "bv", layer.bv);
    add_matrix(p + "wo", layer.wo);
    add_vector(p + "bo", layer.bo);
    add_vector(p + "mlp_norm.gain", layer.mlp_norm.gain);
    add_vector(p + "mlp_norm.bias", layer.mlp_norm.bias);
    add_matrix(p + "w_in", layer.w_in);
    add_vector(p + "b_in", layer.b_in);
    add_matrix(p + "w_out", layer.w_out);
    add_vector(p + "b_out", layer.b_out);
  }
  add_vector("final_norm.gain", w.final_norm.gain);
  add_vector("final_norm.bias", w.final_norm.bias);
  return out;
}

LayerNormWeights unit_norm(std::size_t d) {
  return {Vector::Ones(static_cast<Eigen::Index>(d)), Vector::Zero(static_cast<Eigen::Index>(d))};
}

}  // namespace

std::vector<NamedTensor> parameter_views(TransformerWeights& w) {
  return collect_views<TransformerWeights, NamedTensor>(w);
}

std::vector<ConstNamedTensor> parameter_views(const TransformerWeights& w) {
  return collect_views<const TransformerWeights, ConstNamedTensor>(w);
}

TransformerWeights zeros_like(const TransformerWeights& w) {
  TransformerWeights out = w;
  for (auto& view : parameter_views(out)) {
    std::fill(view.values.begin(), view.values.end(), 0.0);
  }
  return out;
}

Vector layer_norm(const Vector& x, const LayerNormWeights& ln) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  return (((x.array() - mean) * rstd) * ln.gain.array() + ln.bias.array()).matrix();
}

namespace {
constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
}

double gelu_derivative(double x) {
  const double t = std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
}

Vector mlp_block(const Vector& normed, const DecoderLayerWeights& layer) {
  Vector pre = layer.w_in.transpose() * normed + layer.b_in;
  for (Eigen::Index i = 0; i < pre.size(); ++i) pre[i] = gelu(pre[i]);
  return layer.w_out.transpose() * pre + layer.b_out;
}

ToyTransformer ToyTransformer::init(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const auto d = static_cast<Eigen::Index>(config.d_model);
  const auto ff = static_cast<Eigen::Index>(config.d_ff);
  auto random_matrix = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };

  TransformerWeights w;
  w.token_embedding = random_matrix(static_cast<Eigen::Index>(config.vocab_size), d);
  w.position_embedding = random_matrix(static_cast<Eigen::Index>(config.max_seq), d);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm = unit_norm(config.d_model);
    layer.wq = random_matrix(d, d);
    layer.wk = random_matrix(d, d);
    layer.wv = random_matrix(d, d);
    layer.wo = random_matrix(d, d);
    layer.bq = layer.bk = layer.bv = layer.bo = Vector::Zero(d);
    layer.mlp_norm = unit_norm(config.d_model);
    layer.w_in = random_matrix(d, ff);
    layer.b_in = Vector::Zero(ff);
    layer.w_out = random_matrix(ff, d);
    layer.b_out = Vector::Zero(d);
  }
  w.final_norm = unit_norm(config.d_model);
  return ToyTransformer(config, std::move(w));
}

ToyTransformer::ToyTransformer(ModelConfig config, TransformerWeights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  if (weights_.token_embedding.rows() != static_cast<Eigen::Index>(config_.vocab_size) ||
      weights_.token_embedding.cols() != d ||
      weights_.position_embedding.rows() != static_cast<Eigen::Index>(config_.max_seq) ||
      weights_.layers.size() != config_.n_layers) {
    throw std::invalid_argument("ToyTransformer: weights do not match config");
  }
}

void ToyTransformer::check_token(TokenId token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw std::invalid_argument("token id " + std::to_string(token) + " outside vocabulary of " +
                                std::to_string(config_.vocab_size));
  }
}

Vector ToyTransformer::embed(TokenId token) const {
  check_token(token);
  return weights_.token_embedding.row(token).transpose();
}

Vector ToyTransformer::lm_head(const Vector& hidden) const {
  if (hidden.size() != static_cast<Eigen::Index>(config_.d_model)) {
    throw std::invalid_argument("lm_head: hidden dimension mismatch");
  }
  return weights_.token_embedding * hidden;
}

DecodeState ToyTransformer::start() const {
  DecodeState state;
  const auto rows = static_cast<Eigen::Index>(config_.max_seq);
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  state.keys.assign(config_.n_layers, Matrix::Zero(rows, d));
  state.values.assign(config_.n_layers, Matrix::Zero(rows, d));
  return state;
}

PositionResult ToyTransformer::evaluate(const DecodeState& state, TokenId token) const {
  check_token(token);
  const std::size_t pos = state.length_;
  if (pos >= config_.max_seq) {
    throw std::invalid_argument("sequence longer than max_seq=" + std::to_string(config_.max_seq));
  }
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto n_heads = static_cast<Eigen::Index>(config_.n_heads);
  const Eigen::Index head_dim = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  PositionResult result;
  result.token = token;
  result.keys.reserve(config_.n_layers);
  result.values.reserve(config_.n_layers);

  Vector x = (weights_.token_embedding.row(token) +
              weights_.position_embedding.row(static_cast<Eigen::Index>(pos)))
                 .transpose();
  std::vector<double> probs(pos + 1);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const DecoderLayerWeights& layer = weights_.layers[l];
    const Matrix& cached_k = state.keys[l];
    const Matrix& cached_v = state.values[l];

    const Vector a = layer_norm(x, layer.attn_norm);
    const Vector q = layer.wq.transpose() * a + layer.bq;
    Vector k = layer.wk.transpose() * a + layer.bk;
    Vector v = layer.wv.transpose() * a + layer.bv;

    Vector attended = Vector::Zero(d);
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      const Eigen::Index off = h * head_dim;
      auto key_at = [&](std::size_t j, Eigen::Index c) {
        return j < pos ? cached_k(static_cast<Eigen::Index>(j), off + c) : k[off + c];
      };
      auto value_at = [&](std::size_t j, Eigen::Index c) {
        return j < pos ? cached_v(static_cast<Eigen::Index>(j), off + c) : v[off + c];
      };
      double max_score = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= pos; ++j) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < head_dim; ++c) s += q[off + c] * key_at(j, c);
        probs[j] = s * scale;
        max_score = std::max(max_score, probs[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        probs[j] = std::exp(probs[j] - max_score);
        total += probs[j];
      }
      for (std::size_t j = 0; j <= pos; ++j) {
        const double p = probs[j] / total;
        for (Eigen::Index c = 0; c < head_dim; ++c) attended[off + c] += p * value_at(j, c);
      }
    }
    x += layer.wo.transpose() * attended + layer.bo;
    x += mlp_block(layer_norm(x, layer.mlp_norm), layer);
    result.keys.push_back(std::move(k));
    result.values.push_back(std::move(v));
  }
  result.hidden = layer_norm(x, weights_.final_norm);
  return result;
}

void ToyTransformer::commit(DecodeState& state, const PositionResult& result) const {
  if (result.keys.size() != config_.n_layers || state.keys.size() != config_.n_layers) {
    throw std::invalid_argument("commit: state/result do not belong to this model");
  }
  if (state.length_ >= config_.max_seq) {
    throw std::invalid_argument("commit: decode state is full");
  }
  const auto row = static_cast<Eigen::Index>(state.length_);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    state.keys[l].row(row) = result.keys[l].transpose();
    state.values[l].row(row) = result.values[l].transpose();
  }
  state.tokens_.push_back(result.token);
  ++state.length_;
}

Vector ToyTransformer::step(DecodeState& state, TokenId token) const {
  PositionResult result = evaluate(state, token);
  commit(state, result);
  return std::move(result.hidden);
}

ForwardOutput ToyTransformer::forward(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > config_.max_seq) {
    throw std::invalid_argument("forward: length " + std::to_string(tokens.size()) +
                                " exceeds max_seq=" + std::to_string(config_.max_seq));
  }
  for (TokenId t : tokens) check_token(t);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  ForwardOutput out;
  out.hidden.resize(n, static_cast<Eigen::Index>(config_.d_model));
  out.logits.resize(n, static_cast<Eigen::Index>(config_.vocab_size));
  DecodeState state = start();
  for (Eigen::Index t = 0; t < n; ++t) {
    const Vector h = step(state, tokens[static_cast<std::size_t>(t)]);
    out.hidden.row(t) = h.transpose();
    out.logits.row(t) = lm_head(h).transpose();
  }
  return out;
}

TensorStore ToyTransformer::to_store() const {
  TensorStore store;
  for (const auto& view : parameter_views(weights_)) {
    std::vector<float> data(view.values.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(view.values[i]);
    store.put(view.name, view.shape, std::move(data));
  }
  store.put_scalar("config.n_heads", static_cast<double>(config_.n_heads));
  return store;
}

ToyTransformer ToyTransformer::from_store(const TensorStore& store, std::uint64_t seed) {
  ModelConfig config;
  const auto& tok = store.at("tok_emb");
  const auto& pos = store.at("pos_emb");
  if (tok.shape.size() != 2 || pos.shape.size() != 2) {
    throw std::invalid_argument("model store: embeddings must be rank 2");
  }
  config.vocab_size = tok.shape[0];
  config.d_model = tok.shape[1];
  config.max_seq = pos.shape[0];
  config.n_heads = static_cast<std::size_t>(store.scalar("config.n_heads"));
  config.n_layers = 0;
  while (store.contains("layers." + std::to_string(config.n_layers) + ".wq")) ++config.n_layers;
  if (config.n_layers == 0) throw std::invalid_argument("model store: no layers");
  config.d_ff = store.at("layers.0.w_in").shape.at(1);
  config.seed = seed;

  // Build a correctly shaped skeleton, then overwrite every tensor from the store.
  ToyTransformer model = init(config);
  for (auto& view : parameter_views(model.weights_)) {
    const auto& entry = store.at(view.name);
    if (entry.shape != view.shape) {
      throw std::invalid_argument("model store: shape mismatch for '" + view.name + "'");
    }
    for (std::size_t i = 0; i < entry.data.size(); ++i) view.values[i] = entry.data[i];
  }
  return model;
}

std::string ToyTransformer::fingerprint() const { return content_hash(to_store().to_bytes()); }

}  // namespace rds
