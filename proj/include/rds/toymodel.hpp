#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rds/numcore.hpp"
#include "rds/tensor_store.hpp"

namespace rds {

using TokenId = int;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq = 32;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

struct LayerNormWeights {
  Vector gain;
  Vector bias;
};

// Weight matrices are stored (in x out) and applied to row vectors: y = x W + b.
struct DecoderLayerWeights {
  LayerNormWeights attn_norm;
  Matrix wq, wk, wv, wo;
  Vector bq, bk, bv, bo;
  LayerNormWeights mlp_norm;
  Matrix w_in;   // d x d_ff
  Vector b_in;
  Matrix w_out;  // d_ff x d
  Vector b_out;
};

struct TransformerWeights {
  Matrix token_embedding;     // vocab x d, also the (tied) LM head
  Matrix position_embedding;  // max_seq x d
  std::vector<DecoderLayerWeights> layers;
  LayerNormWeights final_norm;
};

/// Named views over every parameter tensor, in a fixed order.
template <typename T>
struct BasicNamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<T> values;
};
using NamedTensor = BasicNamedTensor<double>;
using ConstNamedTensor = BasicNamedTensor<const double>;

std::vector<NamedTensor> parameter_views(TransformerWeights& w);
std::vector<ConstNamedTensor> parameter_views(const TransformerWeights& w);

TransformerWeights zeros_like(const TransformerWeights& w);

inline constexpr double kLayerNormEps = 1e-5;

// Shared kernels; the speculative head reuses them so the two stay in lockstep.
Vector layer_norm(const Vector& x, const LayerNormWeights& ln);
double gelu(double x);
double gelu_derivative(double x);
Vector mlp_block(const Vector& normed, const DecoderLayerWeights& layer);

/// Key/value cache for incremental decoding.
class DecodeState {
 public:
  std::size_t length() const { return length_; }
  const std::vector<TokenId>& tokens() const { return tokens_; }

 private:
  friend class ToyTransformer;
  std::size_t length_ = 0;
  std::vector<TokenId> tokens_;
  std::vector<Matrix> keys;    // per layer, max_seq x d
  std::vector<Matrix> values;  // per layer, max_seq x d
};

/// Result of evaluating one token at the next position without committing it.
struct PositionResult {
  TokenId token = 0;
  Vector hidden;
  std::vector<Vector> keys;    // per layer
  std::vector<Vector> values;  // per layer
};

struct ForwardOutput {
  Matrix hidden;  // seq x d, post final layer norm
  Matrix logits;  // seq x vocab
};

class ToyTransformer {
 public:
  /// Seeded N(0, 0.02) weights, unit layer-norm gains, zero biases.
  static ToyTransformer init(const ModelConfig& config);

  ToyTransformer(ModelConfig config, TransformerWeights weights);

  const ModelConfig& config() const { return config_; }
  const TransformerWeights& weights() const { return weights_; }
  TransformerWeights& mutable_weights() { return weights_; }

  /// Row t of `hidden` is the state at position t; logits = hidden E^T.
  ForwardOutput forward(std::span<const TokenId> tokens) const;

  Vector embed(TokenId token) const;
  Vector lm_head(const Vector& hidden) const;

  DecodeState start() const;
  /// Hidden state for `token` at position state.length(); the state is untouched.
  PositionResult evaluate(const DecodeState& state, TokenId token) const;
  void commit(DecodeState& state, const PositionResult& result) const;
  /// evaluate + commit.
  Vector step(DecodeState& state, TokenId token) const;

  TensorStore to_store() const;
  static ToyTransformer from_store(const TensorStore& store, std::uint64_t seed = 0);

  /// content_hash of the serialized weights.
  std::string fingerprint() const;

 private:
  void check_token(TokenId token) const;

  ModelConfig config_;
  TransformerWeights weights_;
};

// ---- training -----------------------------------------------------------------

enum class Optimizer { kGradientDescent, kAdam };

struct LmTrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 0.01;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 0;
};

struct LmTrainResult {
  ToyTransformer model;
  std::vector<double> loss_curve;  // loss before each update, plus final loss
};

/// Mean next-token cross-entropy over all predicted positions.
double lm_loss(const ToyTransformer& model, const std::vector<std::vector<TokenId>>& sequences);

/// Loss and full-batch gradient (same normalization as lm_loss).
double lm_loss_and_grad(const ToyTransformer& model,
                        const std::vector<std::vector<TokenId>>& sequences,
                        TransformerWeights& grad);

/// Full-batch training on a private copy of `model`.
LmTrainResult train_lm(const ToyTransformer& model,
                       const std::vector<std::vector<TokenId>>& sequences,
                       const LmTrainConfig& config);

}  // namespace rds
