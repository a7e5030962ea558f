#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rds/numcore.hpp"
#include "rds/tensor_store.hpp"
#include "rds/toymodel.hpp"

namespace rds {

struct SpecHeadWeights {
  Matrix fuse_w;  // 2d x d, applied to [h_prev; e]
  Vector fuse_b;
  LayerNormWeights attn_norm;
  Matrix wv, wo;
  Vector bv, bo;
  LayerNormWeights mlp_norm;
  Matrix w_in;
  Vector b_in;
  Matrix w_out;
  Vector b_out;
  LayerNormWeights out_norm;
};

std::vector<NamedTensor> parameter_views(SpecHeadWeights& w);
std::vector<ConstNamedTensor> parameter_views(const SpecHeadWeights& w);

/// Predicts the top-layer state of a candidate token from the previous state and
/// the candidate's embedding:
///   z  = [h_prev; e] W_fuse + b_fuse
///   z += value path of one-position attention over LN(z)
///   z += MLP(LN(z))
///   out = LN_out(z)
class SpecHead {
 public:
  SpecHead() = default;
  explicit SpecHead(SpecHeadWeights weights);

  /// Block and output norm copied from the teacher's top layer and final norm;
  /// the fuse layer starts at [I; I] plus seeded N(0, 0.02) noise.
  static SpecHead init(const ToyTransformer& teacher, std::uint64_t seed);

  std::size_t dim() const { return static_cast<std::size_t>(weights_.fuse_b.size()); }
  const SpecHeadWeights& weights() const { return weights_; }
  SpecHeadWeights& mutable_weights() { return weights_; }

  Vector predict_hidden(const Vector& h_prev, const Vector& embedding) const;
  /// Row i is bit-identical to predict_hidden(h_prev, embeddings.row(i)).
  Matrix predict_batch(const Vector& h_prev, const Matrix& embeddings) const;

  TensorStore to_store() const;
  static SpecHead from_store(const TensorStore& store);

 private:
  SpecHeadWeights weights_;
};

/// (h_prev, token, h_true) triples; `embedding` row i is the teacher embedding of tokens[i].
struct TraceSplit {
  Matrix prev;
  Matrix embedding;
  std::vector<TokenId> tokens;
  Matrix next;

  std::size_t size() const { return tokens.size(); }
};

struct TraceSet {
  TraceSplit train;
  TraceSplit validation;
};

/// One triple per position t >= 1 of every sequence: (hidden[t-1], token[t], hidden[t]).
/// round(val_fraction * n) triples, picked by a seeded shuffle, go to validation.
TraceSet harvest_traces(const ToyTransformer& model,
                        const std::vector<std::vector<TokenId>>& sequences, double val_fraction,
                        std::uint64_t seed);

/// Mean over all elements of the smooth-L1 (beta = 1) difference.
double smooth_l1(const Matrix& predicted, const Matrix& target);

Matrix predict_split(const SpecHead& head, const TraceSplit& split);
double spechead_loss(const SpecHead& head, const TraceSplit& split);

/// Mean over rows of |pred - true| / |true|.
double mean_relative_error(const Matrix& predicted, const Matrix& target);

/// Baseline that always predicts the mean training state.
Matrix mean_state_prediction(const TraceSplit& train, std::size_t rows);

/// Loss and full-batch gradient over a split.
double spechead_loss_and_grad(const SpecHead& head, const TraceSplit& split, SpecHeadWeights& grad);

struct SpecHeadTrainConfig {
  std::size_t epochs = 50;
  double learning_rate = 1.0;
  std::uint64_t seed = 0;
};

struct SpecHeadTrainResult {
  SpecHead head;
  std::vector<double> loss_curve;            // train loss before each update, plus final
  std::vector<double> validation_curve;      // same indexing
  double mean_baseline_validation_loss = 0;  // constant mean-state predictor

  nlohmann::json metadata(const SpecHeadTrainConfig& config) const;
};

/// Full-batch gradient descent on the training split.
SpecHeadTrainResult train_spechead(const SpecHead& head, const TraceSet& traces,
                                   const SpecHeadTrainConfig& config);

}  // namespace rds
