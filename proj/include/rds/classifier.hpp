#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "rds/corpus.hpp"
#include "rds/numcore.hpp"
#include "rds/tensor_store.hpp"
#include "rds/toymodel.hpp"

namespace rds {

/// Hidden states with binary labels (1 = harmful, 0 = benign).
struct LabeledHiddenSet {
  Matrix states;
  std::vector<int> labels;

  void validate() const;
};

/// Row i is the top-layer state at the last token of query i.
LabeledHiddenSet collect_query_states(const ToyTransformer& model, const std::vector<Query>& queries);

/// PCA projection followed by a logistic read-out:
///   score(h) = sigmoid(w . components^T (h - mean) + bias)
/// Higher scores look more like the harmful queries the classifier was fit on.
class SafetyClassifier {
 public:
  SafetyClassifier() = default;
  SafetyClassifier(Vector mean, Matrix components, Vector weights, double bias);

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  std::size_t components_count() const { return static_cast<std::size_t>(components_.cols()); }
  const Vector& mean() const { return mean_; }
  const Matrix& components() const { return components_; }
  const Vector& weights() const { return weights_; }
  double bias() const { return bias_; }

  Vector project(const Vector& h) const;
  double logit(const Vector& h) const;
  double score(const Vector& h) const;
  /// Row-wise score; element i is bit-identical to score(states.row(i)).
  Vector score_batch(const Matrix& states) const;

  TensorStore to_store() const;
  /// Components are re-orthonormalized after the f32 round trip.
  static SafetyClassifier from_store(const TensorStore& store);

 private:
  Vector mean_;
  Matrix components_;
  Vector weights_;
  double bias_ = 0.0;
};

struct ClassifierFitConfig {
  std::size_t components = 4;
  std::size_t epochs = 500;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
};

struct ClassifierFit {
  SafetyClassifier classifier;
  double train_auc = 0.0;
  std::vector<double> loss_curve;

  nlohmann::json metadata(const ClassifierFitConfig& config) const;
};

/// PCA on all states pooled, then full-batch gradient descent on the logistic
/// loss from zero-initialized weights.
ClassifierFit fit_classifier(const LabeledHiddenSet& set, const ClassifierFitConfig& config);

}  // namespace rds
