#include "rds/classifier.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "rds/errors.hpp"
#include "rds/metrics.hpp"

namespace rds {

void LabeledHiddenSet::validate() const {
  if (static_cast<std::size_t>(states.rows()) != labels.size()) {
    throw std::invalid_argument("LabeledHiddenSet: row count does not match label count");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("LabeledHiddenSet: labels must be 0 or 1");
  }
}

LabeledHiddenSet collect_query_states(const ToyTransformer& model, const std::vector<Query>& queries) {
  LabeledHiddenSet set;
  set.states.resize(static_cast<Eigen::Index>(queries.size()),
                    static_cast<Eigen::Index>(model.config().d_model));
  set.labels.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& tokens = queries[i].tokens;
    if (tokens.size() > model.config().max_seq) {
      throw std::invalid_argument("query '" + queries[i].id + "' longer than max_seq");
    }
    const ForwardOutput out = model.forward(tokens);
    set.states.row(static_cast<Eigen::Index>(i)) = out.hidden.row(out.hidden.rows() - 1);
    set.labels.push_back(queries[i].label == QueryLabel::kHarmful ? 1 : 0);
  }
  return set;
}

SafetyClassifier::SafetyClassifier(Vector mean, Matrix components, Vector weights, double bias)
    : mean_(std::move(mean)),
      components_(std::move(components)),
      weights_(std::move(weights)),
      bias_(bias) {
  if (components_.rows() != mean_.size() || components_.cols() != weights_.size() ||
      weights_.size() < 1) {
    throw std::invalid_argument("SafetyClassifier: inconsistent parameter shapes");
  }
  if (!mean_.allFinite() || !components_.allFinite() || !weights_.allFinite() || !std::isfinite(bias_)) {
    throw std::invalid_argument("SafetyClassifier: non-finite parameters");
  }
}

Vector SafetyClassifier::project(const Vector& h) const {
  if (static_cast<std::size_t>(h.size()) != dim()) {
    throw std::invalid_argument("SafetyClassifier: hidden state has dim " + std::to_string(h.size()) +
                                ", expected " + std::to_string(dim()));
  }
  return pca_project(h, mean_, components_);
}

double SafetyClassifier::logit(const Vector& h) const {
  const Vector m = project(h);
  double acc = bias_;
  for (Eigen::Index i = 0; i < m.size(); ++i) acc += weights_[i] * m[i];
  return acc;
}

double SafetyClassifier::score(const Vector& h) const { return sigmoid(logit(h)); }

Vector SafetyClassifier::score_batch(const Matrix& states) const {
  Vector out(states.rows());
  for (Eigen::Index r = 0; r < states.rows(); ++r) out[r] = score(states.row(r).transpose());
  return out;
}

TensorStore SafetyClassifier::to_store() const {
  TensorStore store;
  store.put("u", mean_);
  store.put("V", components_);
  store.put("W", weights_);
  store.put_scalar("b", bias_);
  return store;
}

SafetyClassifier SafetyClassifier::from_store(const TensorStore& store) {
  Matrix components = store.matrix("V");
  // Modified Gram-Schmidt in column order restores orthonormality lost to f32.
  for (Eigen::Index j = 0; j < components.cols(); ++j) {
    for (Eigen::Index i = 0; i < j; ++i) {
      components.col(j) -= components.col(i).dot(components.col(j)) * components.col(i);
    }
    const double norm = components.col(j).norm();
    if (norm == 0.0) throw std::invalid_argument("classifier store: degenerate components");
    components.col(j) /= norm;
  }
  return SafetyClassifier(store.vector("u"), std::move(components), store.vector("W"),
                          store.scalar("b"));
}

nlohmann::json ClassifierFit::metadata(const ClassifierFitConfig& config) const {
  return {{"m", classifier.components_count()},
          {"d", classifier.dim()},
          {"training",
           {{"epochs", config.epochs},
            {"learning_rate", config.learning_rate},
            {"seed", config.seed},
            {"train_auc", train_auc},
            {"final_loss", loss_curve.empty() ? 0.0 : loss_curve.back()}}}};
}

ClassifierFit fit_classifier(const LabeledHiddenSet& set, const ClassifierFitConfig& config) {
  set.validate();
  std::size_t positives = 0;
  for (int y : set.labels) positives += static_cast<std::size_t>(y);
  if (positives == 0 || positives == set.labels.size()) {
    throw std::invalid_argument("fit_classifier: both harmful and benign examples are required");
  }
  if (!(config.learning_rate > 0.0)) {
    throw std::invalid_argument("fit_classifier: learning rate must be > 0");
  }

  const PcaBasis basis = pca_fit(set.states, config.components);
  const Matrix features = pca_project_rows(set.states, basis.mean, basis.components);
  Vector labels(static_cast<Eigen::Index>(set.labels.size()));
  for (std::size_t i = 0; i < set.labels.size(); ++i) labels[static_cast<Eigen::Index>(i)] = set.labels[i];

  Vector w = Vector::Zero(features.cols());
  double b = 0.0;
  ClassifierFit out;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const LogisticGradient g = logistic_loss_and_grad(features, labels, w, b);
    if (!std::isfinite(g.loss) || !g.weights.allFinite() || !std::isfinite(g.bias)) {
      throw TrainingFailure("fit_classifier: diverged at epoch " + std::to_string(epoch));
    }
    out.loss_curve.push_back(g.loss);
    w -= config.learning_rate * g.weights;
    b -= config.learning_rate * g.bias;
  }
  out.loss_curve.push_back(logistic_loss_and_grad(features, labels, w, b).loss);
  if (!w.allFinite() || !std::isfinite(b)) throw TrainingFailure("fit_classifier: diverged");

  out.classifier = SafetyClassifier(basis.mean, basis.components, w, b);
  // Ranked on logits: identical ordering to the scores, but immune to sigmoid saturation ties.
  Vector logits(set.states.rows());
  for (Eigen::Index r = 0; r < logits.size(); ++r) logits[r] = out.classifier.logit(set.states.row(r).transpose());
  out.train_auc = auc(logits, set.labels);
  return out;
}

}  // namespace rds
