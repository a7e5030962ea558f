#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "convert.hpp"
#include "oracles.hpp"
#include "rds/classifier.hpp"
#include "rds/corpus.hpp"
#include "rds/errors.hpp"
#include "rds/metrics.hpp"
#include "rds/toymodel.hpp"

using namespace rds;

namespace {

// Two Gaussian clusters whose means sit `gap` standard deviations apart along a random direction.
LabeledHiddenSet clusters(std::size_t per_class, std::size_t d, double gap, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector dir(static_cast<Eigen::Index>(d));
  for (auto& x : dir) x = normal(rng);
  dir.normalize();
  LabeledHiddenSet set;
  set.states.resize(static_cast<Eigen::Index>(2 * per_class), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int y = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < d; ++j) set.states(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = normal(rng);
    set.states.row(static_cast<Eigen::Index>(i)) += (y ? gap / 2 : -gap / 2) * dir.transpose();
    set.labels.push_back(y);
  }
  return set;
}

}  // namespace

TEST(SafetyClassifier, HandBuiltExamples) {
  const SafetyClassifier zero(Vector::Zero(3), Matrix::Identity(3, 2), Vector::Zero(2), 0.0);
  EXPECT_EQ(zero.score((Vector(3) << 5, -2, 9).finished()), 0.5);

  const Vector mean = (Vector(3) << 1, 1, 1).finished();
  const SafetyClassifier c(mean, Matrix::Identity(3, 2), (Vector(2) << 2, -1).finished(), 0.5);
  EXPECT_DOUBLE_EQ(c.score(mean), oracle::sigmoid(0.5));
  const Vector h = (Vector(3) << 2, 3, 100).finished();
  EXPECT_DOUBLE_EQ(c.logit(h), 0.5 + 2 * 1 - 1 * 2);
  EXPECT_THROW(c.score(Vector::Zero(4)), std::invalid_argument);
  EXPECT_THROW(SafetyClassifier(mean, Matrix::Identity(3, 2), Vector::Zero(3), 0), std::invalid_argument);
}

TEST(SafetyClassifier, NullSpaceInvariance) {
  const LabeledHiddenSet set = clusters(40, 8, 3.0, 1);
  const SafetyClassifier clf = fit_classifier(set, {}).classifier;
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector h = to_vector(oracle::random_grid(1, 8, rng)[0]);
    Vector v = to_vector(oracle::random_grid(1, 8, rng)[0]);
    v -= clf.components() * (clf.components().transpose() * v);
    EXPECT_NEAR(clf.logit(h + 5.0 * v), clf.logit(h), 1e-9);
  }
}

TEST(SafetyClassifier, BatchIsBitIdentical) {
  const LabeledHiddenSet set = clusters(30, 6, 2.0, 3);
  const SafetyClassifier clf = fit_classifier(set, {}).classifier;
  const Vector batch = clf.score_batch(set.states);
  for (Eigen::Index i = 0; i < set.states.rows(); ++i) EXPECT_EQ(batch[i], clf.score(set.states.row(i).transpose()));
}

TEST(FitClassifier, SeparatedClustersReachPerfectAuc) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const LabeledHiddenSet set = clusters(50, 16, 6.0, seed);
    const ClassifierFit fit = fit_classifier(set, {});
    EXPECT_EQ(fit.train_auc, 1.0);
    EXPECT_EQ(auc(fit.classifier.score_batch(set.states), set.labels), 1.0);
    EXPECT_LT(fit.loss_curve.back(), fit.loss_curve.front());
    EXPECT_EQ(fit.loss_curve.size(), 501u);
  }
}

TEST(FitClassifier, OverlappingClustersAreNotPerfect) {
  const LabeledHiddenSet set = clusters(100, 8, 0.5, 7);
  const ClassifierFit fit = fit_classifier(set, {});
  EXPECT_GT(fit.train_auc, 0.5);
  EXPECT_LT(fit.train_auc, 1.0);
}

TEST(FitClassifier, MatchesDirectGradientDescentOracle) {
  const LabeledHiddenSet set = clusters(25, 6, 2.0, 8);
  ClassifierFitConfig cfg;
  cfg.components = 3;
  cfg.epochs = 200;
  cfg.learning_rate = 0.2;
  const SafetyClassifier clf = fit_classifier(set, cfg).classifier;

  // Same features, but the descent runs here in long double.
  const oracle::Grid comps = to_grid(clf.components());
  const std::size_t n = set.labels.size();
  oracle::Grid feats(n, std::vector<double>(3));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> centered(6);
    for (std::size_t j = 0; j < 6; ++j) centered[j] = set.states(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - clf.mean()[static_cast<Eigen::Index>(j)];
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> col(6);
      for (std::size_t j = 0; j < 6; ++j) col[j] = comps[j][c];
      feats[i][c] = oracle::dot(centered, col);
    }
  }
  std::vector<long double> w(3, 0.0L);
  long double b = 0.0L;
  for (std::size_t epoch = 0; epoch < 200; ++epoch) {
    std::vector<long double> gw(3, 0.0L);
    long double gb = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      long double z = b;
      for (std::size_t c = 0; c < 3; ++c) z += w[c] * feats[i][c];
      const long double r = 1.0L / (1.0L + std::exp(-z)) - set.labels[i];
      for (std::size_t c = 0; c < 3; ++c) gw[c] += r * feats[i][c] / n;
      gb += r / n;
    }
    for (std::size_t c = 0; c < 3; ++c) w[c] -= 0.2L * gw[c];
    b -= 0.2L * gb;
  }
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(clf.weights()[static_cast<Eigen::Index>(c)], static_cast<double>(w[c]), 1e-9);
  EXPECT_NEAR(clf.bias(), static_cast<double>(b), 1e-9);
}

TEST(FitClassifier, LabelFlipNegatesParameters) {
  LabeledHiddenSet set = clusters(30, 6, 2.0, 9);
  const SafetyClassifier a = fit_classifier(set, {}).classifier;
  for (int& y : set.labels) y = 1 - y;
  const SafetyClassifier b = fit_classifier(set, {}).classifier;
  EXPECT_LE((a.weights() + b.weights()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(a.bias(), -b.bias(), 1e-9);
}

TEST(FitClassifier, RankingMatchesLogitRanking) {
  const LabeledHiddenSet set = clusters(40, 6, 1.5, 10);
  const ClassifierFit fit = fit_classifier(set, {});
  Vector logits(set.states.rows());
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits[i] = fit.classifier.logit(set.states.row(i).transpose());
  EXPECT_DOUBLE_EQ(auc(fit.classifier.score_batch(set.states), set.labels), auc(logits, set.labels));
  EXPECT_DOUBLE_EQ(fit.train_auc, auc(logits, set.labels));
}

TEST(FitClassifier, Deterministic) {
  const LabeledHiddenSet set = clusters(30, 6, 2.0, 11);
  const ClassifierFit a = fit_classifier(set, {});
  const ClassifierFit b = fit_classifier(set, {});
  EXPECT_TRUE(a.classifier.weights() == b.classifier.weights());
  EXPECT_EQ(a.classifier.to_store().to_bytes(), b.classifier.to_store().to_bytes());
}

TEST(FitClassifier, RejectsBadInput) {
  LabeledHiddenSet set = clusters(10, 4, 2.0, 12);
  ClassifierFitConfig too_many;
  too_many.components = 5;
  EXPECT_THROW(fit_classifier(set, too_many), std::invalid_argument);
  LabeledHiddenSet one_class = set;
  for (int& y : one_class.labels) y = 1;
  EXPECT_THROW(fit_classifier(one_class, {}), std::invalid_argument);
  LabeledHiddenSet flat = set;
  flat.states.setConstant(2.0);
  EXPECT_THROW(fit_classifier(flat, {}), DegenerateDataError);
  set.labels.pop_back();
  EXPECT_THROW(fit_classifier(set, {}), std::invalid_argument);
}

TEST(SafetyClassifier, StoreRoundTrip) {
  const LabeledHiddenSet set = clusters(30, 8, 3.0, 13);
  const SafetyClassifier clf = fit_classifier(set, {}).classifier;
  const SafetyClassifier back = SafetyClassifier::from_store(TensorStore::from_bytes(clf.to_store().to_bytes()));
  const Matrix gram = back.components().transpose() * back.components();
  EXPECT_LE((gram - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((back.score_batch(set.states) - clf.score_batch(set.states)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(CollectQueryStates, UsesLastTokenState) {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq = 16;
  const ToyTransformer model = ToyTransformer::init(cfg);
  const std::vector<Query> queries{{"a", {0, 7, 8, 2}, QueryLabel::kHarmful}, {"b", {0, 9, 2}, QueryLabel::kBenign}};
  const LabeledHiddenSet set = collect_query_states(model, queries);
  EXPECT_EQ(set.labels, (std::vector<int>{1, 0}));
  EXPECT_TRUE(set.states.row(1) == model.forward(queries[1].tokens).hidden.row(2));
}
