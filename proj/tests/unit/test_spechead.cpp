#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "convert.hpp"
#include "oracles.hpp"
#include "rds/corpus.hpp"
#include "rds/errors.hpp"
#include "rds/spechead.hpp"
#include "rds/toymodel.hpp"

using namespace rds;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 16;
  c.seed = 3;
  return c;
}

struct Fixture {
  ToyTransformer model;
  std::vector<std::vector<TokenId>> seqs;
};

// A briefly trained model so hidden states carry structure worth predicting.
const Fixture& trained() {
  static const Fixture f = [] {
    CorpusSpec spec;
    spec.harmful = 20;
    spec.benign = 20;
    spec.vocab_size = 32;
    spec.seed = 4;
    spec.max_query_body = 5;
    spec.max_continuation = 4;
    const SyntheticCorpus corpus = gen_synthetic_corpus(spec);
    LmTrainConfig cfg;
    cfg.epochs = 15;
    const auto seqs = corpus.training_sequences();
    return Fixture{train_lm(ToyTransformer::init(tiny_config()), seqs, cfg).model, seqs};
  }();
  return f;
}

SpecHead spread_head(const ToyTransformer& model, std::uint64_t seed) {
  SpecHead head = SpecHead::init(model, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& view : parameter_views(head.mutable_weights()))
    for (double& x : view.values) x += normal(rng);
  return head;
}

}  // namespace

TEST(HarvestTraces, CountsAndContents) {
  const Fixture& f = trained();
  std::size_t expected = 0;
  for (const auto& s : f.seqs) expected += s.size() - 1;
  const TraceSet traces = harvest_traces(f.model, f.seqs, 0.2, 7);
  EXPECT_EQ(traces.train.size() + traces.validation.size(), expected);
  EXPECT_EQ(traces.validation.size(), static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(expected))));

  // Every validation triple must exist in the sequences at the recorded token.
  const ForwardOutput first = f.model.forward(f.seqs[0]);
  const TraceSet all_train = harvest_traces(f.model, {f.seqs[0]}, 0.01, 7);
  const std::size_t n = f.seqs[0].size() - 1;
  ASSERT_EQ(all_train.train.size() + all_train.validation.size(), n);
  for (std::size_t i = 0; i < all_train.train.size(); ++i) {
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    bool found = false;
    for (std::size_t t = 1; t < f.seqs[0].size() && !found; ++t) {
      found = all_train.train.next.row(r) == first.hidden.row(static_cast<Eigen::Index>(t)) &&
              all_train.train.prev.row(r) == first.hidden.row(static_cast<Eigen::Index>(t - 1)) &&
              all_train.train.tokens[i] == f.seqs[0][t];
    }
    EXPECT_TRUE(found) << "triple " << i;
    EXPECT_TRUE(all_train.train.embedding.row(r).transpose() == f.model.embed(all_train.train.tokens[i]));
  }
}

TEST(HarvestTraces, SeededAndValidated) {
  const Fixture& f = trained();
  const TraceSet a = harvest_traces(f.model, f.seqs, 0.25, 1);
  const TraceSet b = harvest_traces(f.model, f.seqs, 0.25, 1);
  EXPECT_EQ(a.validation.tokens, b.validation.tokens);
  EXPECT_TRUE(a.validation.next == b.validation.next);
  EXPECT_THROW(harvest_traces(f.model, f.seqs, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(harvest_traces(f.model, f.seqs, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(harvest_traces(f.model, {{0}}, 0.5, 1), std::invalid_argument);
}

TEST(SmoothL1, Definition) {
  Matrix p(1, 3), t(1, 3);
  p << 0.0, 0.5, 3.0;
  t << 0.0, 0.0, 0.0;
  EXPECT_DOUBLE_EQ(smooth_l1(p, t), (0.0 + 0.125 + 2.5) / 3.0);
  EXPECT_THROW(smooth_l1(p, Matrix::Zero(2, 3)), std::invalid_argument);
}

TEST(SpecHead, BatchIsBitIdentical) {
  const Fixture& f = trained();
  const SpecHead head = spread_head(f.model, 5);
  const Vector h = f.model.forward(f.seqs[1]).hidden.row(2).transpose();
  const Matrix emb = f.model.weights().token_embedding.topRows(10);
  const Matrix batch = head.predict_batch(h, emb);
  for (Eigen::Index i = 0; i < 10; ++i)
    EXPECT_TRUE(batch.row(i).transpose() == head.predict_hidden(h, emb.row(i).transpose()));
  EXPECT_THROW(head.predict_hidden(Vector::Zero(7), Vector::Zero(8)), std::invalid_argument);
}

TEST(SpecHead, InitTakesTeacherTopBlock) {
  const Fixture& f = trained();
  const SpecHead head = SpecHead::init(f.model, 6);
  const auto& top = f.model.weights().layers.back();
  EXPECT_TRUE(head.weights().wv == top.wv);
  EXPECT_TRUE(head.weights().w_out == top.w_out);
  EXPECT_TRUE(head.weights().out_norm.gain == f.model.weights().final_norm.gain);
  const Matrix stacked = head.weights().fuse_w;
  Matrix expect(16, 8);
  expect << Matrix::Identity(8, 8), Matrix::Identity(8, 8);
  EXPECT_LE((stacked - expect).cwiseAbs().maxCoeff(), 0.2);
  EXPECT_EQ(SpecHead::init(f.model, 6).to_store().to_bytes(), head.to_store().to_bytes());
}

TEST(SpecHead, StoreRoundTrip) {
  const Fixture& f = trained();
  const SpecHead head = spread_head(f.model, 7);
  const SpecHead back = SpecHead::from_store(TensorStore::from_bytes(head.to_store().to_bytes()));
  const TraceSet traces = harvest_traces(f.model, f.seqs, 0.2, 7);
  EXPECT_LE((predict_split(back, traces.validation) - predict_split(head, traces.validation)).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_NEAR(spechead_loss(back, traces.validation), spechead_loss(head, traces.validation), 1e-5);
}

TEST(SpecHeadGradient, MatchesFiniteDifferences) {
  const Fixture& f = trained();
  const SpecHead head = spread_head(f.model, 8);
  TraceSet traces = harvest_traces(f.model, {f.seqs[0], f.seqs[1]}, 0.2, 8);
  SpecHeadWeights grad = head.weights();
  const double loss = spechead_loss_and_grad(head, traces.train, grad);
  EXPECT_NEAR(loss, spechead_loss(head, traces.train), 1e-12);

  SpecHead probe = head;
  auto views = parameter_views(probe.mutable_weights());
  const auto grads = parameter_views(static_cast<const SpecHeadWeights&>(grad));
  const double h = 1e-6;
  for (std::size_t v = 0; v < views.size(); ++v) {
    for (std::size_t idx = 0; idx < views[v].values.size(); idx += 1 + views[v].values.size() / 6) {
      double& x = views[v].values[idx];
      const double saved = x;
      x = saved + h;
      const double up = spechead_loss(probe, traces.train);
      x = saved - h;
      const double down = spechead_loss(probe, traces.train);
      x = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grads[v].values[idx], fd, 1e-6 + 1e-4 * std::abs(fd)) << views[v].name << "[" << idx << "]";
    }
  }
}

TEST(TrainSpecHead, ZeroEpochsReturnsInit) {
  const Fixture& f = trained();
  const SpecHead head = SpecHead::init(f.model, 9);
  const TraceSet traces = harvest_traces(f.model, f.seqs, 0.2, 9);
  SpecHeadTrainConfig cfg;
  cfg.epochs = 0;
  const SpecHeadTrainResult r = train_spechead(head, traces, cfg);
  EXPECT_EQ(r.loss_curve.size(), 1u);
  EXPECT_EQ(r.head.to_store().to_bytes(), head.to_store().to_bytes());
}

TEST(TrainSpecHead, MonotoneAndBeatsMeanBaseline) {
  const Fixture& f = trained();
  const TraceSet traces = harvest_traces(f.model, f.seqs, 0.2, 10);
  const SpecHeadTrainResult r = train_spechead(SpecHead::init(f.model, 10), traces, {});
  ASSERT_EQ(r.loss_curve.size(), 51u);
  for (std::size_t i = 1; i < r.loss_curve.size(); ++i) EXPECT_LE(r.loss_curve[i], r.loss_curve[i - 1] + 1e-12) << i;
  EXPECT_LT(r.validation_curve.back(), r.mean_baseline_validation_loss);
  const double baseline = smooth_l1(mean_state_prediction(traces.train, traces.validation.size()), traces.validation.next);
  EXPECT_NEAR(r.mean_baseline_validation_loss, baseline, 1e-12);
  EXPECT_LT(mean_relative_error(predict_split(r.head, traces.validation), traces.validation.next),
            mean_relative_error(mean_state_prediction(traces.train, traces.validation.size()), traces.validation.next));

  const SpecHeadTrainResult again = train_spechead(SpecHead::init(f.model, 10), traces, {});
  EXPECT_EQ(again.loss_curve, r.loss_curve);
}
