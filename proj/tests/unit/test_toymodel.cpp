#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "convert.hpp"
#include "oracles.hpp"
#include "rds/errors.hpp"
#include "rds/toymodel.hpp"
#include "tempdir.hpp"

using namespace rds;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 16;
  c.seed = seed;
  return c;
}

// Init weights are tiny; spread them so gradients are not all near zero.
ToyTransformer spread_model(std::uint64_t seed) {
  ToyTransformer m = ToyTransformer::init(tiny_config(seed));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& view : parameter_views(m.mutable_weights()))
    for (double& x : view.values) x += normal(rng);
  return m;
}

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng() % 32);
  return t;
}

}  // namespace

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(tiny_config().validate());
  ModelConfig c = tiny_config();
  c.d_model = 9;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.vocab_size = 16;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ToyTransformer, ForwardShapesAndFinite) {
  const ToyTransformer m = ToyTransformer::init(tiny_config());
  const std::vector<TokenId> t{0, 5, 9, 2};
  const ForwardOutput out = m.forward(t);
  EXPECT_EQ(out.hidden.rows(), 4);
  EXPECT_EQ(out.hidden.cols(), 8);
  EXPECT_EQ(out.logits.cols(), 32);
  EXPECT_TRUE(out.hidden.allFinite());
  EXPECT_THROW(m.forward(std::vector<TokenId>(17, 3)), std::invalid_argument);
  EXPECT_THROW(m.forward(std::vector<TokenId>{}), std::invalid_argument);
  EXPECT_THROW(m.forward(std::vector<TokenId>{40}), std::invalid_argument);
}

TEST(ToyTransformer, CausalPrefixProperty) {
  const ToyTransformer m = spread_model(2);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto full = random_tokens(16, rng);
    const ForwardOutput whole = m.forward(full);
    for (std::size_t len : {1u, 5u, 11u}) {
      const ForwardOutput part = m.forward(std::span<const TokenId>(full.data(), len));
      EXPECT_LE((part.hidden - whole.hidden.topRows(static_cast<Eigen::Index>(len))).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(ToyTransformer, IncrementalDecodeMatchesForward) {
  const ToyTransformer m = spread_model(4);
  std::mt19937_64 rng(5);
  const auto tokens = random_tokens(12, rng);
  const ForwardOutput whole = m.forward(tokens);
  DecodeState state = m.start();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    // evaluate leaves the state alone
    const PositionResult probe = m.evaluate(state, tokens[t]);
    EXPECT_EQ(state.length(), t);
    const Vector h = m.step(state, tokens[t]);
    EXPECT_TRUE(h == probe.hidden);
    EXPECT_LE((h.transpose() - whole.hidden.row(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff(), 1e-10);
  }
  EXPECT_EQ(state.tokens(), tokens);
}

TEST(ToyTransformer, LmHeadIsTiedEmbeddingProduct) {
  const ToyTransformer m = spread_model(6);
  std::mt19937_64 rng(7);
  const oracle::Grid h = oracle::random_grid(1, 8, rng);
  const oracle::Grid expect = oracle::matmul(h, oracle::transpose(to_grid(m.weights().token_embedding)));
  const Vector got = m.lm_head(to_vector(h[0]));
  for (int v = 0; v < 32; ++v) EXPECT_NEAR(got[v], expect[0][static_cast<std::size_t>(v)], 1e-12);

  const auto tokens = random_tokens(6, rng);
  const ForwardOutput out = m.forward(tokens);
  EXPECT_LE((out.logits - out.hidden * m.weights().token_embedding.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ToyTransformer, EmbedReturnsEmbeddingRow) {
  const ToyTransformer m = ToyTransformer::init(tiny_config());
  EXPECT_TRUE(m.embed(7) == m.weights().token_embedding.row(7).transpose());
  EXPECT_THROW(m.embed(-1), std::invalid_argument);
  EXPECT_THROW(m.embed(32), std::invalid_argument);
}

TEST(ToyTransformer, InitIsSeeded) {
  EXPECT_EQ(ToyTransformer::init(tiny_config(9)).fingerprint(), ToyTransformer::init(tiny_config(9)).fingerprint());
  EXPECT_NE(ToyTransformer::init(tiny_config(9)).fingerprint(), ToyTransformer::init(tiny_config(10)).fingerprint());
}

TEST(ToyTransformer, StoreRoundTripWithinF32) {
  TempDir dir;
  const ToyTransformer m = spread_model(11);
  m.to_store().save(dir / "m.tsr");
  const ToyTransformer back = ToyTransformer::from_store(TensorStore::load(dir / "m.tsr"));
  EXPECT_EQ(back.config().n_layers, 2u);
  EXPECT_EQ(back.config().n_heads, 2u);
  EXPECT_EQ(back.config().max_seq, 16u);
  const std::vector<TokenId> t{0, 4, 8, 15, 23, 2};
  EXPECT_LE((back.forward(t).logits - m.forward(t).logits).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_EQ(back.fingerprint(), ToyTransformer::from_store(TensorStore::load(dir / "m.tsr")).fingerprint());
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  LayerNormWeights ln{Vector::Ones(6), Vector::Zero(6)};
  const Vector y = layer_norm((Vector(6) << 1, 2, 3, 4, 5, 60).finished(), ln);
  EXPECT_NEAR(y.mean(), 0.0, 1e-12);
  EXPECT_NEAR(y.squaredNorm() / 6.0, 1.0, 1e-4);
}

TEST(Gelu, DerivativeMatchesFiniteDifference) {
  for (double x = -4.0; x <= 4.0; x += 0.37)
    EXPECT_NEAR(gelu_derivative(x), (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6, 1e-6);
}

TEST(LmGradient, MatchesFiniteDifferences) {
  const ToyTransformer m = spread_model(12);
  std::mt19937_64 rng(13);
  const std::vector<std::vector<TokenId>> seqs{random_tokens(7, rng), random_tokens(5, rng)};
  TransformerWeights grad = zeros_like(m.weights());
  const double loss = lm_loss_and_grad(m, seqs, grad);
  EXPECT_NEAR(loss, lm_loss(m, seqs), 1e-10);

  ToyTransformer probe = m;
  auto views = parameter_views(probe.mutable_weights());
  const auto grads = parameter_views(static_cast<const TransformerWeights&>(grad));
  const double h = 1e-5;
  for (std::size_t v = 0; v < views.size(); ++v) {
    for (std::size_t idx = 0; idx < views[v].values.size(); idx += 1 + views[v].values.size() / 5) {
      double& x = views[v].values[idx];
      const double saved = x;
      x = saved + h;
      const double up = lm_loss(probe, seqs);
      x = saved - h;
      const double down = lm_loss(probe, seqs);
      x = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grads[v].values[idx], fd, 1e-6 + 1e-4 * std::abs(fd)) << views[v].name << "[" << idx << "]";
    }
  }
}

TEST(LmTraining, LossDecreasesAndIsDeterministic) {
  const ToyTransformer m = ToyTransformer::init(tiny_config(14));
  std::mt19937_64 rng(15);
  std::vector<std::vector<TokenId>> seqs;
  for (int i = 0; i < 6; ++i) seqs.push_back({0, 5 + i, 10 + i, 15 + i, 1});
  LmTrainConfig cfg;
  cfg.epochs = 40;
  const LmTrainResult a = train_lm(m, seqs, cfg);
  ASSERT_EQ(a.loss_curve.size(), 41u);
  EXPECT_LT(a.loss_curve.back(), 0.5 * a.loss_curve.front());
  const LmTrainResult b = train_lm(m, seqs, cfg);
  EXPECT_EQ(a.model.fingerprint(), b.model.fingerprint());
  EXPECT_EQ(a.loss_curve, b.loss_curve);
}

TEST(LmTraining, RejectsBadInput) {
  const ToyTransformer m = ToyTransformer::init(tiny_config());
  EXPECT_THROW(train_lm(m, {}, {}), std::invalid_argument);
  EXPECT_THROW(train_lm(m, {{0, 99}}, {}), std::invalid_argument);
  LmTrainConfig cfg;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train_lm(m, {{0, 4, 1}}, cfg), std::invalid_argument);
}
