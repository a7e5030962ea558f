#pragma once

#include <random>

#include "rds/classifier.hpp"
#include "rds/corpus.hpp"
#include "rds/spechead.hpp"
#include "rds/toymodel.hpp"

// Small untrained model with widened weights, so logits and scores are far from flat.
struct TinyStack {
  rds::ToyTransformer model;
  rds::SafetyClassifier clf;
  rds::SpecHead head;
  rds::SyntheticCorpus corpus;
};

inline rds::ModelConfig tiny_model_config(std::uint64_t seed) {
  rds::ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 24;
  c.seed = seed;
  return c;
}

inline TinyStack make_tiny_stack(std::uint64_t seed) {
  rds::ToyTransformer model = rds::ToyTransformer::init(tiny_model_config(seed));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.4);
  for (auto& view : rds::parameter_views(model.mutable_weights()))
    for (double& x : view.values) x += normal(rng);

  rds::CorpusSpec spec;
  spec.harmful = 12;
  spec.benign = 12;
  spec.vocab_size = 32;
  spec.max_query_body = 6;
  spec.seed = seed;
  rds::SyntheticCorpus corpus = rds::gen_synthetic_corpus(spec);

  rds::ClassifierFitConfig cfg;
  cfg.epochs = 100;
  rds::SafetyClassifier clf = rds::fit_classifier(rds::collect_query_states(model, corpus.queries), cfg).classifier;
  rds::SpecHead head = rds::SpecHead::init(model, seed);
  return {std::move(model), std::move(clf), std::move(head), std::move(corpus)};
}
