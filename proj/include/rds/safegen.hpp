#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "rds/classifier.hpp"
#include "rds/spechead.hpp"
#include "rds/toymodel.hpp"

namespace rds {

enum class GenMode { kNoDefense, kRdsFull, kRdsSpec };
enum class Selection { kArgmaxScore, kArgminScore, kSampleByScore };
enum class HiddenSource { kTeacher, kSpec };

std::string to_string(GenMode mode);
std::string to_string(Selection selection);
std::string to_string(HiddenSource source);
/// Throw InvalidConfiguration on unknown names.
GenMode parse_gen_mode(const std::string& text);
Selection parse_selection(const std::string& text);

struct GenConfig {
  GenMode mode = GenMode::kNoDefense;
  std::size_t k = 10;
  std::size_t max_new_tokens = 32;
  // 0 selects greedy decoding and deterministic candidate sets.
  double temperature = 1.0;
  Selection selection = Selection::kArgmaxScore;
  double blend = 0.0;
  std::optional<std::size_t> resync_interval;
  std::vector<TokenId> stop_tokens;
  std::uint64_t seed = 0;

  /// Throws InvalidConfiguration.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep the values already in `base`.
  static GenConfig from_json(const nlohmann::json& j, GenConfig base);
};

struct Candidates {
  std::vector<TokenId> ids;
  std::vector<double> probs;  // softmax(logits / T) of each id
};

/// The k most probable tokens of softmax(logits / temperature), descending, ties
/// to the lower id. temperature 0 is the T -> 0 limit (all mass on the argmax).
Candidates candidates(const Vector& logits, std::size_t k, double temperature);

/// What the generation loop actually uses: candidates() at temperature 0, and
/// k draws without replacement from softmax(logits / T) otherwise (Gumbel top-k),
/// reported in draw order.
Candidates draw_candidates(const Vector& logits, std::size_t k, double temperature,
                           std::mt19937_64& rng);

/// value_i = blend * p_i / sum(p) + (1 - blend) * s'_i, with s' = 1 - score for
/// argmin selection and the score otherwise.
std::vector<double> blended_values(const std::vector<double>& probs,
                                   const std::vector<double>& scores, const GenConfig& cfg);

/// Index into `ids` of the selected candidate. Deterministic selections take the
/// largest value, ties to the lower token id; sample-by-score draws proportionally.
std::size_t select_candidate(const std::vector<TokenId>& ids, const std::vector<double>& values,
                             Selection selection, std::mt19937_64& rng);

struct StepTrace {
  std::size_t step = 0;
  std::vector<TokenId> candidate_ids;
  std::vector<double> candidate_probs;
  std::vector<double> candidate_scores;  // empty in no-defense mode
  TokenId selected = 0;
  HiddenSource source = HiddenSource::kTeacher;

  nlohmann::json to_json() const;
};

struct GenResult {
  std::vector<TokenId> output;
  std::vector<StepTrace> steps;
  double seconds = 0.0;
  double tokens_per_second = 0.0;

  nlohmann::json to_json(bool include_steps) const;
};

/// Decoding state shared by the step functions. `hidden` is the state of the
/// last token and `logits` its LM-head output; in rds-spec mode both may come
/// from the speculative head, with `pending` holding tokens the teacher has not seen.
struct RdsState {
  DecodeState teacher;
  Vector hidden;
  Vector logits;
  std::vector<TokenId> pending;
  std::size_t steps_since_sync = 0;
};

/// Runs the teacher over the prompt.
RdsState prefill(const ToyTransformer& model, const std::vector<TokenId>& prompt);

/// One safety-guided step (rds-full or rds-spec), advancing `state`.
StepTrace step_rds(const ToyTransformer& model, const SafetyClassifier& clf, const SpecHead* head,
                   RdsState& state, const GenConfig& cfg, std::mt19937_64& rng,
                   std::size_t step_index);

/// Throws InvalidConfiguration when the mode needs a missing component and
/// std::invalid_argument for prompts that are empty or do not fit.
GenResult generate(const ToyTransformer& model, const SafetyClassifier* clf, const SpecHead* head,
                   const std::vector<TokenId>& prompt, const GenConfig& cfg);

struct BenchMode {
  GenMode mode;
  double median_tokens_per_second = 0.0;
  std::vector<double> tokens_per_second;  // per prompt, warmup excluded
  std::size_t tokens = 0;
};

struct BenchReport {
  std::vector<BenchMode> modes;
  std::size_t prompts = 0;
  std::size_t warmup = 0;
  std::size_t max_new_tokens = 0;
  std::size_t k = 0;

  const BenchMode* find(GenMode mode) const;
  /// rds-spec / rds-full median ratio, if both modes ran.
  std::optional<double> spec_over_full() const;
  nlohmann::json to_json() const;
};

/// Median tokens/sec per mode over the prompts, after `warmup` uncounted runs.
/// Stop tokens are cleared so every run emits the same count.
BenchReport bench_generate(const ToyTransformer& model, const SafetyClassifier& clf,
                           const SpecHead& head, const std::vector<std::vector<TokenId>>& prompts,
                           const std::vector<GenConfig>& configs, std::size_t warmup = 2);

}  // namespace rds
