#include "rds/safegen.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "rds/errors.hpp"

namespace rds {

std::string to_string(GenMode mode) {
  switch (mode) {
    case GenMode::kNoDefense: return "no-defense";
    case GenMode::kRdsFull: return "rds-full";
    case GenMode::kRdsSpec: return "rds-spec";
  }
  return "?";
}

std::string to_string(Selection selection) {
  switch (selection) {
    case Selection::kArgmaxScore: return "argmax-score";
    case Selection::kArgminScore: return "argmin-score";
    case Selection::kSampleByScore: return "sample-by-score";
  }
  return "?";
}

std::string to_string(HiddenSource source) {
  return source == HiddenSource::kTeacher ? "teacher" : "spec";
}

GenMode parse_gen_mode(const std::string& text) {
  if (text == "no-defense") return GenMode::kNoDefense;
  if (text == "rds-full") return GenMode::kRdsFull;
  if (text == "rds-spec") return GenMode::kRdsSpec;
  throw InvalidConfiguration("unknown mode '" + text + "' (expected no-defense, rds-full or rds-spec)");
}

Selection parse_selection(const std::string& text) {
  if (text == "argmax-score") return Selection::kArgmaxScore;
  if (text == "argmin-score") return Selection::kArgminScore;
  if (text == "sample-by-score") return Selection::kSampleByScore;
  throw InvalidConfiguration("unknown selection '" + text + "'");
}

void GenConfig::validate() const {
  if (k < 1) throw InvalidConfiguration("k must be >= 1");
  if (!(blend >= 0.0 && blend <= 1.0)) throw InvalidConfiguration("blend must be in [0, 1]");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw InvalidConfiguration("temperature must be finite and >= 0");
  }
  if (resync_interval && *resync_interval == 0) {
    throw InvalidConfiguration("resync_interval must be >= 1 when set");
  }
}

nlohmann::json GenConfig::to_json() const {
  nlohmann::json j = {{"mode", to_string(mode)},
                      {"k", k},
                      {"max_new_tokens", max_new_tokens},
                      {"temperature", temperature},
                      {"selection", to_string(selection)},
                      {"blend", blend},
                      {"stop_tokens", stop_tokens},
                      {"seed", seed}};
  j["resync_interval"] = resync_interval ? nlohmann::json(*resync_interval) : nlohmann::json(nullptr);
  return j;
}

GenConfig GenConfig::from_json(const nlohmann::json& j, GenConfig base) {
  try {
    if (j.contains("mode")) base.mode = parse_gen_mode(j.at("mode").get<std::string>());
    if (j.contains("k")) base.k = j.at("k").get<std::size_t>();
    if (j.contains("max_new_tokens")) base.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
    if (j.contains("temperature")) base.temperature = j.at("temperature").get<double>();
    if (j.contains("selection")) base.selection = parse_selection(j.at("selection").get<std::string>());
    if (j.contains("blend")) base.blend = j.at("blend").get<double>();
    if (j.contains("stop_tokens")) base.stop_tokens = j.at("stop_tokens").get<std::vector<TokenId>>();
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("resync_interval")) {
      const auto& r = j.at("resync_interval");
      base.resync_interval = r.is_null() ? std::nullopt : std::optional<std::size_t>(r.get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfiguration(std::string("generation config: ") + e.what());
  }
  return base;
}

Candidates candidates(const Vector& logits, std::size_t k, double temperature) {
  if (k < 1 || k > static_cast<std::size_t>(logits.size())) {
    throw std::invalid_argument("candidates: k must be in [1, vocab]");
  }
  if (temperature < 0.0) throw std::invalid_argument("candidates: negative temperature");
  Candidates out;
  Vector probs;
  if (temperature == 0.0) {
    probs = Vector::Zero(logits.size());
    const double best = logits.maxCoeff();
    const auto ties = (logits.array() == best).count();
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      if (logits[i] == best) probs[i] = 1.0 / static_cast<double>(ties);
    }
    // Order by logits so the remaining candidates follow the T -> 0 limit ranking.
    const TopK top = top_k(logits, k);
    out.ids.assign(top.indices.begin(), top.indices.end());
  } else {
    probs = softmax(logits / temperature);
    const TopK top = top_k(probs, k);
    out.ids.assign(top.indices.begin(), top.indices.end());
  }
  for (TokenId id : out.ids) out.probs.push_back(probs[id]);
  return out;
}

Candidates draw_candidates(const Vector& logits, std::size_t k, double temperature,
                           std::mt19937_64& rng) {
  if (temperature == 0.0) return candidates(logits, k, temperature);
  if (k < 1 || k > static_cast<std::size_t>(logits.size())) {
    throw std::invalid_argument("draw_candidates: k must be in [1, vocab]");
  }
  const Vector probs = softmax(logits / temperature);
  std::uniform_real_distribution<double> uniform(std::numeric_limits<double>::min(), 1.0);
  Vector keys(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    keys[i] = logits[i] / temperature - std::log(-std::log(uniform(rng)));
  }
  const TopK top = top_k(keys, k);
  Candidates out;
  for (std::size_t idx : top.indices) {
    out.ids.push_back(static_cast<TokenId>(idx));
    out.probs.push_back(probs[static_cast<Eigen::Index>(idx)]);
  }
  return out;
}

std::vector<double> blended_values(const std::vector<double>& probs,
                                   const std::vector<double>& scores, const GenConfig& cfg) {
  if (probs.size() != scores.size() || probs.empty()) {
    throw std::invalid_argument("blended_values: probs and scores must be non-empty and equal length");
  }
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = cfg.selection == Selection::kArgminScore ? 1.0 - scores[i] : scores[i];
    const double p = total > 0.0 ? probs[i] / total : 1.0 / static_cast<double>(probs.size());
    out[i] = cfg.blend == 0.0 ? s : cfg.blend * p + (1.0 - cfg.blend) * s;
  }
  return out;
}

namespace {

std::size_t sample_proportional(const std::vector<double>& weights, std::mt19937_64& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double u = uniform(rng);
  if (!(total > 0.0)) return std::min(weights.size() - 1, static_cast<std::size_t>(u * static_cast<double>(weights.size())));
  const double target = u * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  // Rounding left target at the very top: fall back to the last positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

}  // namespace

std::size_t select_candidate(const std::vector<TokenId>& ids, const std::vector<double>& values,
                             Selection selection, std::mt19937_64& rng) {
  if (ids.size() != values.size() || ids.empty()) {
    throw std::invalid_argument("select_candidate: ids and values must be non-empty and equal length");
  }
  if (selection == Selection::kSampleByScore) return sample_proportional(values, rng);
  std::size_t best = 0;
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (values[i] > values[best] || (values[i] == values[best] && ids[i] < ids[best])) best = i;
  }
  return best;
}

nlohmann::json StepTrace::to_json() const {
  return {{"step", step},
          {"candidate_ids", candidate_ids},
          {"candidate_probs", candidate_probs},
          {"candidate_scores", candidate_scores},
          {"selected", selected},
          {"source", to_string(source)}};
}

nlohmann::json GenResult::to_json(bool include_steps) const {
  nlohmann::json j = {{"output", output},
                      {"timing", {{"seconds", seconds}, {"tokens_per_second", tokens_per_second}}}};
  if (include_steps) {
    nlohmann::json steps_json = nlohmann::json::array();
    for (const auto& s : steps) steps_json.push_back(s.to_json());
    j["steps"] = std::move(steps_json);
  }
  return j;
}

RdsState prefill(const ToyTransformer& model, const std::vector<TokenId>& prompt) {
  if (prompt.empty()) throw std::invalid_argument("prefill: empty prompt");
  if (prompt.size() > model.config().max_seq) {
    throw std::invalid_argument("prefill: prompt longer than max_seq");
  }
  RdsState state;
  state.teacher = model.start();
  for (TokenId t : prompt) state.hidden = model.step(state.teacher, t);
  state.logits = model.lm_head(state.hidden);
  return state;
}

StepTrace step_rds(const ToyTransformer& model, const SafetyClassifier& clf, const SpecHead* head,
                   RdsState& state, const GenConfig& cfg, std::mt19937_64& rng,
                   std::size_t step_index) {
  StepTrace trace;
  trace.step = step_index;
  Candidates cand = draw_candidates(state.logits, cfg.k, cfg.temperature, rng);
  trace.candidate_ids = cand.ids;
  trace.candidate_probs = cand.probs;
  const std::size_t k = cand.ids.size();

  if (cfg.mode == GenMode::kRdsFull) {
    trace.source = HiddenSource::kTeacher;
    std::vector<PositionResult> evaluated;
    evaluated.reserve(k);
    for (TokenId id : cand.ids) {
      evaluated.push_back(model.evaluate(state.teacher, id));
      trace.candidate_scores.push_back(clf.score(evaluated.back().hidden));
    }
    const std::size_t pick =
        select_candidate(cand.ids, blended_values(cand.probs, trace.candidate_scores, cfg), cfg.selection, rng);
    trace.selected = cand.ids[pick];
    model.commit(state.teacher, evaluated[pick]);
    state.hidden = std::move(evaluated[pick].hidden);
  } else if (cfg.mode == GenMode::kRdsSpec) {
    if (head == nullptr) throw InvalidConfiguration("rds-spec mode needs a speculative head");
    trace.source = HiddenSource::kSpec;
    Matrix embeddings(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(model.config().d_model));
    for (std::size_t i = 0; i < k; ++i) {
      embeddings.row(static_cast<Eigen::Index>(i)) = model.embed(cand.ids[i]).transpose();
    }
    const Matrix predicted = head->predict_batch(state.hidden, embeddings);
    for (std::size_t i = 0; i < k; ++i) {
      trace.candidate_scores.push_back(clf.score(predicted.row(static_cast<Eigen::Index>(i)).transpose()));
    }
    const std::size_t pick =
        select_candidate(cand.ids, blended_values(cand.probs, trace.candidate_scores, cfg), cfg.selection, rng);
    trace.selected = cand.ids[pick];
    state.hidden = predicted.row(static_cast<Eigen::Index>(pick)).transpose();
    state.pending.push_back(trace.selected);
    ++state.steps_since_sync;
    if (cfg.resync_interval && state.steps_since_sync >= *cfg.resync_interval) {
      for (TokenId t : state.pending) state.hidden = model.step(state.teacher, t);
      state.pending.clear();
      state.steps_since_sync = 0;
    }
  } else {
    throw InvalidConfiguration("step_rds called in no-defense mode");
  }
  state.logits = model.lm_head(state.hidden);
  return trace;
}

namespace {

StepTrace step_plain(const ToyTransformer& model, RdsState& state, const GenConfig& cfg,
                     std::mt19937_64& rng, std::size_t step_index) {
  StepTrace trace;
  trace.step = step_index;
  trace.source = HiddenSource::kTeacher;
  const Candidates cand = candidates(state.logits, cfg.k, cfg.temperature);
  trace.candidate_ids = cand.ids;
  trace.candidate_probs = cand.probs;
  const std::size_t pick = cfg.temperature == 0.0 ? 0 : sample_proportional(cand.probs, rng);
  trace.selected = cand.ids[pick];
  state.hidden = model.step(state.teacher, trace.selected);
  state.logits = model.lm_head(state.hidden);
  return trace;
}

}  // namespace

GenResult generate(const ToyTransformer& model, const SafetyClassifier* clf, const SpecHead* head,
                   const std::vector<TokenId>& prompt, const GenConfig& cfg) {
  cfg.validate();
  if (cfg.k > model.config().vocab_size) throw InvalidConfiguration("k exceeds the vocabulary size");
  if (cfg.mode != GenMode::kNoDefense && clf == nullptr) {
    throw InvalidConfiguration(to_string(cfg.mode) + " mode needs a classifier");
  }
  if (cfg.mode == GenMode::kRdsSpec && head == nullptr) {
    throw InvalidConfiguration("rds-spec mode needs a speculative head");
  }
  if (clf != nullptr && clf->dim() != model.config().d_model) {
    throw InvalidConfiguration("classifier dim does not match the model");
  }
  if (head != nullptr && head->dim() != model.config().d_model) {
    throw InvalidConfiguration("speculative head dim does not match the model");
  }

  const auto start = std::chrono::steady_clock::now();
  GenResult result;
  std::mt19937_64 rng(cfg.seed);
  RdsState state = prefill(model, prompt);
  const std::size_t budget = std::min(cfg.max_new_tokens, model.config().max_seq - prompt.size());
  for (std::size_t i = 0; i < budget; ++i) {
    StepTrace trace = cfg.mode == GenMode::kNoDefense
                          ? step_plain(model, state, cfg, rng, i)
                          : step_rds(model, *clf, head, state, cfg, rng, i);
    const TokenId selected = trace.selected;
    result.steps.push_back(std::move(trace));
    if (std::find(cfg.stop_tokens.begin(), cfg.stop_tokens.end(), selected) != cfg.stop_tokens.end()) break;
    result.output.push_back(selected);
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.tokens_per_second =
      result.seconds > 0.0 ? static_cast<double>(result.output.size()) / result.seconds : 0.0;
  return result;
}

const BenchMode* BenchReport::find(GenMode mode) const {
  for (const auto& m : modes) {
    if (m.mode == mode) return &m;
  }
  return nullptr;
}

std::optional<double> BenchReport::spec_over_full() const {
  const BenchMode* spec = find(GenMode::kRdsSpec);
  const BenchMode* full = find(GenMode::kRdsFull);
  if (spec == nullptr || full == nullptr || full->median_tokens_per_second <= 0.0) return std::nullopt;
  return spec->median_tokens_per_second / full->median_tokens_per_second;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json modes_json = nlohmann::json::object();
  for (const auto& m : modes) {
    modes_json[to_string(m.mode)] = {{"median_tokens_per_second", m.median_tokens_per_second},
                                     {"tokens_per_second", m.tokens_per_second},
                                     {"tokens", m.tokens}};
  }
  nlohmann::json j = {{"prompts", prompts},
                      {"warmup", warmup},
                      {"max_new_tokens", max_new_tokens},
                      {"k", k},
                      {"modes", modes_json}};
  const auto ratio = spec_over_full();
  j["rds_spec_over_rds_full"] = ratio ? nlohmann::json(*ratio) : nlohmann::json(nullptr);
  return j;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BenchReport bench_generate(const ToyTransformer& model, const SafetyClassifier& clf,
                           const SpecHead& head, const std::vector<std::vector<TokenId>>& prompts,
                           const std::vector<GenConfig>& configs, std::size_t warmup) {
  if (prompts.empty()) throw std::invalid_argument("bench_generate: no prompts");
  if (configs.empty()) throw std::invalid_argument("bench_generate: no modes");
  BenchReport report;
  report.prompts = prompts.size();
  report.warmup = warmup;
  report.max_new_tokens = configs.front().max_new_tokens;
  report.k = configs.front().k;
  for (const auto& base : configs) {
    if (base.max_new_tokens != report.max_new_tokens) {
      throw std::invalid_argument("bench_generate: modes must share max_new_tokens");
    }
    GenConfig cfg = base;
    cfg.stop_tokens.clear();
    for (std::size_t w = 0; w < warmup; ++w) generate(model, &clf, &head, prompts[w % prompts.size()], cfg);
    BenchMode mode{cfg.mode, 0.0, {}, 0};
    for (const auto& prompt : prompts) {
      const GenResult r = generate(model, &clf, &head, prompt, cfg);
      mode.tokens_per_second.push_back(r.tokens_per_second);
      mode.tokens += r.output.size();
    }
    mode.median_tokens_per_second = median(mode.tokens_per_second);
    report.modes.push_back(std::move(mode));
  }
  return report;
}

}  // namespace rds
