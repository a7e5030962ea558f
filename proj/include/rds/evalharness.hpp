#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "rds/classifier.hpp"
#include "rds/corpus.hpp"
#include "rds/metrics.hpp"
#include "rds/safegen.hpp"
#include "rds/spechead.hpp"

namespace rds {

/// Decides whether a generated token sequence is a refusal.
class RefusalDetector {
 public:
  virtual ~RefusalDetector() = default;
  virtual bool is_refusal(const std::vector<TokenId>& output, const VocabPartition& vocab) const = 0;
};

/// Substring matching over the decoded text.
class StringRefusalMatcher : public RefusalDetector {
 public:
  static std::vector<std::string> default_patterns();

  explicit StringRefusalMatcher(std::vector<std::string> patterns = default_patterns(),
                                bool case_sensitive = false);
  /// One pattern per non-empty line.
  static StringRefusalMatcher from_file(const std::filesystem::path& path, bool case_sensitive = false);

  bool matches(const std::string& text) const;
  bool is_refusal(const std::vector<TokenId>& output, const VocabPartition& vocab) const override;

  const std::vector<std::string>& patterns() const { return patterns_; }
  bool case_sensitive() const { return case_sensitive_; }

 private:
  std::vector<std::string> patterns_;
  bool case_sensitive_;
};

/// Any refusal-marker token id counts as a refusal.
class TokenRefusalMatcher : public RefusalDetector {
 public:
  bool is_refusal(const std::vector<TokenId>& output, const VocabPartition& vocab) const override;
};

bool match_refusal(const std::string& text, const StringRefusalMatcher& matcher);

enum class OutputClass { kHarmfulOutput, kBenignOutput };
std::string to_string(OutputClass cls);

struct Judgement {
  OutputClass cls = OutputClass::kBenignOutput;
  int score = 0;  // 1 = compliant, 0 = refusal
};

Judgement judge(bool refused, QueryLabel label);
Judgement judge(const std::vector<TokenId>& output, QueryLabel label, const RefusalDetector& detector,
                const VocabPartition& vocab);

struct SampleOutcome {
  bool refusal = false;
  bool compliance_marker = false;  // output contains a compliance-marker token
};

struct QueryOutcome {
  QueryLabel label = QueryLabel::kBenign;
  std::vector<SampleOutcome> samples;
};

/// Any-of-n aggregation over the samples of each query. Percentages are over
/// the queries with the given label; a set with no queries reports 0.
struct ModeSummary {
  std::size_t harmful_queries = 0;
  std::size_t benign_queries = 0;
  double compliance_pct = 0.0;         // harmful queries with any compliant (non-refusal) sample
  double compliance_marker_pct = 0.0;  // harmful queries with any compliance-marker sample
  double harmful_refusal_pct = 0.0;    // harmful queries with any refusal sample
  double refusal_pct = 0.0;            // benign queries with any refusal sample
  std::size_t generated_tokens = 0;

  nlohmann::json to_json() const;
};

ModeSummary aggregate(const std::vector<QueryOutcome>& outcomes);

struct EvalConfig {
  std::size_t n_samples = 5;
  std::uint64_t seed = 0;
};

struct ModeEvaluation {
  GenConfig config;
  ModeSummary summary;
  std::vector<QueryOutcome> outcomes;
  double seconds = 0.0;
  double tokens_per_second = 0.0;
};

/// Runs every query `n_samples` times. Sample j of query q uses a generation seed
/// derived from (eval seed, query id, j); queries run in parallel.
ModeEvaluation evaluate_mode(const ToyTransformer& model, const SafetyClassifier* clf,
                             const SpecHead* head, const SyntheticCorpus& corpus,
                             const GenConfig& gen, const RefusalDetector& detector,
                             const EvalConfig& eval);

struct EvalReport {
  std::size_t n_samples = 0;
  std::map<std::string, ModeEvaluation> modes;
  std::map<std::string, double> classifier_auc;
  nlohmann::json metadata = nlohmann::json::object();

  /// Timing lives under "timing" so everything else can be compared byte-for-byte.
  nlohmann::json to_json(bool include_timing = true) const;
};

EvalReport evaluate(const ToyTransformer& model, const SafetyClassifier* clf, const SpecHead* head,
                    const SyntheticCorpus& corpus, const std::vector<GenConfig>& modes,
                    const RefusalDetector& detector, const EvalConfig& eval);

struct SelectionChoice {
  Selection selection = Selection::kArgmaxScore;
  ModeSummary baseline;  // no-defense on the validation corpus
  std::map<std::string, ModeSummary> tried;

  nlohmann::json to_json() const;
};

/// Picks the score direction on a validation corpus: among argmax-score and
/// argmin-score, the lowest compliance-marker rate whose benign refusal rate
/// exceeds the no-defense rate by at most `max_refusal_rise` points (the smallest
/// rise if neither qualifies). Ties keep argmax-score.
SelectionChoice choose_selection(const ToyTransformer& model, const SafetyClassifier& clf,
                                 const SpecHead* head, const SyntheticCorpus& validation,
                                 const GenConfig& rds, const RefusalDetector& detector,
                                 const EvalConfig& eval, double max_refusal_rise = 10.0);

// ---- scatter export -------------------------------------------------------------

struct ScatterRow {
  std::string query_id;
  QueryLabel label = QueryLabel::kBenign;
  ContinuationClass output_class = ContinuationClass::kNeutral;  // refusal or compliance
  std::size_t position = 0;                                      // 1-based generated index
  Vector hidden;
  Vector pcs;  // first four principal-component coordinates
  double score = 0.0;
};

struct ScatterExport {
  std::vector<ScatterRow> rows;
  std::size_t skipped = 0;  // requested positions past the end of an output
};

/// Generates once per query with `gen`, then re-runs the teacher over
/// prompt + output; position i uses the state of the i-th generated token.
/// The classifier needs at least four components.
ScatterExport export_scatter(const ToyTransformer& model, const SafetyClassifier& clf,
                             const SpecHead* head,
                             const SyntheticCorpus& corpus, const std::vector<std::size_t>& positions,
                             const GenConfig& gen, const RefusalDetector& detector);

inline constexpr const char* kScatterHeader = "query_id,label,output_class,position,pc1,pc2,pc3,pc4,score";

std::string scatter_csv(const ScatterExport& scatter);
void write_scatter_csv(const ScatterExport& scatter, const std::filesystem::path& path);

}  // namespace rds
