#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rds/toymodel.hpp"

namespace rds {

enum class QueryLabel { kHarmful, kBenign };
enum class ContinuationClass { kRefusal, kCompliance, kNeutral };

std::string to_string(QueryLabel label);
std::string to_string(ContinuationClass cls);
QueryLabel parse_query_label(const std::string& text);
ContinuationClass parse_continuation_class(const std::string& text);

/// Fixed split of a vocabulary into special and semantic token groups.
/// A pure function of the vocabulary size, so corpora and models agree on it
/// without storing it.
struct VocabPartition {
  TokenId bos = 0;
  TokenId eos = 1;
  TokenId sep = 2;
  std::vector<TokenId> refusal;
  std::vector<TokenId> compliance;
  std::vector<TokenId> harmful_topic;
  std::vector<TokenId> benign_topic;
  std::vector<TokenId> neutral;
  std::size_t vocab_size = 0;

  static VocabPartition for_vocab(std::size_t vocab_size);

  bool is_refusal(TokenId t) const;
  bool is_compliance(TokenId t) const;
  bool is_harmful_topic(TokenId t) const;

  /// Toy detokenizer: markers decode to short phrases, everything else to a placeholder word.
  std::string token_text(TokenId t) const;
  std::string decode(const std::vector<TokenId>& tokens) const;
};

struct Query {
  std::string id;
  std::vector<TokenId> tokens;  // BOS ... SEP
  QueryLabel label = QueryLabel::kBenign;
};

struct Continuation {
  std::string id;
  std::size_t query_index = 0;
  std::vector<TokenId> tokens;  // ends with EOS
  ContinuationClass cls = ContinuationClass::kNeutral;
};

struct SyntheticCorpus {
  VocabPartition vocab;
  std::vector<Query> queries;
  std::vector<Continuation> continuations;

  /// query tokens followed by each of its continuations, in record order.
  std::vector<std::vector<TokenId>> training_sequences() const;
  /// Queries only (no continuation), for classifier fitting and evaluation.
  std::vector<std::vector<TokenId>> query_sequences() const;
};

struct CorpusSpec {
  std::size_t harmful = 100;
  std::size_t benign = 100;
  double p_refuse = 0.5;
  std::size_t continuations_per_query = 1;
  std::size_t vocab_size = 64;
  std::size_t min_query_body = 4;
  std::size_t max_query_body = 8;
  std::size_t min_continuation = 3;
  std::size_t max_continuation = 6;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Harmful queries contain at least one harmful-topic token and are followed by
/// refusal continuations with probability p_refuse (compliance otherwise);
/// benign queries contain none and are followed by neutral continuations.
SyntheticCorpus gen_synthetic_corpus(const CorpusSpec& spec);

/// Split queries (and their continuations) into two corpora by a seeded shuffle.
/// Each label is split separately so both halves keep the class mix.
std::pair<SyntheticCorpus, SyntheticCorpus> split_corpus(const SyntheticCorpus& corpus,
                                                         double second_fraction,
                                                         std::uint64_t seed);

// JSONL: one record per line,
//   {"id", "tokens", "label", "kind": "query"|"continuation", "class", "query_id"}
// Records of the form {"text": ...} (optionally with "label"/"kind"/"id") are
// tokenized by hashing whitespace-separated words into non-special vocab buckets.
std::string to_jsonl(const SyntheticCorpus& corpus);
SyntheticCorpus from_jsonl(const std::string& text, std::size_t vocab_size);
void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& path);
SyntheticCorpus load_corpus(const std::filesystem::path& path, std::size_t vocab_size);

/// Whitespace tokenizer used for text-mode records.
std::vector<TokenId> hash_tokenize(const std::string& text, const VocabPartition& vocab);

}  // namespace rds
