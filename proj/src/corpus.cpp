#include "rds/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "rds/errors.hpp"

namespace rds {

std::string to_string(QueryLabel label) {
  return label == QueryLabel::kHarmful ? "harmful" : "benign";
}

std::string to_string(ContinuationClass cls) {
  switch (cls) {
    case ContinuationClass::kRefusal: return "refusal";
    case ContinuationClass::kCompliance: return "compliance";
    case ContinuationClass::kNeutral: return "neutral";
  }
  return "neutral";
}

QueryLabel parse_query_label(const std::string& text) {
  if (text == "harmful") return QueryLabel::kHarmful;
  if (text == "benign") return QueryLabel::kBenign;
  throw std::invalid_argument("unknown query label '" + text + "'");
}

ContinuationClass parse_continuation_class(const std::string& text) {
  if (text == "refusal") return ContinuationClass::kRefusal;
  if (text == "compliance") return ContinuationClass::kCompliance;
  if (text == "neutral") return ContinuationClass::kNeutral;
  throw std::invalid_argument("unknown continuation class '" + text + "'");
}

VocabPartition VocabPartition::for_vocab(std::size_t vocab_size) {
  if (vocab_size < 32) throw std::invalid_argument("VocabPartition: vocab_size must be >= 32");
  VocabPartition p;
  p.vocab_size = vocab_size;
  const std::size_t rest = vocab_size - 3;
  const std::size_t markers = std::max<std::size_t>(2, rest / 16);
  const std::size_t topics = std::max<std::size_t>(4, rest / 5);
  TokenId next = 3;
  auto take = [&next](std::vector<TokenId>& group, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) group.push_back(next++);
  };
  take(p.refusal, markers);
  take(p.compliance, markers);
  take(p.harmful_topic, topics);
  take(p.benign_topic, topics);
  take(p.neutral, vocab_size - static_cast<std::size_t>(next));
  return p;
}

namespace {
bool contains(const std::vector<TokenId>& group, TokenId t) {
  return std::find(group.begin(), group.end(), t) != group.end();
}

constexpr std::array<const char*, 4> kRefusalText = {"I'm sorry,", "As an AI,", "I cannot",
                                                      "it is not advisable"};
constexpr std::array<const char*, 4> kComplianceText = {"Sure,", "Here is how", "Certainly!",
                                                         "Step 1:"};
}  // namespace

bool VocabPartition::is_refusal(TokenId t) const { return contains(refusal, t); }
bool VocabPartition::is_compliance(TokenId t) const { return contains(compliance, t); }
bool VocabPartition::is_harmful_topic(TokenId t) const { return contains(harmful_topic, t); }

std::string VocabPartition::token_text(TokenId t) const {
  if (t == bos) return "<bos>";
  if (t == eos) return "<eos>";
  if (t == sep) return "<sep>";
  auto index_in = [t](const std::vector<TokenId>& group) {
    return static_cast<std::size_t>(t - group.front());
  };
  if (is_refusal(t)) return kRefusalText[index_in(refusal) % kRefusalText.size()];
  if (is_compliance(t)) return kComplianceText[index_in(compliance) % kComplianceText.size()];
  if (is_harmful_topic(t)) return "harm" + std::to_string(index_in(harmful_topic));
  if (contains(benign_topic, t)) return "topic" + std::to_string(index_in(benign_topic));
  return "w" + std::to_string(t);
}

std::string VocabPartition::decode(const std::vector<TokenId>& tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (t == bos || t == eos || t == sep) continue;
    if (!out.empty()) out += ' ';
    out += token_text(t);
  }
  return out;
}

std::vector<std::vector<TokenId>> SyntheticCorpus::training_sequences() const {
  std::vector<std::vector<TokenId>> out;
  out.reserve(continuations.size());
  for (const auto& c : continuations) {
    std::vector<TokenId> seq = queries.at(c.query_index).tokens;
    seq.insert(seq.end(), c.tokens.begin(), c.tokens.end());
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<std::vector<TokenId>> SyntheticCorpus::query_sequences() const {
  std::vector<std::vector<TokenId>> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back(q.tokens);
  return out;
}

void CorpusSpec::validate() const {
  if (!(p_refuse >= 0.0 && p_refuse <= 1.0)) {
    throw std::invalid_argument("CorpusSpec: p_refuse must be in [0, 1]");
  }
  if (harmful + benign == 0) throw std::invalid_argument("CorpusSpec: no queries requested");
  if (min_query_body < 1 || min_query_body > max_query_body) {
    throw std::invalid_argument("CorpusSpec: invalid query body length range");
  }
  if (min_continuation < 1 || min_continuation > max_continuation) {
    throw std::invalid_argument("CorpusSpec: invalid continuation length range");
  }
  if (continuations_per_query < 1) {
    throw std::invalid_argument("CorpusSpec: continuations_per_query must be >= 1");
  }
}

SyntheticCorpus gen_synthetic_corpus(const CorpusSpec& spec) {
  spec.validate();
  SyntheticCorpus corpus;
  corpus.vocab = VocabPartition::for_vocab(spec.vocab_size);
  const VocabPartition& v = corpus.vocab;
  std::mt19937_64 rng(spec.seed);

  auto uniform = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto pick = [&](const std::vector<TokenId>& group) { return group[uniform(0, group.size() - 1)]; };
  std::vector<TokenId> filler = v.benign_topic;
  filler.insert(filler.end(), v.neutral.begin(), v.neutral.end());

  auto make_query = [&](QueryLabel label) {
    const std::size_t body = uniform(spec.min_query_body, spec.max_query_body);
    const std::size_t topical = uniform(1, std::min<std::size_t>(3, body));
    std::vector<TokenId> words;
    for (std::size_t i = 0; i < topical; ++i) {
      words.push_back(label == QueryLabel::kHarmful ? pick(v.harmful_topic) : pick(v.benign_topic));
    }
    while (words.size() < body) words.push_back(pick(filler));
    std::shuffle(words.begin(), words.end(), rng);
    std::vector<TokenId> tokens{v.bos};
    tokens.insert(tokens.end(), words.begin(), words.end());
    tokens.push_back(v.sep);
    return tokens;
  };

  std::bernoulli_distribution refuse(spec.p_refuse);
  std::bernoulli_distribution coin(0.5);
  auto make_continuation = [&](ContinuationClass cls) {
    const std::size_t length = uniform(spec.min_continuation, spec.max_continuation);
    std::vector<TokenId> tokens;
    switch (cls) {
      case ContinuationClass::kRefusal:
        tokens.push_back(pick(v.refusal));
        while (tokens.size() < length) tokens.push_back(pick(v.neutral));
        break;
      case ContinuationClass::kCompliance:
        tokens.push_back(pick(v.compliance));
        while (tokens.size() < length) {
          tokens.push_back(coin(rng) ? pick(v.harmful_topic) : pick(v.neutral));
        }
        break;
      case ContinuationClass::kNeutral:
        while (tokens.size() < length) tokens.push_back(pick(filler));
        break;
    }
    tokens.push_back(v.eos);
    return tokens;
  };

  // Harmful and benign queries are interleaved so any prefix of the corpus is mixed.
  const std::size_t total = spec.harmful + spec.benign;
  std::size_t made_harmful = 0, made_benign = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const bool harmful = made_benign >= spec.benign ||
                         (made_harmful < spec.harmful &&
                          made_harmful * spec.benign <= made_benign * spec.harmful);
    const QueryLabel label = harmful ? QueryLabel::kHarmful : QueryLabel::kBenign;
    (harmful ? made_harmful : made_benign)++;

    Query q;
    std::ostringstream id;
    id << "q" << corpus.queries.size();
    q.id = id.str();
    q.label = label;
    q.tokens = make_query(label);
    const std::size_t query_index = corpus.queries.size();
    corpus.queries.push_back(std::move(q));

    for (std::size_t c = 0; c < spec.continuations_per_query; ++c) {
      ContinuationClass cls = ContinuationClass::kNeutral;
      if (label == QueryLabel::kHarmful) {
        cls = refuse(rng) ? ContinuationClass::kRefusal : ContinuationClass::kCompliance;
      }
      Continuation cont;
      cont.id = "c" + std::to_string(corpus.continuations.size());
      cont.query_index = query_index;
      cont.cls = cls;
      cont.tokens = make_continuation(cls);
      corpus.continuations.push_back(std::move(cont));
    }
  }
  return corpus;
}

std::pair<SyntheticCorpus, SyntheticCorpus> split_corpus(const SyntheticCorpus& corpus,
                                                         double second_fraction,
                                                         std::uint64_t seed) {
  if (!(second_fraction > 0.0 && second_fraction < 1.0)) {
    throw std::invalid_argument("split_corpus: fraction must be in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::vector<bool> to_second(corpus.queries.size(), false);
  for (QueryLabel label : {QueryLabel::kHarmful, QueryLabel::kBenign}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < corpus.queries.size(); ++i) {
      if (corpus.queries[i].label == label) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_second =
        static_cast<std::size_t>(std::llround(second_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n_second; ++i) to_second[idx[i]] = true;
  }

  std::pair<SyntheticCorpus, SyntheticCorpus> out;
  out.first.vocab = out.second.vocab = corpus.vocab;
  std::vector<std::size_t> new_index(corpus.queries.size());
  for (std::size_t i = 0; i < corpus.queries.size(); ++i) {
    SyntheticCorpus& dst = to_second[i] ? out.second : out.first;
    new_index[i] = dst.queries.size();
    dst.queries.push_back(corpus.queries[i]);
  }
  for (const auto& c : corpus.continuations) {
    SyntheticCorpus& dst = to_second[c.query_index] ? out.second : out.first;
    Continuation copy = c;
    copy.query_index = new_index[c.query_index];
    dst.continuations.push_back(std::move(copy));
  }
  return out;
}

std::string to_jsonl(const SyntheticCorpus& corpus) {
  std::string out;
  for (const auto& q : corpus.queries) {
    nlohmann::ordered_json record;
    record["id"] = q.id;
    record["tokens"] = q.tokens;
    record["label"] = to_string(q.label);
    record["kind"] = "query";
    record["class"] = nullptr;
    record["query_id"] = nullptr;
    out += record.dump();
    out += '\n';
  }
  for (const auto& c : corpus.continuations) {
    const Query& q = corpus.queries.at(c.query_index);
    nlohmann::ordered_json record;
    record["id"] = c.id;
    record["tokens"] = c.tokens;
    record["label"] = to_string(q.label);
    record["kind"] = "continuation";
    record["class"] = to_string(c.cls);
    record["query_id"] = q.id;
    out += record.dump();
    out += '\n';
  }
  return out;
}

std::vector<TokenId> hash_tokenize(const std::string& text, const VocabPartition& vocab) {
  const std::size_t buckets = vocab.vocab_size - 3;
  std::vector<TokenId> out;
  std::istringstream words(text);
  std::string word;
  while (words >> word) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : word) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    out.push_back(static_cast<TokenId>(3 + h % buckets));
  }
  return out;
}

SyntheticCorpus from_jsonl(const std::string& text, std::size_t vocab_size) {
  SyntheticCorpus corpus;
  corpus.vocab = VocabPartition::for_vocab(vocab_size);
  struct PendingContinuation {
    Continuation cont;
    std::string query_id;
  };
  std::vector<PendingContinuation> pending;
  std::map<std::string, std::size_t> query_by_id;

  std::istringstream lines(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "corpus line " + std::to_string(line_no) + ": ";
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(where + "malformed JSON (" + e.what() + ")");
    }
    if (!record.is_object()) throw std::invalid_argument(where + "record is not an object");

    const std::string kind = record.value("kind", std::string("query"));
    std::vector<TokenId> tokens;
    if (record.contains("tokens")) {
      tokens = record.at("tokens").get<std::vector<TokenId>>();
    } else if (record.contains("text")) {
      tokens = hash_tokenize(record.at("text").get<std::string>(), corpus.vocab);
      if (kind == "query") {
        tokens.insert(tokens.begin(), corpus.vocab.bos);
        tokens.push_back(corpus.vocab.sep);
      } else {
        tokens.push_back(corpus.vocab.eos);
      }
    } else {
      throw std::invalid_argument(where + "record has neither 'tokens' nor 'text'");
    }
    for (TokenId t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw std::invalid_argument(where + "token " + std::to_string(t) + " outside vocabulary");
      }
    }
    const std::string id = record.contains("id") && record["id"].is_string()
                               ? record["id"].get<std::string>()
                               : "r" + std::to_string(line_no);
    const auto label_field = record.value("label", nlohmann::json("benign"));
    const QueryLabel label =
        label_field.is_string() ? parse_query_label(label_field.get<std::string>()) : QueryLabel::kBenign;

    if (kind == "query") {
      if (!query_by_id.emplace(id, corpus.queries.size()).second) {
        throw std::invalid_argument(where + "duplicate query id '" + id + "'");
      }
      corpus.queries.push_back(Query{id, std::move(tokens), label});
    } else if (kind == "continuation") {
      PendingContinuation p;
      p.cont.id = id;
      p.cont.tokens = std::move(tokens);
      const auto cls_field = record.value("class", nlohmann::json(nullptr));
      p.cont.cls = cls_field.is_string() ? parse_continuation_class(cls_field.get<std::string>())
                                         : ContinuationClass::kNeutral;
      const auto qid = record.value("query_id", nlohmann::json(nullptr));
      if (!qid.is_string()) throw std::invalid_argument(where + "continuation without query_id");
      p.query_id = qid.get<std::string>();
      pending.push_back(std::move(p));
    } else {
      throw std::invalid_argument(where + "unknown kind '" + kind + "'");
    }
  }
  for (auto& p : pending) {
    auto it = query_by_id.find(p.query_id);
    if (it == query_by_id.end()) {
      throw std::invalid_argument("continuation '" + p.cont.id + "' references unknown query '" +
                                  p.query_id + "'");
    }
    p.cont.query_index = it->second;
    corpus.continuations.push_back(std::move(p.cont));
  }
  return corpus;
}

void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::string text = to_jsonl(corpus);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

SyntheticCorpus load_corpus(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return from_jsonl(buffer.str(), vocab_size);
}

}  // namespace rds
