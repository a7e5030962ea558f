// rds: corpus generation, training, safety-guided generation, evaluation,
// benchmarking and scatter export.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rds/classifier.hpp"
#include "rds/corpus.hpp"
#include "rds/errors.hpp"
#include "rds/evalharness.hpp"
#include "rds/runtime.hpp"
#include "rds/safegen.hpp"
#include "rds/spechead.hpp"
#include "rds/toymodel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rds;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissing = 3;
constexpr int kExitConfig = 4;
constexpr int kExitData = 5;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr const char* kSeedHelp =
    "Global seed. Stages draw sub-seeds derived from it by name: corpus, lm, clf, head, gen, eval.";

// Options shared by every subcommand.
struct Common {
  fs::path config_path;
  fs::path out_dir = ".";
  std::uint64_t seed = 0;
  json config = json::object();

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file; flags override its values");
    cmd->add_option("--out-dir", out_dir, "Artifact directory (model.tsr, classifier.tsr, ...)");
    cmd->add_option("--seed", seed, kSeedHelp);
  }

  void load(CLI::App* cmd) {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw MissingArtifact(config_path.string());
      try {
        config = json::parse(in);
      } catch (const json::exception& e) {
        throw InvalidConfiguration("config " + config_path.string() + ": " + e.what());
      }
      if (!config.is_object()) throw InvalidConfiguration("config must be a JSON object");
      if (cmd->count("--seed") == 0 && config.contains("seed")) seed = config["seed"].get<std::uint64_t>();
      if (cmd->count("--out-dir") == 0 && config.contains("out_dir")) {
        out_dir = config["out_dir"].get<std::string>();
      }
    }
  }

  std::uint64_t sub_seed(const char* stage) const { return derive_seed(seed, stage); }
  fs::path artifact(const char* name) const { return out_dir / name; }
};

// Fills `target` from config[section][key] unless the flag was given.
template <typename T>
void merge(const CLI::App* cmd, const std::string& flag, const json& config, const char* section,
           const char* key, T& target) {
  const CLI::Option* opt = cmd->get_option_no_throw(flag);
  if (opt != nullptr && opt->count() > 0) return;
  if (!config.contains(section) || !config[section].contains(key)) return;
  try {
    target = config[section][key].get<T>();
  } catch (const json::exception& e) {
    throw InvalidConfiguration(std::string("config ") + section + "." + key + ": " + e.what());
  }
}

void require_file(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact(path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

SyntheticCorpus load_nonempty_corpus(const fs::path& path, std::size_t vocab) {
  require_file(path);
  SyntheticCorpus corpus = load_corpus(path, vocab);
  if (corpus.queries.empty()) throw DataError("corpus " + path.string() + " has no queries");
  return corpus;
}

ToyTransformer load_model(const fs::path& path, std::uint64_t seed) {
  require_file(path);
  return ToyTransformer::from_store(TensorStore::load(path), seed);
}

std::vector<GenMode> parse_modes(const std::string& text) {
  std::vector<GenMode> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(parse_gen_mode(item));
  }
  if (out.empty()) throw InvalidConfiguration("no modes given");
  return out;
}

// "1..8", "1,2,5" or a mix such as "1..3,7".
std::vector<std::size_t> parse_positions(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  try {
    for (std::string item; std::getline(ss, item, ',');) {
      if (item.empty()) continue;
      const auto dots = item.find("..");
      if (dots == std::string::npos) {
        out.push_back(std::stoul(item));
      } else {
        const std::size_t lo = std::stoul(item.substr(0, dots));
        const std::size_t hi = std::stoul(item.substr(dots + 2));
        if (hi < lo) throw UsageError("empty position range '" + item + "'");
        for (std::size_t p = lo; p <= hi; ++p) out.push_back(p);
      }
    }
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse positions '" + text + "'");
  }
  if (out.empty()) throw UsageError("no positions given");
  for (std::size_t p : out) {
    if (p < 1) throw UsageError("positions start at 1");
  }
  return out;
}

// Generation flags shared by generate, eval, bench and export-scatter.
struct GenFlags {
  std::string mode = "no-defense";
  std::size_t k = 10;
  std::size_t max_new = 32;
  double temperature = 1.0;
  std::string selection = "argmax-score";
  double blend = 0.0;
  std::size_t resync = 0;
  bool no_stop = false;

  void add(CLI::App* cmd, bool with_mode, std::size_t default_max_new) {
    max_new = default_max_new;
    if (with_mode) cmd->add_option("--mode", mode, "no-defense | rds-full | rds-spec");
    cmd->add_option("--k", k, "Candidates per step")->check(CLI::PositiveNumber);
    cmd->add_option("--max-new", max_new, "Maximum new tokens");
    cmd->add_option("--temperature", temperature, "Softmax temperature; 0 = greedy")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--selection", selection, "argmax-score | argmin-score | sample-by-score (eval also accepts auto)");
    cmd->add_option("--blend", blend, "Weight of the candidate probability in the selection value")
        ->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--resync", resync, "rds-spec: re-run the teacher every N steps (0 = never)");
    cmd->add_flag("--no-stop", no_stop, "Do not stop at the end-of-sequence token");
  }

  void merge_config(const CLI::App* cmd, const json& config) {
    merge(cmd, "--mode", config, "gen", "mode", mode);
    merge(cmd, "--k", config, "gen", "k", k);
    merge(cmd, "--max-new", config, "gen", "max_new_tokens", max_new);
    merge(cmd, "--temperature", config, "gen", "temperature", temperature);
    merge(cmd, "--selection", config, "gen", "selection", selection);
    merge(cmd, "--blend", config, "gen", "blend", blend);
    merge(cmd, "--resync", config, "gen", "resync_interval", resync);
  }

  GenConfig build(const VocabPartition& vocab, std::uint64_t seed) const {
    GenConfig cfg;
    cfg.mode = parse_gen_mode(mode);
    cfg.k = k;
    cfg.max_new_tokens = max_new;
    cfg.temperature = temperature;
    if (selection != "auto") cfg.selection = parse_selection(selection);
    cfg.blend = blend;
    if (resync > 0) cfg.resync_interval = resync;
    if (!no_stop) cfg.stop_tokens = {vocab.eos};
    cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

struct ModelFlags {
  std::size_t vocab = 64;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq = 32;

  void add(CLI::App* cmd) {
    cmd->add_option("--vocab", vocab, "Vocabulary size");
    cmd->add_option("--d-model", d_model, "Hidden width");
    cmd->add_option("--layers", layers, "Decoder layers");
    cmd->add_option("--heads", heads, "Attention heads");
    cmd->add_option("--d-ff", d_ff, "MLP width");
    cmd->add_option("--max-seq", max_seq, "Maximum sequence length");
  }

  void merge_config(const CLI::App* cmd, const json& config) {
    merge(cmd, "--vocab", config, "model", "vocab_size", vocab);
    merge(cmd, "--d-model", config, "model", "d_model", d_model);
    merge(cmd, "--layers", config, "model", "n_layers", layers);
    merge(cmd, "--heads", config, "model", "n_heads", heads);
    merge(cmd, "--d-ff", config, "model", "d_ff", d_ff);
    merge(cmd, "--max-seq", config, "model", "max_seq", max_seq);
  }
};

// Paths of upstream artifacts; empty means <out-dir>/<fixed name>.
struct Inputs {
  fs::path corpus, model, classifier, head;

  void add(CLI::App* cmd, bool corpus_flag, bool clf_flag, bool head_flag) {
    if (corpus_flag) cmd->add_option("--corpus", corpus, "Corpus JSONL (default <out-dir>/corpus.jsonl)");
    cmd->add_option("--model", model, "Model weights (default <out-dir>/model.tsr)");
    if (clf_flag) cmd->add_option("--classifier", classifier, "Classifier (default <out-dir>/classifier.tsr)");
    if (head_flag) cmd->add_option("--head", head, "Speculative head (default <out-dir>/spechead.tsr)");
  }

  void resolve(const Common& c) {
    if (corpus.empty()) corpus = c.artifact("corpus.jsonl");
    if (model.empty()) model = c.artifact("model.tsr");
    if (classifier.empty()) classifier = c.artifact("classifier.tsr");
    if (head.empty()) head = c.artifact("spechead.tsr");
  }
};

// Loads the classifier and head the modes need. Missing components are a
// mode/config mismatch here, not a missing upstream artifact.
struct Components {
  std::optional<SafetyClassifier> clf;
  std::optional<SpecHead> head;

  void load(const Inputs& in, const std::vector<GenMode>& modes, bool always_clf = false) {
    const bool need_clf = always_clf || std::any_of(modes.begin(), modes.end(),
                                                    [](GenMode m) { return m != GenMode::kNoDefense; });
    const bool need_head = std::find(modes.begin(), modes.end(), GenMode::kRdsSpec) != modes.end();
    if (need_clf) {
      if (!fs::exists(in.classifier)) {
        throw InvalidConfiguration("mode requires a trained classifier; missing artifact: " + in.classifier.string());
      }
      clf = SafetyClassifier::from_store(TensorStore::load(in.classifier));
    }
    if (need_head) {
      if (!fs::exists(in.head)) {
        throw InvalidConfiguration("rds-spec requires a trained speculative head; missing artifact: " +
                                   in.head.string());
      }
      head = SpecHead::from_store(TensorStore::load(in.head));
    }
  }
  const SafetyClassifier* clf_ptr() const { return clf ? &*clf : nullptr; }
  const SpecHead* head_ptr() const { return head ? &*head : nullptr; }
};

// ---- gen-corpus -------------------------------------------------------------------

struct GenCorpusCmd {
  Common common;
  CorpusSpec spec;
  fs::path out;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("gen-corpus", "Generate a synthetic query/continuation corpus");
    common.add(cmd);
    cmd->add_option("--harmful", spec.harmful, "Harmful queries");
    cmd->add_option("--benign", spec.benign, "Benign queries");
    cmd->add_option("--p-refuse", spec.p_refuse, "Probability a harmful query is followed by a refusal")
        ->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--continuations", spec.continuations_per_query, "Continuations per query")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--vocab", spec.vocab_size, "Vocabulary size")->check(CLI::Range(32, 1 << 20));
    cmd->add_option("--out", out, "Output JSONL (default <out-dir>/corpus.jsonl)");
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    const json& c = common.config;
    merge(cmd, "--harmful", c, "corpus", "harmful", spec.harmful);
    merge(cmd, "--benign", c, "corpus", "benign", spec.benign);
    merge(cmd, "--p-refuse", c, "corpus", "p_refuse", spec.p_refuse);
    merge(cmd, "--continuations", c, "corpus", "continuations_per_query", spec.continuations_per_query);
    merge(cmd, "--vocab", c, "corpus", "vocab_size", spec.vocab_size);
    spec.seed = common.sub_seed("corpus");
    try {
      spec.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (out.empty()) out = common.artifact("corpus.jsonl");
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    const SyntheticCorpus corpus = gen_synthetic_corpus(spec);
    save_corpus(corpus, out);

    std::size_t harmful = 0, refusal = 0, compliance = 0, neutral = 0;
    for (const auto& q : corpus.queries) harmful += q.label == QueryLabel::kHarmful;
    for (const auto& k : corpus.continuations) {
      refusal += k.cls == ContinuationClass::kRefusal;
      compliance += k.cls == ContinuationClass::kCompliance;
      neutral += k.cls == ContinuationClass::kNeutral;
    }
    std::cout << "wrote " << out.string() << "\n"
              << "queries " << corpus.queries.size() << " (harmful " << harmful << ", benign "
              << corpus.queries.size() - harmful << ")\n"
              << "continuations " << corpus.continuations.size() << " (refusal " << refusal
              << ", compliance " << compliance << ", neutral " << neutral << ")\n";
  }
};

// ---- train-lm ---------------------------------------------------------------------

struct TrainLmCmd {
  Common common;
  ModelFlags model;
  Inputs inputs;
  LmTrainConfig train;
  std::string optimizer = "adam";

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train-lm", "Train the toy transformer on a corpus");
    common.add(cmd);
    model.add(cmd);
    cmd->add_option("--corpus", inputs.corpus, "Corpus JSONL (default <out-dir>/corpus.jsonl)");
    cmd->add_option("--epochs", train.epochs, "Full-batch epochs");
    cmd->add_option("--lr", train.learning_rate, "Learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--optimizer", optimizer, "adam | gd")->check(CLI::IsMember({"adam", "gd"}));
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    const json& c = common.config;
    model.merge_config(cmd, c);
    merge(cmd, "--epochs", c, "lm", "epochs", train.epochs);
    merge(cmd, "--lr", c, "lm", "learning_rate", train.learning_rate);
    merge(cmd, "--optimizer", c, "lm", "optimizer", optimizer);
    if (optimizer != "adam" && optimizer != "gd") throw InvalidConfiguration("optimizer must be adam or gd");
    train.optimizer = optimizer == "adam" ? Optimizer::kAdam : Optimizer::kGradientDescent;
    inputs.resolve(common);

    ModelConfig mc;
    mc.vocab_size = model.vocab;
    mc.d_model = model.d_model;
    mc.n_layers = model.layers;
    mc.n_heads = model.heads;
    mc.d_ff = model.d_ff;
    mc.max_seq = model.max_seq;
    mc.seed = common.sub_seed("lm");
    try {
      mc.validate();
    } catch (const std::invalid_argument& e) {
      throw InvalidConfiguration(e.what());
    }
    train.seed = mc.seed;

    const SyntheticCorpus corpus = load_nonempty_corpus(inputs.corpus, mc.vocab_size);
    const auto sequences = corpus.training_sequences();
    for (const auto& s : sequences) {
      if (s.size() > mc.max_seq) throw DataError("a training sequence is longer than --max-seq");
    }
    const LmTrainResult result = train_lm(ToyTransformer::init(mc), sequences, train);

    ensure_dir(common.out_dir);
    const fs::path out = common.artifact("model.tsr");
    result.model.to_store().save(out);
    write_json(common.artifact("train_lm.json"),
               {{"model",
                 {{"vocab_size", mc.vocab_size},
                  {"d_model", mc.d_model},
                  {"n_layers", mc.n_layers},
                  {"n_heads", mc.n_heads},
                  {"d_ff", mc.d_ff},
                  {"max_seq", mc.max_seq}}},
                {"training",
                 {{"epochs", train.epochs},
                  {"learning_rate", train.learning_rate},
                  {"optimizer", optimizer},
                  {"seed", train.seed},
                  {"sequences", sequences.size()},
                  {"loss_curve", result.loss_curve}}},
                {"fingerprint", result.model.fingerprint()}});
    std::cout << "wrote " << out.string() << "\nloss " << result.loss_curve.front() << " -> "
              << result.loss_curve.back() << "\n";
  }
};

// ---- train-classifier ---------------------------------------------------------------

struct TrainClassifierCmd {
  Common common;
  Inputs inputs;
  ClassifierFitConfig fit;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train-classifier", "Fit the PCA + logistic safety classifier");
    common.add(cmd);
    inputs.add(cmd, true, false, false);
    cmd->add_option("--components", fit.components, "Principal components m")->check(CLI::PositiveNumber);
    cmd->add_option("--epochs", fit.epochs, "Gradient-descent epochs");
    cmd->add_option("--lr", fit.learning_rate, "Learning rate")->check(CLI::PositiveNumber);
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    const json& c = common.config;
    merge(cmd, "--components", c, "classifier", "components", fit.components);
    merge(cmd, "--epochs", c, "classifier", "epochs", fit.epochs);
    merge(cmd, "--lr", c, "classifier", "learning_rate", fit.learning_rate);
    inputs.resolve(common);
    fit.seed = common.sub_seed("clf");

    const ToyTransformer model = load_model(inputs.model, common.sub_seed("lm"));
    const SyntheticCorpus corpus = load_nonempty_corpus(inputs.corpus, model.config().vocab_size);
    const LabeledHiddenSet states = collect_query_states(model, corpus.queries);
    if (fit.components > std::min<std::size_t>(states.states.rows(), states.states.cols())) {
      throw InvalidConfiguration("--components exceeds min(queries, d_model)");
    }
    const ClassifierFit result = fit_classifier(states, fit);

    ensure_dir(common.out_dir);
    const fs::path out = common.artifact("classifier.tsr");
    result.classifier.to_store().save(out);
    json meta = result.metadata(fit);
    meta["teacher_hash"] = model.fingerprint();
    meta["queries"] = corpus.queries.size();
    write_json(common.artifact("classifier.json"), meta);
    char auc_text[32];
    std::snprintf(auc_text, sizeof auc_text, "%.2f", result.train_auc);
    std::cout << "wrote " << out.string() << "\ntrain AUC " << auc_text << "\n";
  }
};

// ---- train-spechead -----------------------------------------------------------------

struct TrainSpecHeadCmd {
  Common common;
  Inputs inputs;
  SpecHeadTrainConfig train;
  double val_fraction = 0.1;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train-spechead", "Train the speculative hidden-state head");
    common.add(cmd);
    inputs.add(cmd, true, false, false);
    cmd->add_option("--epochs", train.epochs, "Full-batch epochs");
    cmd->add_option("--lr", train.learning_rate, "Learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--val-fraction", val_fraction, "Held-out share of the traces")
        ->check(CLI::Range(0.0, 1.0));
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    const json& c = common.config;
    merge(cmd, "--epochs", c, "spechead", "epochs", train.epochs);
    merge(cmd, "--lr", c, "spechead", "learning_rate", train.learning_rate);
    merge(cmd, "--val-fraction", c, "spechead", "val_fraction", val_fraction);
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidConfiguration("--val-fraction must be in (0, 1)");
    inputs.resolve(common);
    train.seed = common.sub_seed("head");

    const ToyTransformer model = load_model(inputs.model, common.sub_seed("lm"));
    const SyntheticCorpus corpus = load_nonempty_corpus(inputs.corpus, model.config().vocab_size);
    const TraceSet traces = harvest_traces(model, corpus.training_sequences(), val_fraction, train.seed);
    const SpecHeadTrainResult result = train_spechead(SpecHead::init(model, train.seed), traces, train);

    ensure_dir(common.out_dir);
    const fs::path out = common.artifact("spechead.tsr");
    result.head.to_store().save(out);
    write_json(common.artifact("spechead.json"),
               {{"d", result.head.dim()},
                {"teacher_hash", model.fingerprint()},
                {"train_triples", traces.train.size()},
                {"validation_triples", traces.validation.size()},
                {"training", result.metadata(train)}});
    std::cout << "wrote " << out.string() << "\nvalidation loss " << result.validation_curve.back()
              << " (mean-state baseline " << result.mean_baseline_validation_loss << ")\n";
  }
};

// ---- generate ---------------------------------------------------------------------

struct GenerateCmd {
  Common common;
  Inputs inputs;
  GenFlags gen;
  std::string prompt;
  std::string prompt_tokens;
  fs::path prompt_file;
  fs::path trace;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("generate", "Generate a continuation for one prompt");
    common.add(cmd);
    inputs.add(cmd, false, true, true);
    gen.add(cmd, true, 32);
    auto* p = cmd->add_option("--prompt", prompt, "Prompt text (hashed into vocabulary buckets)");
    auto* t = cmd->add_option("--prompt-tokens", prompt_tokens, "Prompt as comma-separated token ids");
    auto* f = cmd->add_option("--prompt-file", prompt_file, "File holding the prompt text");
    p->excludes(t)->excludes(f);
    t->excludes(f);
    cmd->add_option("--trace", trace, "Write per-step traces as JSON to this path");
    cmd->callback([this, cmd] { run(cmd); });
  }

  std::vector<TokenId> build_prompt(const VocabPartition& vocab) const {
    if (!prompt_tokens.empty()) {
      std::vector<TokenId> out;
      std::stringstream ss(prompt_tokens);
      try {
        for (std::string item; std::getline(ss, item, ',');) {
          if (!item.empty()) out.push_back(std::stoi(item));
        }
      } catch (const std::logic_error&) {
        throw UsageError("cannot parse --prompt-tokens");
      }
      for (TokenId id : out) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.vocab_size) {
          throw DataError("prompt token " + std::to_string(id) + " outside the vocabulary");
        }
      }
      return out;
    }
    std::string text = prompt;
    if (!prompt_file.empty()) {
      require_file(prompt_file);
      std::ifstream in(prompt_file);
      std::stringstream buf;
      buf << in.rdbuf();
      text = buf.str();
    }
    std::vector<TokenId> out{vocab.bos};
    for (TokenId id : hash_tokenize(text, vocab)) out.push_back(id);
    out.push_back(vocab.sep);
    return out;
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    gen.merge_config(cmd, common.config);
    inputs.resolve(common);
    const ToyTransformer model = load_model(inputs.model, common.sub_seed("lm"));
    const VocabPartition vocab = VocabPartition::for_vocab(model.config().vocab_size);
    const GenConfig cfg = gen.build(vocab, common.sub_seed("gen"));
    Components comp;
    comp.load(inputs, {cfg.mode});
    const std::vector<TokenId> tokens = build_prompt(vocab);
    if (tokens.size() > model.config().max_seq) throw DataError("prompt longer than the model's max_seq");

    const GenResult result = generate(model, comp.clf_ptr(), comp.head_ptr(), tokens, cfg);
    std::cout << vocab.decode(result.output) << "\n";
    std::cerr << "tokens:";
    for (TokenId t : result.output) std::cerr << ' ' << t;
    std::cerr << "\n";
    if (!trace.empty()) {
      json j = result.to_json(true);
      j["prompt"] = tokens;
      j["text"] = vocab.decode(result.output);
      j["config"] = cfg.to_json();
      write_json(trace, j);
    }
  }
};

// ---- eval -------------------------------------------------------------------------

struct EvalCmd {
  Common common;
  Inputs inputs;
  GenFlags gen;
  std::string modes = "no-defense,rds-full,rds-spec";
  std::size_t samples = 5;
  fs::path val_corpus;
  fs::path patterns;
  std::string matcher = "string";

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("eval", "Compliance/refusal evaluation over a corpus");
    common.add(cmd);
    inputs.add(cmd, true, true, true);
    gen.add(cmd, false, 8);
    cmd->add_option("--modes", modes, "Comma-separated modes");
    cmd->add_option("--samples", samples, "Samples per query (any-of-n aggregation)")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--val-corpus", val_corpus, "Validation corpus for --selection auto");
    cmd->add_option("--refusal-patterns", patterns, "Newline-delimited refusal strings");
    cmd->add_option("--matcher", matcher, "string | token")->check(CLI::IsMember({"string", "token"}));
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    const json& c = common.config;
    gen.merge_config(cmd, c);
    merge(cmd, "--modes", c, "eval", "modes", modes);
    merge(cmd, "--samples", c, "eval", "n_samples", samples);
    if (samples < 1) throw InvalidConfiguration("--samples must be >= 1");
    inputs.resolve(common);

    const ToyTransformer model = load_model(inputs.model, common.sub_seed("lm"));
    const SyntheticCorpus corpus = load_nonempty_corpus(inputs.corpus, model.config().vocab_size);
    const std::vector<GenMode> mode_list = parse_modes(modes);
    Components comp;
    comp.load(inputs, mode_list);

    std::unique_ptr<RefusalDetector> detector;
    if (matcher == "token") {
      detector = std::make_unique<TokenRefusalMatcher>();
    } else if (!patterns.empty()) {
      require_file(patterns);
      detector = std::make_unique<StringRefusalMatcher>(StringRefusalMatcher::from_file(patterns));
    } else {
      detector = std::make_unique<StringRefusalMatcher>();
    }

    EvalConfig eval{samples, common.sub_seed("eval")};
    GenFlags base_flags = gen;
    base_flags.mode = "no-defense";
    GenConfig base = base_flags.build(corpus.vocab, common.sub_seed("gen"));

    json selection_json = to_string(base.selection);
    if (gen.selection == "auto") {
      if (val_corpus.empty()) throw InvalidConfiguration("--selection auto needs --val-corpus");
      if (!comp.clf) throw InvalidConfiguration("--selection auto needs an rds mode");
      const SyntheticCorpus val = load_nonempty_corpus(val_corpus, model.config().vocab_size);
      GenConfig probe = base;
      probe.mode = GenMode::kRdsFull;
      const SelectionChoice choice =
          choose_selection(model, *comp.clf, nullptr, val, probe, *detector, eval);
      base.selection = choice.selection;
      selection_json = choice.to_json();
      std::cout << "selection (validation): " << to_string(choice.selection) << "\n";
    }

    std::vector<GenConfig> configs;
    for (GenMode m : mode_list) {
      GenConfig cfg = base;
      cfg.mode = m;
      configs.push_back(cfg);
    }
    EvalReport report = evaluate(model, comp.clf_ptr(), comp.head_ptr(), corpus, configs, *detector, eval);
    report.metadata["seed"] = common.seed;
    report.metadata["eval_seed"] = eval.seed;
    report.metadata["selection"] = selection_json;
    report.metadata["matcher"] = matcher;
    report.metadata["model_hash"] = model.fingerprint();

    ensure_dir(common.out_dir);
    const fs::path out = common.artifact("report.json");
    write_json(out, report.to_json());
    std::cout << "wrote " << out.string() << "\n";
    for (const auto& [name, m] : report.modes) {
      std::cout << name << ": compliance " << m.summary.compliance_pct << "% (markers "
                << m.summary.compliance_marker_pct << "%), benign refusal " << m.summary.refusal_pct
                << "%, " << m.tokens_per_second << " tok/s\n";
    }
  }
};

// ---- bench ------------------------------------------------------------------------

struct BenchCmd {
  Common common;
  Inputs inputs;
  GenFlags gen;
  std::string modes = "no-defense,rds-full,rds-spec";
  std::size_t prompts = 20;
  std::size_t warmup = 2;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("bench", "Tokens/sec per mode");
    common.add(cmd);
    inputs.add(cmd, true, true, true);
    gen.add(cmd, false, 128);
    cmd->add_option("--modes", modes, "Comma-separated modes");
    cmd->add_option("--prompts", prompts, "Prompts (cycled from the corpus queries)");
    cmd->add_option("--warmup", warmup, "Uncounted warmup runs per mode");
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    const json& c = common.config;
    gen.merge_config(cmd, c);
    merge(cmd, "--modes", c, "bench", "modes", modes);
    merge(cmd, "--prompts", c, "bench", "prompts", prompts);
    if (prompts == 0) throw DataError("--prompts must be >= 1");
    inputs.resolve(common);

    const ToyTransformer model = load_model(inputs.model, common.sub_seed("lm"));
    const SyntheticCorpus corpus = load_nonempty_corpus(inputs.corpus, model.config().vocab_size);
    const std::vector<GenMode> mode_list = parse_modes(modes);
    Components comp;
    comp.load(inputs, mode_list, true);
    // Modes that do not use the head still need an object to pass along.
    const SpecHead head = comp.head ? *comp.head : SpecHead::init(model, 0);

    std::vector<std::vector<TokenId>> prompt_list;
    for (std::size_t i = 0; i < prompts; ++i) prompt_list.push_back(corpus.queries[i % corpus.queries.size()].tokens);
    std::vector<GenConfig> configs;
    GenFlags flags = gen;
    for (GenMode m : mode_list) {
      GenConfig cfg = flags.build(corpus.vocab, common.sub_seed("gen"));
      cfg.mode = m;
      configs.push_back(cfg);
    }
    std::size_t longest = 0;
    for (const auto& p : prompt_list) longest = std::max(longest, p.size());
    if (longest + gen.max_new > model.config().max_seq) {
      std::cerr << "warning: max_seq " << model.config().max_seq
                << " truncates generation below --max-new " << gen.max_new << "\n";
    }
    const BenchReport report = bench_generate(model, *comp.clf, head, prompt_list, configs, warmup);

    json j = report.to_json();
    j["model"] = {{"n_layers", model.config().n_layers}, {"d_model", model.config().d_model}};
    j["threads"] = thread_budget();
    ensure_dir(common.out_dir);
    const fs::path out = common.artifact("bench.json");
    write_json(out, j);
    std::cout << "wrote " << out.string() << "\n";
    for (const auto& m : report.modes) {
      std::cout << to_string(m.mode) << ": " << m.median_tokens_per_second << " tok/s (median)\n";
    }
    if (const auto ratio = report.spec_over_full()) std::cout << "rds-spec / rds-full: " << *ratio << "\n";
  }
};

// ---- export-scatter -----------------------------------------------------------------

struct ScatterCmd {
  Common common;
  Inputs inputs;
  GenFlags gen;
  std::string positions = "1..8";

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("export-scatter", "Export PCA coordinates of generated-token states");
    common.add(cmd);
    inputs.add(cmd, true, true, true);
    gen.add(cmd, true, 8);
    cmd->add_option("--positions", positions, "Generated-token positions, e.g. 1..8 or 1,4,7");
    cmd->callback([this, cmd] { run(cmd); });
  }

  void run(CLI::App* cmd) {
    common.load(cmd);
    gen.merge_config(cmd, common.config);
    merge(cmd, "--positions", common.config, "scatter", "positions", positions);
    const std::vector<std::size_t> pos = parse_positions(positions);
    inputs.resolve(common);

    const ToyTransformer model = load_model(inputs.model, common.sub_seed("lm"));
    const SyntheticCorpus corpus = load_nonempty_corpus(inputs.corpus, model.config().vocab_size);
    GenFlags flags = gen;
    flags.max_new = std::max(gen.max_new, *std::max_element(pos.begin(), pos.end()));
    const GenConfig cfg = flags.build(corpus.vocab, common.sub_seed("gen"));
    Components comp;
    comp.load(inputs, {cfg.mode}, true);

    const ScatterExport scatter =
        export_scatter(model, *comp.clf, comp.head_ptr(), corpus, pos, cfg, StringRefusalMatcher());
    ensure_dir(common.out_dir);
    const fs::path out = common.artifact("scatter.csv");
    write_scatter_csv(scatter, out);
    std::cout << "wrote " << out.string() << " (" << scatter.rows.size() << " rows)\n";
    if (scatter.skipped > 0) {
      std::cerr << "warning: skipped " << scatter.skipped << " positions past the end of an output\n";
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rds: decoding-time safety engine on a toy transformer"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 missing artifact, 4 invalid mode/config, "
      "5 empty/invalid data.\nRDS_THREADS caps internal parallelism.");

  GenCorpusCmd gen_corpus;
  TrainLmCmd train_lm_cmd;
  TrainClassifierCmd train_clf;
  TrainSpecHeadCmd train_head;
  GenerateCmd generate_cmd;
  EvalCmd eval_cmd;
  BenchCmd bench_cmd;
  ScatterCmd scatter_cmd;
  gen_corpus.add(app);
  train_lm_cmd.add(app);
  train_clf.add(app);
  train_head.add(app);
  generate_cmd.add(app);
  eval_cmd.add(app);
  bench_cmd.add(app);
  scatter_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const InvalidConfiguration& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const DegenerateDataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}
