#include <optional>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rds/classifier.hpp"
#include "rds/corpus.hpp"
#include "rds/errors.hpp"
#include "rds/evalharness.hpp"
#include "rds/metrics.hpp"
#include "rds/numcore.hpp"
#include "rds/runtime.hpp"
#include "rds/safegen.hpp"
#include "rds/spechead.hpp"
#include "rds/toymodel.hpp"

namespace py = pybind11;
using namespace rds;

namespace {

// JSON crosses the boundary as text; the Python side parses it.
std::string dump(const nlohmann::json& j) { return j.dump(); }

GenConfig gen_config_from(const std::string& json_text) {
  GenConfig cfg = GenConfig::from_json(nlohmann::json::parse(json_text), GenConfig{});
  cfg.validate();
  return cfg;
}

std::unique_ptr<RefusalDetector> make_detector(const std::string& matcher) {
  if (matcher == "token") return std::make_unique<TokenRefusalMatcher>();
  if (matcher == "string") return std::make_unique<StringRefusalMatcher>();
  throw InvalidConfiguration("unknown matcher '" + matcher + "'");
}

}  // namespace

PYBIND11_MODULE(_rds, m) {
  m.doc() = "Decoding-time safety guidance on a toy transformer";

  py::register_exception<DegenerateDataError>(m, "DegenerateDataError", PyExc_ValueError);
  py::register_exception<TrainingFailure>(m, "TrainingFailure", PyExc_RuntimeError);
  py::register_exception<InvalidConfiguration>(m, "InvalidConfiguration", PyExc_ValueError);
  py::register_exception<MissingArtifact>(m, "MissingArtifact", PyExc_FileNotFoundError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("softmax", &softmax, py::arg("v"));
  m.def("auc", &auc, py::arg("scores"), py::arg("labels"));
  m.def(
      "pca_fit",
      [](const Matrix& rows, std::size_t m_components) {
        PcaBasis b = pca_fit(rows, m_components);
        return py::make_tuple(b.mean, b.components);
      },
      py::arg("rows"), py::arg("m"), "Returns (mean, components d x m).");
  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("stage"));

  // ---- corpus
  py::enum_<QueryLabel>(m, "QueryLabel").value("HARMFUL", QueryLabel::kHarmful).value("BENIGN", QueryLabel::kBenign);

  py::class_<Query>(m, "Query")
      .def_readonly("id", &Query::id)
      .def_readonly("tokens", &Query::tokens)
      .def_readonly("label", &Query::label);

  py::class_<SyntheticCorpus>(m, "Corpus")
      .def_readonly("queries", &SyntheticCorpus::queries)
      .def_property_readonly("vocab_size", [](const SyntheticCorpus& c) { return c.vocab.vocab_size; })
      .def_property_readonly("eos", [](const SyntheticCorpus& c) { return c.vocab.eos; })
      .def("training_sequences", &SyntheticCorpus::training_sequences)
      .def("to_jsonl", [](const SyntheticCorpus& c) { return to_jsonl(c); })
      .def("save", [](const SyntheticCorpus& c, const std::filesystem::path& p) { save_corpus(c, p); })
      .def("decode", [](const SyntheticCorpus& c, const std::vector<TokenId>& t) { return c.vocab.decode(t); })
      .def("split", [](const SyntheticCorpus& c, double fraction, std::uint64_t seed) { return split_corpus(c, fraction, seed); },
           py::arg("fraction"), py::arg("seed"));

  m.def(
      "gen_corpus",
      [](std::size_t harmful, std::size_t benign, double p_refuse, std::size_t continuations, std::size_t vocab_size,
         std::uint64_t seed) {
        CorpusSpec s;
        s.harmful = harmful;
        s.benign = benign;
        s.p_refuse = p_refuse;
        s.continuations_per_query = continuations;
        s.vocab_size = vocab_size;
        s.seed = seed;
        return gen_synthetic_corpus(s);
      },
      py::arg("harmful") = 100, py::arg("benign") = 100, py::arg("p_refuse") = 0.5, py::arg("continuations") = 1,
      py::arg("vocab_size") = 64, py::arg("seed") = 0);
  m.def("load_corpus", &load_corpus, py::arg("path"), py::arg("vocab_size") = 64);

  // ---- toy transformer
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("max_seq", &ModelConfig::max_seq)
      .def_readwrite("seed", &ModelConfig::seed);

  py::class_<ToyTransformer>(m, "ToyTransformer")
      .def_static("init", &ToyTransformer::init, py::arg("config"))
      .def_static("load", [](const std::filesystem::path& p) { return ToyTransformer::from_store(TensorStore::load(p)); })
      .def("save", [](const ToyTransformer& t, const std::filesystem::path& p) { t.to_store().save(p); })
      .def_property_readonly("config", &ToyTransformer::config)
      .def("fingerprint", &ToyTransformer::fingerprint)
      .def(
          "forward",
          [](const ToyTransformer& t, const std::vector<TokenId>& tokens) {
            ForwardOutput out = t.forward(tokens);
            return py::make_tuple(out.hidden, out.logits);
          },
          py::arg("tokens"), "Returns (hidden seq x d, logits seq x vocab).")
      .def("embed", &ToyTransformer::embed)
      .def("lm_loss", [](const ToyTransformer& t, const std::vector<std::vector<TokenId>>& s) { return lm_loss(t, s); });

  m.def(
      "train_lm",
      [](const ToyTransformer& model, const std::vector<std::vector<TokenId>>& seqs, std::size_t epochs, double lr,
         const std::string& optimizer) {
        LmTrainConfig cfg;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.optimizer = optimizer == "gd" ? Optimizer::kGradientDescent : Optimizer::kAdam;
        std::optional<LmTrainResult> r;
        {
          py::gil_scoped_release release;
          r.emplace(train_lm(model, seqs, cfg));
        }
        return py::make_tuple(std::move(r->model), r->loss_curve);
      },
      py::arg("model"), py::arg("sequences"), py::arg("epochs") = 30, py::arg("lr") = 0.01,
      py::arg("optimizer") = "adam", "Returns (trained model, loss curve).");

  // ---- classifier
  py::class_<SafetyClassifier>(m, "SafetyClassifier")
      .def(py::init<Vector, Matrix, Vector, double>(), py::arg("mean"), py::arg("components"), py::arg("weights"),
           py::arg("bias"))
      .def_static("load", [](const std::filesystem::path& p) { return SafetyClassifier::from_store(TensorStore::load(p)); })
      .def("save", [](const SafetyClassifier& c, const std::filesystem::path& p) { c.to_store().save(p); })
      .def_property_readonly("mean", &SafetyClassifier::mean)
      .def_property_readonly("components", &SafetyClassifier::components)
      .def_property_readonly("weights", &SafetyClassifier::weights)
      .def_property_readonly("bias", &SafetyClassifier::bias)
      .def("project", &SafetyClassifier::project)
      .def("logit", &SafetyClassifier::logit)
      .def("score", &SafetyClassifier::score)
      .def("score_batch", &SafetyClassifier::score_batch);

  m.def(
      "query_states",
      [](const ToyTransformer& model, const SyntheticCorpus& corpus) {
        LabeledHiddenSet s = collect_query_states(model, corpus.queries);
        return py::make_tuple(s.states, s.labels);
      },
      py::arg("model"), py::arg("corpus"), "Returns (states n x d, labels).");
  m.def(
      "fit_classifier",
      [](const Matrix& states, const std::vector<int>& labels, std::size_t components, std::size_t epochs, double lr) {
        ClassifierFitConfig cfg;
        cfg.components = components;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        ClassifierFit fit = fit_classifier(LabeledHiddenSet{states, labels}, cfg);
        return py::make_tuple(fit.classifier, fit.train_auc);
      },
      py::arg("states"), py::arg("labels"), py::arg("components") = 4, py::arg("epochs") = 500, py::arg("lr") = 0.1,
      "Returns (classifier, train AUC).");

  // ---- speculative head
  py::class_<SpecHead>(m, "SpecHead")
      .def_static("init", &SpecHead::init, py::arg("teacher"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return SpecHead::from_store(TensorStore::load(p)); })
      .def("save", [](const SpecHead& h, const std::filesystem::path& p) { h.to_store().save(p); })
      .def("predict_hidden", &SpecHead::predict_hidden, py::arg("h_prev"), py::arg("embedding"))
      .def("predict_batch", &SpecHead::predict_batch, py::arg("h_prev"), py::arg("embeddings"));

  m.def(
      "train_spechead",
      [](const ToyTransformer& model, const std::vector<std::vector<TokenId>>& seqs, std::size_t epochs, double lr,
         double val_fraction, std::uint64_t seed) {
        const TraceSet traces = harvest_traces(model, seqs, val_fraction, seed);
        SpecHeadTrainConfig cfg;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.seed = seed;
        std::optional<SpecHeadTrainResult> r;
        {
          py::gil_scoped_release release;
          r.emplace(train_spechead(SpecHead::init(model, seed), traces, cfg));
        }
        return py::make_tuple(std::move(r->head), dump(r->metadata(cfg)));
      },
      py::arg("model"), py::arg("sequences"), py::arg("epochs") = 50, py::arg("lr") = 1.0,
      py::arg("val_fraction") = 0.1, py::arg("seed") = 0, "Returns (head, metadata JSON text).");

  // ---- generation and evaluation (configs and results as JSON text)
  m.def(
      "generate",
      [](const ToyTransformer& model, const SafetyClassifier* clf, const SpecHead* head,
         const std::vector<TokenId>& prompt, const std::string& config_json, bool steps) {
        const GenConfig cfg = gen_config_from(config_json);
        py::gil_scoped_release release;
        return dump(generate(model, clf, head, prompt, cfg).to_json(steps));
      },
      py::arg("model"), py::arg("classifier").none(true), py::arg("head").none(true), py::arg("prompt"),
      py::arg("config_json"), py::arg("steps") = false);

  m.def(
      "evaluate",
      [](const ToyTransformer& model, const SafetyClassifier* clf, const SpecHead* head, const SyntheticCorpus& corpus,
         const std::vector<std::string>& config_jsons, std::size_t n_samples, std::uint64_t seed,
         const std::string& matcher, bool timing) {
        std::vector<GenConfig> modes;
        for (const auto& c : config_jsons) modes.push_back(gen_config_from(c));
        const auto detector = make_detector(matcher);
        py::gil_scoped_release release;
        return dump(evaluate(model, clf, head, corpus, modes, *detector, EvalConfig{n_samples, seed}).to_json(timing));
      },
      py::arg("model"), py::arg("classifier").none(true), py::arg("head").none(true), py::arg("corpus"),
      py::arg("config_jsons"), py::arg("n_samples") = 5, py::arg("seed") = 0, py::arg("matcher") = "string",
      py::arg("timing") = true);

  m.def(
      "bench",
      [](const ToyTransformer& model, const SafetyClassifier& clf, const SpecHead& head,
         const std::vector<std::vector<TokenId>>& prompts, const std::vector<std::string>& config_jsons,
         std::size_t warmup) {
        std::vector<GenConfig> modes;
        for (const auto& c : config_jsons) modes.push_back(gen_config_from(c));
        py::gil_scoped_release release;
        return dump(bench_generate(model, clf, head, prompts, modes, warmup).to_json());
      },
      py::arg("model"), py::arg("classifier"), py::arg("head"), py::arg("prompts"), py::arg("config_jsons"),
      py::arg("warmup") = 2);

  m.def(
      "export_scatter_csv",
      [](const ToyTransformer& model, const SafetyClassifier& clf, const SpecHead* head, const SyntheticCorpus& corpus,
         const std::vector<std::size_t>& positions, const std::string& config_json, const std::string& matcher) {
        const GenConfig cfg = gen_config_from(config_json);
        const auto detector = make_detector(matcher);
        py::gil_scoped_release release;
        return scatter_csv(export_scatter(model, clf, head, corpus, positions, cfg, *detector));
      },
      py::arg("model"), py::arg("classifier"), py::arg("head").none(true), py::arg("corpus"), py::arg("positions"),
      py::arg("config_json"), py::arg("matcher") = "string");
}
