// Python bindings. Structured values (configs, plans, traces, metrics) cross
// the boundary as JSON text; fgl/__init__.py turns them into dicts.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "fgl/checkpoint.hpp"
#include "fgl/corpus.hpp"
#include "fgl/decoding.hpp"
#include "fgl/error.hpp"
#include "fgl/probes.hpp"
#include "fgl/tokenizer.hpp"
#include "fgl/training.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

json parse(const std::string& text) { return text.empty() ? json::object() : json::parse(text); }

fgl::DecoderSettings decoder(std::size_t k, std::size_t max_len, std::uint64_t seed) {
  fgl::DecoderSettings s;
  s.k = k;
  s.max_len = max_len;
  s.seed = seed;
  s.validate();
  return s;
}

// Missing keys take the struct defaults.
template <typename T>
T with_defaults(const std::string& text) {
  json j = T{};
  j.merge_patch(json::parse(text));
  return j.get<T>();
}

std::string resolved(const std::string& config_json, const std::string& out) {
  // same precedence as the CLI: defaults, then the given keys, then --out
  auto config = fgl::cli::default_config();
  fgl::cli::merge_config(config, parse(config_json));
  if (!out.empty()) config["out"] = out;
  if (config["out"].get<std::string>().empty()) config["out"] = fgl::cli::default_out_root();
  fgl::cli::validate_config(config);
  return config.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Seq2seq pretrain/finetune toolkit with forgetting probes";

  py::register_exception<fgl::Error>(m, "FglError", PyExc_RuntimeError);
  py::register_exception<fgl::cli::UsageError>(m, "UsageError", PyExc_ValueError);

  py::class_<fgl::Tokenizer>(m, "Tokenizer")
      .def_static("train", &fgl::Tokenizer::train, py::arg("lines"), py::arg("merges"))
      .def_static(
          "load",
          [](const std::string& merges, const std::string& vocab) {
            return fgl::Tokenizer(fgl::load_merges(merges), fgl::load_vocabulary(vocab));
          },
          py::arg("merges_path"), py::arg("vocab_path"))
      .def(
          "save",
          [](const fgl::Tokenizer& t, const std::string& merges, const std::string& vocab) {
            fgl::save_merges(t.bpe(), merges);
            fgl::save_vocabulary(t.vocab(), vocab);
          },
          py::arg("merges_path"), py::arg("vocab_path"))
      .def("encode", &fgl::Tokenizer::encode, py::arg("text"))
      .def("decode", &fgl::Tokenizer::decode, py::arg("ids"))
      .def_property_readonly("vocab_size", [](const fgl::Tokenizer& t) { return t.vocab().size(); })
      .def_property_readonly("vocab_checksum", [](const fgl::Tokenizer& t) { return t.vocab().checksum(); })
      .def_property_readonly("merge_count", [](const fgl::Tokenizer& t) { return t.bpe().merge_count(); })
      .def("tokens", [](const fgl::Tokenizer& t) {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < t.vocab().size(); ++i) out.push_back(t.vocab().token(static_cast<fgl::TokenId>(i)));
        return out;
      });

  py::class_<fgl::SequencePair>(m, "SequencePair")
      .def(py::init([](fgl::TokenIds context, fgl::TokenIds target) {
             return fgl::SequencePair{std::move(context), std::move(target), fgl::Origin::Target};
           }),
           py::arg("context"), py::arg("target"))
      .def_readwrite("context", &fgl::SequencePair::context)
      .def_readwrite("target", &fgl::SequencePair::target)
      .def_property_readonly("origin", [](const fgl::SequencePair& p) { return fgl::to_string(p.origin); })
      .def("__repr__", [](const fgl::SequencePair& p) {
        return "SequencePair(" + std::to_string(p.context.size()) + " context tokens, " +
               std::to_string(p.target.size()) + " target tokens)";
      });

  m.def("dialogue_pairs", &fgl::make_dialogue_pairs, py::arg("dialogue"), py::arg("tokenizer"),
        py::arg("max_context") = fgl::kMaxContextTokens);
  m.def("next_sentence_pairs", &fgl::make_ns_pairs, py::arg("document"), py::arg("tokenizer"),
        py::arg("max_context") = fgl::kMaxContextTokens);
  m.def("load_dialogues", [](const std::string& path) { return fgl::load_dialogue_corpus(path).dialogues; });
  m.def("load_documents", [](const std::string& path) { return fgl::load_document_corpus(path).documents; });
  m.def(
      "mix_count",
      [](std::size_t epoch, std::size_t base, double ratio, double decay) {
        return fgl::mix_count(epoch, fgl::MixSchedule{ratio, decay, base});
      },
      py::arg("epoch"), py::arg("base_target_size"), py::arg("mix_ratio"), py::arg("mix_decay"));

  py::class_<fgl::Checkpoint>(m, "Checkpoint")
      .def_static("load", &fgl::load_checkpoint, py::arg("path"))
      .def("save", [](const fgl::Checkpoint& c, const std::string& path) { fgl::save_checkpoint(path, c); })
      .def_readonly("epoch", &fgl::Checkpoint::epoch)
      .def_readonly("step", &fgl::Checkpoint::step)
      .def_readonly("vocab_checksum", &fgl::Checkpoint::vocab_checksum)
      .def_property_readonly("config_json", [](const fgl::Checkpoint& c) { return json(c.config).dump(); })
      .def_property_readonly("plan_json", [](const fgl::Checkpoint& c) { return c.plan.dump(); })
      .def_property_readonly("metrics_json", [](const fgl::Checkpoint& c) { return c.metrics.dump(); })
      .def_property_readonly("parameter_count", [](const fgl::Checkpoint& c) { return c.params.parameter_count(); });

  m.def(
      "train",
      [](const std::string& plan_json, const std::string& model_json, const std::vector<fgl::SequencePair>& train,
         const std::map<std::string, std::vector<fgl::SequencePair>>& eval_sets,
         const std::vector<fgl::SequencePair>& pretrain_pool, const fgl::Checkpoint* init) {
        const auto plan = with_defaults<fgl::TrainPlan>(plan_json);
        const auto config = with_defaults<fgl::TransformerConfig>(model_json);
        fgl::TrainingData data;
        data.train = train;
        data.pretrain_pool = pretrain_pool;
        for (const auto& [name, pairs] : eval_sets) data.eval_sets.push_back({name, pairs});
        fgl::RunOptions options;
        if (init) options.init = &init->params;
        fgl::RunResult r;
        {
          py::gil_scoped_release release;
          r = fgl::run_training(plan, config, data, options);
        }
        fgl::Checkpoint best;
        best.config = config;
        best.plan = plan;
        best.epoch = r.state.best_epoch;
        best.step = r.trace.at(r.state.best_epoch).step;
        best.metrics = r.trace.at(r.state.best_epoch);
        best.train_state = r.state;
        best.params = std::move(r.best);
        return py::make_tuple(best, fgl::trace_to_jsonl(r.trace));
      },
      py::arg("plan_json"), py::arg("model_json"), py::arg("train"), py::arg("eval_sets"),
      py::arg("pretrain_pool") = std::vector<fgl::SequencePair>{}, py::arg("init") = nullptr,
      "Runs training; returns (best checkpoint, trace as JSONL).");

  m.def(
      "perplexity",
      [](const fgl::Checkpoint& c, const std::vector<fgl::SequencePair>& pairs) {
        return fgl::perplexity<float>(c.params, c.config, pairs);
      },
      py::arg("checkpoint"), py::arg("pairs"));
  m.def(
      "context_sensitivity",
      [](const fgl::Checkpoint& c, const std::vector<fgl::SequencePair>& pairs, std::uint64_t seed, double rate) {
        const auto r = fgl::context_sensitivity<float>(c.params, c.config, pairs, seed, rate);
        return json{{"clean_ppl", r.clean_ppl},
                    {"drop_ppl", r.drop_ppl},
                    {"shuffle_ppl", r.shuffle_ppl},
                    {"drop_increase", r.drop_increase},
                    {"shuffle_increase", r.shuffle_increase},
                    {"cell", fgl::format_sensitivity_cell(r)}}
            .dump();
      },
      py::arg("checkpoint"), py::arg("pairs"), py::arg("seed") = 1, py::arg("drop_rate") = 0.3);
  m.def(
      "generate",
      [](const fgl::Checkpoint& c, const fgl::TokenIds& context, std::size_t k, std::size_t max_len,
         std::uint64_t seed) {
        fgl::Rng rng(seed);
        return fgl::generate<float>(c.params, c.config, context, decoder(k, max_len, seed), rng);
      },
      py::arg("checkpoint"), py::arg("context"), py::arg("k") = 30, py::arg("max_len") = 40, py::arg("seed") = 1);
  m.def(
      "beam_search",
      [](const fgl::Checkpoint& c, const fgl::TokenIds& context, std::size_t width, std::size_t max_len) {
        const auto r = fgl::beam_search<float>(c.params, c.config, context, width, max_len);
        return py::make_tuple(r.tokens, r.score, r.finished);
      },
      py::arg("checkpoint"), py::arg("context"), py::arg("beam_width") = 4, py::arg("max_len") = 40);

  m.def("top_k_indices", &fgl::top_k_indices, py::arg("scores"), py::arg("k"));
  m.def("bleu", &fgl::bleu_n, py::arg("candidate"), py::arg("reference"), py::arg("max_n"));
  m.def(
      "diversity_metrics",
      [](const std::vector<std::vector<std::string>>& responses) {
        const auto d = fgl::diversity_metrics(responses);
        return json{{"bigram_entropy", d.bigram_entropy},
                    {"trigram_entropy", d.trigram_entropy},
                    {"top1_percent", d.top1_percent},
                    {"top2_percent", d.top2_percent},
                    {"max_ratio", fgl::format_max_ratio(d)}}
            .dump();
      },
      py::arg("responses"));
  m.def(
      "project_2d",
      [](const std::vector<std::vector<double>>& vectors) {
        const auto p = fgl::project_2d(vectors);
        return py::make_tuple(p.points, p.component_variance, p.total_variance);
      },
      py::arg("vectors"));

  // CLI commands on a config dict (as JSON); unknown keys are rejected like
  // in config files.
  m.def("resolve_config", &resolved, py::arg("config_json"), py::arg("out") = "");
  m.def(
      "prepare",
      [](const std::string& config) {
        std::ostringstream log;
        return fgl::cli::cmd_prepare(json::parse(config), log);
      },
      py::arg("config_json"));
  m.def(
      "pretrain",
      [](const std::string& config, bool resume) {
        std::ostringstream log;
        py::gil_scoped_release release;
        return fgl::cli::cmd_pretrain(json::parse(config), resume, log);
      },
      py::arg("config_json"), py::arg("resume") = false);
  m.def(
      "finetune",
      [](const std::string& config, const std::vector<std::string>& checkpoints, bool resume) {
        std::ostringstream log;
        py::gil_scoped_release release;
        return fgl::cli::cmd_finetune(json::parse(config), checkpoints, resume, log);
      },
      py::arg("config_json"), py::arg("checkpoints") = std::vector<std::string>{}, py::arg("resume") = false);
  m.def(
      "probe",
      [](const std::string& config, const std::vector<std::string>& checkpoints) {
        std::ostringstream log;
        py::gil_scoped_release release;
        return fgl::cli::cmd_probe(json::parse(config), checkpoints, log);
      },
      py::arg("config_json"), py::arg("checkpoints"));
  m.def(
      "export",
      [](const std::vector<std::string>& inputs, const std::filesystem::path& out_dir) {
        std::ostringstream log;
        return fgl::cli::cmd_export(inputs, out_dir, log);
      },
      py::arg("inputs"), py::arg("out_dir"));
  m.def(
      "synth",
      [](const std::filesystem::path& dir, std::size_t entities, std::size_t news_docs, std::size_t dialogues) {
        fgl::cli::SynthOptions o;
        o.entities = entities;
        o.news_docs = news_docs;
        o.dialogues = dialogues;
        std::ostringstream log;
        fgl::cli::cmd_synth(o, dir, log);
      },
      py::arg("dir"), py::arg("entities") = 120, py::arg("news_docs") = 4400, py::arg("dialogues") = 400);
}
