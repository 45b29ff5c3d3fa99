#include "cli/commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <functional>
#include <optional>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cli/config.hpp"
#include "fgl/corpus.hpp"
#include "fgl/error.hpp"
#include "fgl/probes.hpp"
#include "fgl/synthetic.hpp"
#include "fgl/text.hpp"
#include "fgl/training.hpp"

namespace fgl::cli {

using nlohmann::json;

namespace {

// Split name -> whether the file is a document corpus (else dialogue JSONL).
const std::vector<std::pair<std::string, bool>> kSplits = {
    {"pretrain", true}, {"pretrain_valid", true}, {"target", false}, {"target_valid", false}};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_hash(const fs::path& path) { return text::hex64(text::fnv1a(read_file(path))); }

std::string pairs_to_jsonl(const std::vector<SequencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += json{{"context", p.context}, {"target", p.target}, {"origin", to_string(p.origin)}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<SequencePair> pairs_from_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string() + " (run `fgl prepare` first)");
  std::vector<SequencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      SequencePair p;
      p.context = j.at("context").get<TokenIds>();
      p.target = j.at("target").get<TokenIds>();
      p.origin = j.at("origin").get<std::string>() == "pretrain" ? Origin::Pretrain : Origin::Target;
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> corpus_lines(const std::string& path, bool documents) {
  std::vector<std::string> lines;
  if (documents) {
    for (auto& doc : load_document_corpus(path).documents) lines.insert(lines.end(), doc.begin(), doc.end());
  } else {
    for (auto& dlg : load_dialogue_corpus(path).dialogues) lines.insert(lines.end(), dlg.begin(), dlg.end());
  }
  return lines;
}

std::vector<SequencePair> encode_split(const std::string& path, bool documents, const Tokenizer& tok,
                                       const json& data, Rng& mass_rng) {
  const std::size_t max_context = data.at("max_context").get<std::size_t>();
  std::vector<SequencePair> out;
  if (!documents) {
    for (const auto& dlg : load_dialogue_corpus(path).dialogues) {
      auto p = make_dialogue_pairs(dlg, tok, max_context);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  const auto corpus = load_document_corpus(path);
  if (data.at("pretrain_objective") == "mass") {
    for (const auto& doc : corpus.documents) {
      for (const auto& sentence : doc) {
        auto ids = tok.encode(sentence);
        if (ids.size() > max_context) ids.resize(max_context);
        if (auto p = make_mass_pair(ids, mass_rng)) out.push_back(std::move(*p));
      }
    }
  } else {
    for (const auto& doc : corpus.documents) {
      auto p = make_ns_pairs(doc, tok, max_context);
      out.insert(out.end(), p.begin(), p.end());
    }
  }
  return out;
}

fs::path run_dir(const json& config, const std::string& fallback_id) {
  std::string id = config.at("run_id").get<std::string>();
  if (id.empty()) id = fallback_id;
  return out_root(config) / "runs" / id;
}

std::vector<EvalSet> eval_sets(const PreparedData& data) {
  std::vector<EvalSet> sets;
  for (const char* name : {"target_valid", "pretrain_valid"}) {
    auto it = data.splits.find(name);
    if (it != data.splits.end() && !it->second.empty()) sets.push_back({name, it->second});
  }
  return sets;
}

// Per-epoch persistence: trace, last checkpoint, and best checkpoint when
// the epoch is the best so far.
struct RunWriter {
  fs::path dir;
  TransformerConfig config;
  TrainPlan plan;
  std::string vocab_checksum;
  std::ostream& log;

  Checkpoint snapshot(const RunResult& r, const ModelParameters<float>& params, bool with_optimizer) const {
    Checkpoint c;
    c.config = config;
    c.plan = plan;
    c.epoch = r.state.epoch;
    c.step = r.state.step;
    c.vocab_checksum = vocab_checksum;
    c.rng_state = r.state.rng_state;
    c.metrics = r.trace.back();
    c.train_state = r.state;
    c.params = params;
    if (with_optimizer) c.optimizer = r.optimizer;
    return c;
  }

  void operator()(const RunResult& r) const {
    const auto& row = r.trace.back();
    write_atomic(dir / "trace.jsonl", trace_to_jsonl(r.trace));
    if (r.state.best_epoch == row.epoch) save_checkpoint((dir / "best.ckpt").string(), snapshot(r, r.best, false));
    save_checkpoint((dir / "last.ckpt").string(), snapshot(r, r.last, true));
    log << "epoch " << row.epoch << "  lr " << row.lr;
    for (const auto& [split, ppl] : row.ppl) log << "  " << split << " ppl " << ppl;
    log << "  (" << row.wall_seconds << "s)" << std::endl;
  }
};

RunResult load_run(const fs::path& dir) {
  const auto last = load_checkpoint((dir / "last.ckpt").string());
  const auto best = load_checkpoint((dir / "best.ckpt").string());
  if (!last.train_state || !last.optimizer) throw Error((dir / "last.ckpt").string() + " has no training state");
  RunResult r;
  r.last = last.params;
  r.best = best.params;
  r.optimizer = *last.optimizer;
  r.state = *last.train_state;
  r.trace = load_trace((dir / "trace.jsonl").string());
  // a crash between the trace and checkpoint writes can leave one extra row
  if (r.trace.size() < r.state.epoch + 1) throw Error((dir / "trace.jsonl").string() + " is shorter than the checkpoint");
  r.trace.resize(r.state.epoch + 1);
  return r;
}

// Plans may differ only in how long they run.
void check_resumable(const TrainPlan& saved, const TrainPlan& now) {
  json a = saved, b = now;
  for (auto* j : {&a, &b}) {
    j->erase("max_epochs");
    j->erase("patience");
  }
  if (a != b) throw Error("cannot resume: the training plan changed (only max_epochs and patience may differ)");
}

fs::path train_run(const json& config, const TrainPlan& plan, const fs::path& dir, const PreparedData& data,
                   TrainingData td, const ModelParameters<float>* init, bool resume, std::ostream& log) {
  const auto model = model_config(config, data.tokenizer.vocab().size());
  td.vocab_checksum = data.tokenizer.vocab().checksum();
  td.eval_sets = eval_sets(data);
  bool has_valid = false;
  for (const auto& s : td.eval_sets) has_valid = has_valid || s.name == plan.valid_split;
  if (!has_valid) throw Error("validation split '" + plan.valid_split + "' is missing from the prepared data");

  RunOptions options;
  options.init = init;
  RunResult previous;
  if (resume) {
    if (!fs::exists(dir / "last.ckpt")) throw Error("nothing to resume in " + dir.string());
    const auto saved = load_checkpoint((dir / "last.ckpt").string());
    require_vocab(saved, td.vocab_checksum);
    check_resumable(saved.plan.get<TrainPlan>(), plan);
    previous = load_run(dir);
    if (previous.state.stopped || previous.state.epoch >= plan.max_epochs) {
      log << "run in " << dir.string() << " is already complete" << std::endl;
      return dir;
    }
    options.resume = &previous;
    log << "resuming " << dir.string() << " after epoch " << previous.state.epoch << std::endl;
  } else if (fs::exists(dir / "trace.jsonl") || fs::exists(dir / "last.ckpt")) {
    throw Error("run directory " + dir.string() + " already has results; pass --resume or choose another --run-id");
  }
  fs::create_directories(dir);
  write_atomic(dir / "config.resolved.json", dump_json(config));
  const RunWriter writer{dir, model, plan, td.vocab_checksum, log};
  options.on_epoch = std::cref(writer);
  const auto result = run_training(plan, model, td, options);
  log << "best epoch " << result.state.best_epoch << " (" << plan.valid_split << " ppl " << result.state.best_valid
      << ")" << std::endl;
  return dir;
}

}  // namespace

// ---------------------------------------------------------------------------

OutputLock::OutputLock(const fs::path& root) : path_(root / ".fgl.lock") {
  fs::create_directories(root);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw Error("output directory " + root.string() + " is in use by another fgl command (remove " +
                  path_.string() + " if that command is no longer running)");
    }
    throw Error("cannot create " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

const std::vector<SequencePair>& PreparedData::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end() || it->second.empty()) throw Error("split '" + name + "' was not prepared");
  return it->second;
}

fs::path out_root(const json& config) { return fs::path(config.at("out").get<std::string>()); }
fs::path prepared_dir(const json& config) { return out_root(config) / "prepared"; }

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

PreparedData load_prepared(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw Error("no prepared data in " + dir.string() + " (run `fgl prepare`)");
  PreparedData d;
  d.tokenizer = Tokenizer(load_merges((dir / "merges.txt").string()), load_vocabulary((dir / "vocab.txt").string()));
  const auto manifest = json::parse(read_file(dir / "manifest.json"));
  for (const auto& [name, entry] : manifest.at("inputs").items()) {
    d.splits[name] = pairs_from_jsonl(dir / (name + ".pairs.jsonl"));
  }
  return d;
}

bool cmd_prepare(const json& config, std::ostream& log) {
  const auto& data = config.at("data");
  const fs::path dir = prepared_dir(config);
  OutputLock lock(out_root(config));

  json inputs = json::object();
  for (const auto& [name, documents] : kSplits) {
    const auto path = data.at(name).get<std::string>();
    if (path.empty()) continue;
    if (!fs::exists(path)) throw Error("corpus file for data." + name + " not found: " + path);
    inputs[name] = {{"path", fs::absolute(path).lexically_normal().string()}, {"fnv1a", file_hash(path)}};
  }
  if (!inputs.contains("pretrain") && !inputs.contains("target")) {
    throw Error("nothing to prepare: set data.pretrain and/or data.target");
  }
  json settings = {{"merges", data.at("merges")},
                   {"pretrain_objective", data.at("pretrain_objective")},
                   {"max_context", data.at("max_context")}};
  if (data.at("pretrain_objective") == "mass") settings["seed"] = config.at("seed");

  if (fs::exists(dir / "manifest.json")) {
    const auto old = json::parse(read_file(dir / "manifest.json"));
    bool current = old.value("inputs", json()) == inputs && old.value("settings", json()) == settings;
    const json outputs = old.value("outputs", json::object());
    for (const auto& [file, hash] : outputs.items()) {
      current = current && fs::exists(dir / file) && file_hash(dir / file) == hash.get<std::string>();
    }
    if (current) {
      log << "prepared data in " << dir.string() << " is up to date" << std::endl;
      return false;
    }
  }

  std::vector<std::string> lines;
  for (const auto& [name, documents] : kSplits) {
    if ((name == "pretrain" || name == "target") && inputs.contains(name)) {
      auto l = corpus_lines(data.at(name).get<std::string>(), documents);
      lines.insert(lines.end(), l.begin(), l.end());
    }
  }
  log << "training BPE with " << data.at("merges").get<std::size_t>() << " merges on " << lines.size() << " lines"
      << std::endl;
  const auto tok = Tokenizer::train(lines, data.at("merges").get<std::size_t>());

  std::map<std::string, std::string> files;
  {
    const fs::path tmp_merges = dir / "merges.txt.build", tmp_vocab = dir / "vocab.txt.build";
    fs::create_directories(dir);
    save_merges(tok.bpe(), tmp_merges.string());
    save_vocabulary(tok.vocab(), tmp_vocab.string());
    files["merges.txt"] = read_file(tmp_merges);
    files["vocab.txt"] = read_file(tmp_vocab);
    fs::remove(tmp_merges);
    fs::remove(tmp_vocab);
  }
  Rng mass_rng(Rng::derive(config.at("seed").get<std::uint64_t>(), 3));
  for (const auto& [name, documents] : kSplits) {
    if (!inputs.contains(name)) continue;
    const auto pairs = encode_split(data.at(name).get<std::string>(), documents, tok, data, mass_rng);
    log << name << ": " << pairs.size() << " pairs" << std::endl;
    files[name + ".pairs.jsonl"] = pairs_to_jsonl(pairs);
  }
  files["config.resolved.json"] = dump_json(config);

  json outputs = json::object();
  for (const auto& [file, content] : files) {
    write_atomic(dir / file, content);
    outputs[file] = text::hex64(text::fnv1a(content));
  }
  const json manifest = {{"inputs", inputs},
                         {"settings", settings},
                         {"outputs", outputs},
                         {"vocab_size", tok.vocab().size()},
                         {"vocab_checksum", tok.vocab().checksum()}};
  write_atomic(dir / "manifest.json", dump_json(manifest));
  log << "wrote " << dir.string() << " (vocabulary " << tok.vocab().size() << ")" << std::endl;
  return true;
}

fs::path cmd_pretrain(const json& config, bool resume, std::ostream& log) {
  OutputLock lock(out_root(config));
  const auto data = load_prepared(prepared_dir(config));
  const auto plan = pretrain_plan(config);
  const auto dir = run_dir(config, "pretrain-" + config.at("data").at("pretrain_objective").get<std::string>() + "-s" +
                                       std::to_string(plan.seed));
  TrainingData td;
  td.train = data.split("pretrain");
  return train_run(config, plan, dir, data, std::move(td), nullptr, resume, log);
}

fs::path cmd_finetune(const json& config, const std::vector<std::string>& checkpoints, bool resume,
                      std::ostream& log) {
  OutputLock lock(out_root(config));
  const auto data = load_prepared(prepared_dir(config));
  const auto base = finetune_plan(config);

  std::optional<Checkpoint> init;
  if (starts_from_random(base.strategy)) {
    if (!checkpoints.empty()) throw UsageError(to_string(base.strategy) + " starts from random initialization; drop --checkpoint");
  } else {
    if (checkpoints.size() != 1) throw UsageError(to_string(base.strategy) + " needs exactly one --checkpoint to start from");
    init = load_checkpoint(checkpoints[0]);
    require_vocab(*init, data.tokenizer.vocab().checksum());
    if (init->config != model_config(config, data.tokenizer.vocab().size())) {
      throw Error("checkpoint " + checkpoints[0] + " has a different model configuration than the config");
    }
  }
  const auto* init_params = init ? &init->params : nullptr;

  TrainingData td;
  td.train = data.split("target");
  if (base.mix) td.pretrain_pool = data.split("pretrain");

  const auto dir = run_dir(config, "finetune-" + to_string(base.strategy) + "-s" + std::to_string(base.seed));
  const auto& g = config.at("finetune").at("grid");
  const auto cells = expand_grid(g.at("mix_ratio").get<std::vector<double>>(), g.at("mix_decay").get<std::vector<double>>(),
                                 g.at("lambda").get<std::vector<double>>(), g.at("lr").get<std::vector<double>>());
  const bool grid = cells.size() > 1 || cells.front().mix_ratio || cells.front().mix_decay || cells.front().lambda ||
                    cells.front().lr;
  if (!grid) return train_run(config, base, dir, data, std::move(td), init_params, resume, log);

  GridResult result;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto plan = apply_cell(base, cells[i]);
    log << "grid cell " << i + 1 << "/" << cells.size() << std::endl;
    const auto cell_dir = dir / ("cell-" + std::to_string(i));
    train_run(config, plan, cell_dir, data, td, init_params, resume, log);
    const auto trace = load_trace((cell_dir / "trace.jsonl").string());
    const auto last = load_checkpoint((cell_dir / "last.ckpt").string());
    const auto best_epoch = last.train_state->best_epoch;
    result.table.push_back({cells[i], trace.at(best_epoch).ppl.at(plan.valid_split), best_epoch});
    if (result.table.back().valid_ppl < result.table[result.best_index].valid_ppl) result.best_index = i;
  }
  result.best_plan = apply_cell(base, cells[result.best_index]);
  write_atomic(dir / "grid.csv", grid_table_csv(result));
  write_atomic(dir / "config.resolved.json", dump_json(config));
  log << "best cell: cell-" << result.best_index << " (" << base.valid_split << " ppl "
      << result.table[result.best_index].valid_ppl << ")" << std::endl;
  return dir;
}

// ---------------------------------------------------------------------------
// Probes

namespace {

json sensitivity_json(const SensitivityResult& s, const std::string& split) {
  return {{"split", split},
          {"clean_ppl", s.clean_ppl},
          {"drop_ppl", s.drop_ppl},
          {"shuffle_ppl", s.shuffle_ppl},
          {"drop_increase", s.drop_increase},
          {"shuffle_increase", s.shuffle_increase},
          {"cell", format_sensitivity_cell(s)}};
}

std::string report_name(std::size_t index, const std::string& checkpoint) {
  const fs::path p(checkpoint);
  std::string name = std::to_string(index) + "-";
  if (p.has_parent_path() && p.parent_path().has_filename()) name += p.parent_path().filename().string() + "-";
  name += p.stem().string();
  for (auto& c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return name;
}

void check_finite(const json& j, const std::string& where) {
  if (j.is_number_float() && !std::isfinite(j.get<double>())) throw Error("non-finite value at " + where);
  if (j.is_structured()) {
    for (const auto& [k, v] : j.items()) check_finite(v, where + "." + k);
  }
}

json projection_json(const Projection& p, const std::vector<std::string>& ids) {
  json points = json::array();
  for (std::size_t i = 0; i < p.points.size(); ++i) {
    points.push_back({{"checkpoint", ids[i]}, {"x", p.points[i][0]}, {"y", p.points[i][1]}});
  }
  return {{"points", points},
          {"component_variance", p.component_variance},
          {"captured_variance", p.captured_variance()},
          {"total_variance", p.total_variance}};
}

}  // namespace

fs::path cmd_probe(const json& config, const std::vector<std::string>& checkpoints, std::ostream& log) {
  if (checkpoints.empty()) throw UsageError("probe needs at least one --checkpoint");
  OutputLock lock(out_root(config));
  const auto data = load_prepared(prepared_dir(config));
  const auto& pc = config.at("probes");
  const auto probes = probe_list(config);
  const auto has = [&](const std::string& p) { return std::find(probes.begin(), probes.end(), p) != probes.end(); };
  const auto seed = config.at("seed").get<std::uint64_t>();
  const auto decoder = decoder_settings(config);
  const auto splits = pc.at("splits").get<std::vector<std::string>>();
  if (splits.empty()) throw Error("probes.splits is empty");

  std::string id = config.at("run_id").get<std::string>();
  if (id.empty()) id = "probe-s" + std::to_string(seed);
  const fs::path dir = out_root(config) / "probes" / id;
  fs::create_directories(dir);
  write_atomic(dir / "config.resolved.json", dump_json(config));

  json settings = pc;
  settings["decoder"] = decoder;
  std::vector<Checkpoint> loaded;
  std::vector<std::string> ids;
  for (std::size_t ci = 0; ci < checkpoints.size(); ++ci) {
    const auto& path = checkpoints[ci];
    auto ckpt = load_checkpoint(path);
    require_vocab(ckpt, data.tokenizer.vocab().checksum());
    const std::string name = report_name(ci, path);
    log << "probing " << path << std::endl;

    json report = {{"checkpoint", path},
                   {"checkpoint_id", file_hash(path)},
                   {"epoch", ckpt.epoch},
                   {"seed", seed},
                   {"settings", settings},
                   {"errors", json::object()}};
    auto guarded = [&](const std::string& probe, const std::function<json()>& fn) {
      if (!has(probe)) return;
      try {
        report[probe] = fn();
        check_finite(report[probe], probe);
      } catch (const std::exception& e) {
        report.erase(probe);
        report["errors"][probe] = e.what();
        log << "  " << probe << " failed: " << e.what() << std::endl;
      }
    };
    const auto& model = ckpt.config;
    const auto& params = ckpt.params;

    guarded("ppl", [&] {
      json out = json::object();
      for (const auto& s : splits) out[s] = perplexity<float>(params, model, data.split(s));
      return out;
    });
    guarded("sensitivity", [&] {
      const auto& s = splits.front();
      return sensitivity_json(context_sensitivity<float>(params, model, data.split(s), seed, pc.at("drop_rate").get<double>()), s);
    });
    guarded("knowledge", [&] {
      const auto terms_path = pc.at("knowledge_terms").get<std::string>();
      if (terms_path.empty()) throw Error("probes.knowledge_terms is not set");
      auto terms = load_knowledge_terms(terms_path);
      const auto max_terms = pc.at("max_terms").get<std::size_t>();
      if (max_terms > 0 && terms.size() > max_terms) terms.resize(max_terms);
      const auto tpath = pc.at("templates").get<std::string>();
      const auto style = parse_template_style(pc.at("template_style").get<std::string>());
      const auto templates = templates_of_style(tpath.empty() ? default_templates() : load_templates(tpath), style);
      const auto gen = model_generator(params, model, data.tokenizer, decoder);
      const auto r = knowledge_probe(terms, templates, pc.at("samples_per_trigger").get<std::size_t>(), gen, seed);
      return json{{"bleu2", r.bleu2}, {"bleu3", r.bleu3}, {"samples", r.samples}, {"terms", terms.size()},
                  {"template_style", to_string(style)}};
    });
    guarded("diversity", [&] {
      const auto& pairs = data.split(splits.front());
      const std::size_t n = std::min(pairs.size(), pc.at("diversity_contexts").get<std::size_t>());
      std::vector<TokenIds> responses;
      std::string dump;
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t sample_seed = Rng::derive(seed, i);
        Rng rng(sample_seed);
        responses.push_back(generate<float>(params, model, pairs[i].context, decoder, rng));
        dump += json{{"context", data.tokenizer.decode(pairs[i].context)},
                     {"response", data.tokenizer.decode(responses.back())},
                     {"seed", sample_seed},
                     {"k", decoder.k}}
                    .dump() +
                "\n";
      }
      if (responses.empty()) throw Error("no contexts to generate from");
      write_atomic(dir / (name + ".generations.jsonl"), dump);
      const auto m = diversity_metrics(responses);
      return json{{"responses", n},
                  {"bigram_entropy", m.bigram_entropy},
                  {"trigram_entropy", m.trigram_entropy},
                  {"top1_percent", m.top1_percent},
                  {"top2_percent", m.top2_percent},
                  {"max_ratio", format_max_ratio(m)}};
    });
    write_atomic(dir / (name + ".json"), dump_json(report));
    loaded.push_back(std::move(ckpt));
    ids.push_back(path);
  }

  if (has("projection")) {
    json report = {{"checkpoints", ids}, {"seed", seed}, {"settings", settings}, {"errors", json::object()}};
    try {
      if (loaded.size() < 2) throw Error("projection needs at least 2 checkpoints");
      std::vector<std::vector<SequencePair>> sets;
      for (const auto& s : splits) sets.push_back(data.split(s));
      std::vector<std::vector<double>> fvecs, pvecs;
      std::vector<std::size_t> counts;
      for (const auto& c : loaded) {
        auto fv = function_space_vector<float>(c.params, c.config, sets, pc.at("token_budget").get<std::size_t>());
        counts = fv.counts;
        fvecs.push_back(std::move(fv.values));
        pvecs.push_back(parameter_space_vector(c.params));
      }
      report["function_space"] = projection_json(project_2d(fvecs), ids);
      report["function_space"]["token_counts"] = counts;
      report["parameter_space"] = projection_json(project_2d(pvecs), ids);
    } catch (const std::exception& e) {
      report["errors"]["projection"] = e.what();
      log << "  projection failed: " << e.what() << std::endl;
    }
    write_atomic(dir / "projection.json", dump_json(report));
  }
  log << "reports in " << dir.string() << std::endl;
  return dir;
}

// ---------------------------------------------------------------------------
// Chat

ChatSession::ChatSession(Checkpoint checkpoint, Tokenizer tokenizer, DecoderSettings settings, std::size_t max_context)
    : checkpoint_(std::move(checkpoint)),
      tokenizer_(std::move(tokenizer)),
      settings_(settings),
      max_context_(max_context),
      rng_(settings.seed) {
  require_vocab(checkpoint_, tokenizer_.vocab().checksum());
}

TokenIds ChatSession::context() const { return join_context(history_, max_context_); }

std::string ChatSession::reply(const std::string& user_text) {
  const auto words = text::normalize_whitespace(user_text);
  if (words.empty()) throw Error("empty message");
  history_.push_back(tokenizer_.encode(words));
  turns_.push_back(words);
  const auto ids = generate<float>(checkpoint_.params, checkpoint_.config, context(), settings_, rng_);
  const auto text = tokenizer_.decode(ids);
  history_.push_back(ids);
  turns_.push_back(text);
  return text;
}

void ChatSession::reset() {
  history_.clear();
  turns_.clear();
}

void ChatSession::set_seed(std::uint64_t seed) { rng_ = Rng(seed); }

void ChatSession::set_k(std::size_t k) {
  DecoderSettings s = settings_;
  s.k = k;
  s.validate();
  settings_ = s;
}

void cmd_chat(const json& config, const std::string& checkpoint, std::istream& in, std::ostream& out) {
  const auto data_dir = prepared_dir(config);
  const Tokenizer tok(load_merges((data_dir / "merges.txt").string()), load_vocabulary((data_dir / "vocab.txt").string()));
  ChatSession chat(load_checkpoint(checkpoint), tok, decoder_settings(config),
                   config.at("data").at("max_context").get<std::size_t>());
  const auto transcript = config.at("chat").at("transcript").get<std::string>();
  auto save = [&] {
    if (transcript.empty() || chat.transcript().empty()) return;
    std::ofstream f(transcript, std::ios::app);
    if (!f) throw Error("cannot append to " + transcript);
    f << dialogue_to_jsonl(chat.transcript()) << '\n';
  };

  out << "commands: :reset  :seed N  :k N  :quit" << std::endl;
  std::string line;
  while (out << "> " << std::flush, std::getline(in, line)) {
    const auto words = text::split_words(line);
    if (words.empty()) continue;
    if (words[0] == ":quit") break;
    try {
      if (words[0] == ":reset") {
        save();
        chat.reset();
        out << "(history cleared)" << std::endl;
      } else if (words[0] == ":seed" || words[0] == ":k") {
        if (words.size() != 2) throw Error("usage: " + words[0] + " N");
        if (words[1].find_first_not_of("0123456789") != std::string::npos || words[1].size() > 18) {
          throw Error("not a number: " + words[1]);
        }
        const auto n = std::stoull(words[1]);
        if (words[0] == ":seed") {
          chat.set_seed(n);
        } else {
          chat.set_k(n);
        }
        out << "(" << words[0].substr(1) << " = " << n << ")" << std::endl;
      } else if (words[0][0] == ':') {
        throw Error("unknown command " + words[0]);
      } else {
        out << chat.reply(line) << std::endl;
      }
    } catch (const std::exception& e) {
      out << "error: " << e.what() << std::endl;
    }
  }
  save();
}

// ---------------------------------------------------------------------------
// Synthetic toy data

void cmd_synth(const SynthOptions& o, const fs::path& dir, std::ostream& log) {
  const World world = make_world(o.entities, o.world_seed);
  Rng rng(o.data_seed);
  const auto news = make_news_corpus(world, o.news_docs, rng);
  const auto news_valid = make_news_corpus(world, o.news_valid_docs, rng);
  const auto dialogues = make_dialogue_corpus(world, o.dialogues, rng);
  const auto dialogues_valid = make_dialogue_corpus(world, o.valid_dialogues, rng);
  fs::create_directories(dir);
  save_document_corpus(news, (dir / "news.txt").string());
  save_document_corpus(news_valid, (dir / "news_valid.txt").string());
  save_dialogue_corpus(dialogues, (dir / "dialogues.jsonl").string());
  save_dialogue_corpus(dialogues_valid, (dir / "dialogues_valid.jsonl").string());
  save_knowledge_terms(world_knowledge_terms(world), (dir / "knowledge_terms.jsonl").string());
  const json config = {{"data",
                        {{"pretrain", "news.txt"},
                         {"pretrain_valid", "news_valid.txt"},
                         {"target", "dialogues.jsonl"},
                         {"target_valid", "dialogues_valid.jsonl"}}},
                       {"probes", {{"knowledge_terms", "knowledge_terms.jsonl"}}}};
  write_atomic(dir / "config.json", dump_json(config));
  log << "wrote toy corpora and config.json to " << dir.string() << std::endl;
}

}  // namespace fgl::cli
