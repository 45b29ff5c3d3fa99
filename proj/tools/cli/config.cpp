#include "cli/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fgl/error.hpp"
#include "fgl/probes.hpp"

namespace fgl::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kProbeNames = {"ppl", "sensitivity", "knowledge", "diversity", "projection"};

// Keys whose default is null accept either null or a number.
const std::set<std::string> kNullableNumbers = {"max_grad_norm"};

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // an integer slot rejects fractional and negative values; a float slot takes either
    if (a.is_number_integer()) return b.is_number_unsigned() || (b.is_number_integer() && b.get<std::int64_t>() >= 0);
    return true;
  }
  return a.type() == b.type();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Relative paths in a config file are relative to that file.
void resolve_paths(json& config, const fs::path& base) {
  if (base.empty()) return;
  auto fix = [&](json& slot) {
    const auto p = slot.get<std::string>();
    if (!p.empty() && fs::path(p).is_relative()) slot = (base / p).lexically_normal().string();
  };
  for (const char* key : {"pretrain", "pretrain_valid", "target", "target_valid"}) fix(config["data"][key]);
  fix(config["probes"]["knowledge_terms"]);
  fix(config["probes"]["templates"]);
  fix(config["chat"]["transcript"]);
  fix(config["out"]);
}

}  // namespace

json default_config() {
  return json{
      {"seed", 1},
      {"out", ""},
      {"run_id", ""},
      {"data",
       {{"pretrain", ""},
        {"pretrain_valid", ""},
        {"target", ""},
        {"target_valid", ""},
        {"pretrain_objective", "ns"},
        {"merges", 300},
        {"max_context", kMaxContextTokens}}},
      {"model",
       {{"num_layers", 2},
        {"num_heads", 4},
        {"d_model", 64},
        {"d_ff", 256},
        {"dropout", 0.1},
        {"max_positions", 160}}},
      {"pretrain",
       {{"scheduler", "inverse-sqrt"},
        {"lr", 2e-3},
        {"warmup", 300},
        {"max_epochs", 5},
        {"patience", 2},
        {"batch_size", 32},
        {"max_grad_norm", nullptr}}},
      {"finetune",
       {{"strategy", "standard-finetune"},
        {"scheduler", "plateau-halving"},
        {"lr", 1e-3},
        {"warmup", 4000},
        {"mix_ratio", 4.0},
        {"mix_decay", 0.7},
        {"lambda", 0.1},
        {"max_epochs", 10},
        {"patience", 2},
        {"batch_size", 32},
        {"max_grad_norm", nullptr},
        {"grid", {{"mix_ratio", json::array()}, {"mix_decay", json::array()}, {"lambda", json::array()}, {"lr", json::array()}}}}},
      {"decoder", {{"k", 30}, {"max_len", 40}, {"beam_width", 4}}},
      {"probes",
       {{"list", json::array({"ppl", "sensitivity", "knowledge", "diversity", "projection"})},
        {"splits", json::array({"target_valid", "pretrain_valid"})},
        {"drop_rate", 0.3},
        {"knowledge_terms", ""},
        {"templates", ""},
        {"template_style", "dialogue"},
        {"samples_per_trigger", 10},
        {"max_terms", 50},
        {"token_budget", 1000},
        {"diversity_contexts", 200}}},
      {"chat", {{"transcript", ""}}},
  };
}

std::string default_out_root() {
  const char* env = std::getenv("FGL_OUT");
  return env && *env ? env : "runs";
}

void merge_config(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw UsageError("config" + (where.empty() ? "" : " key '" + where + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw UsageError("unknown config key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else if (kNullableNumbers.count(key) && (value.is_null() || value.is_number())) {
      slot = value;
    } else if (!same_kind(slot, value)) {
      throw UsageError("config key '" + path + "' has the wrong type (expected " + std::string(slot.type_name()) + ")");
    } else {
      slot = value;
    }
  }
}

json resolve_config(const FlagOverrides& flags) {
  json config = default_config();
  if (flags.config_path) {
    std::ifstream in(*flags.config_path);
    if (!in) throw UsageError("cannot open config file " + *flags.config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError("config file " + *flags.config_path + ": " + e.what());
    }
    merge_config(config, file);
    resolve_paths(config, fs::path(*flags.config_path).parent_path());
  }
  if (flags.seed) config["seed"] = *flags.seed;
  if (flags.strategy) config["finetune"]["strategy"] = *flags.strategy;
  if (flags.mix_ratio) config["finetune"]["mix_ratio"] = *flags.mix_ratio;
  if (flags.mix_decay) config["finetune"]["mix_decay"] = *flags.mix_decay;
  if (flags.lambda) config["finetune"]["lambda"] = *flags.lambda;
  if (flags.lr) config["finetune"]["lr"] = *flags.lr;
  if (flags.k) config["decoder"]["k"] = *flags.k;
  if (flags.out) config["out"] = *flags.out;
  if (flags.run_id) config["run_id"] = *flags.run_id;
  if (flags.probes) config["probes"]["list"] = split_list(*flags.probes);
  if (config["out"].get<std::string>().empty()) config["out"] = default_out_root();
  validate_config(config);
  return config;
}

void validate_config(const json& config) {
  try {
    model_config(config, 16).validate();
    pretrain_plan(config).validate();
    const auto ft = finetune_plan(config);
    ft.validate();
    if (ft.strategy == Strategy::PretrainNs || ft.strategy == Strategy::PretrainMass) {
      throw UsageError("finetune.strategy cannot be a pretraining strategy");
    }
    decoder_settings(config).validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto objective = config["data"]["pretrain_objective"].get<std::string>();
  if (objective != "ns" && objective != "mass") throw UsageError("data.pretrain_objective must be 'ns' or 'mass'");
  if (config["data"]["max_context"].get<std::size_t>() == 0) throw UsageError("data.max_context must be positive");
  for (const auto& p : probe_list(config)) {
    if (!kProbeNames.count(p)) throw UsageError("unknown probe '" + p + "'");
  }
  const double drop = config["probes"]["drop_rate"].get<double>();
  if (!(drop >= 0.0 && drop < 1.0)) throw UsageError("probes.drop_rate must be in [0, 1)");
  try {
    parse_template_style(config["probes"]["template_style"].get<std::string>());
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  for (const auto& [axis, values] : config["finetune"]["grid"].items()) {
    for (const auto& v : values) {
      if (!v.is_number()) throw UsageError("finetune.grid." + axis + " must list numbers");
    }
  }
  const auto run_id = config["run_id"].get<std::string>();
  if (run_id.find('/') != std::string::npos || run_id == "." || run_id == "..") {
    throw UsageError("run_id must be a plain name");
  }
}

TransformerConfig model_config(const json& config, std::size_t vocab_size) {
  const auto& m = config.at("model");
  TransformerConfig c;
  c.num_layers = m.at("num_layers").get<std::size_t>();
  c.num_heads = m.at("num_heads").get<std::size_t>();
  c.d_model = m.at("d_model").get<std::size_t>();
  c.d_ff = m.at("d_ff").get<std::size_t>();
  c.dropout_rate = m.at("dropout").get<double>();
  c.max_positions = m.at("max_positions").get<std::size_t>();
  c.vocab_size = vocab_size;
  return c;
}

namespace {

void common_plan_fields(const json& s, TrainPlan& p) {
  p.scheduler = parse_scheduler(s.at("scheduler").get<std::string>());
  p.base_lr = s.at("lr").get<double>();
  p.warmup = s.at("warmup").get<std::uint64_t>();
  p.max_epochs = s.at("max_epochs").get<std::size_t>();
  p.patience = s.at("patience").get<std::size_t>();
  p.batch_size = s.at("batch_size").get<std::size_t>();
  if (!s.at("max_grad_norm").is_null()) p.max_grad_norm = s.at("max_grad_norm").get<double>();
}

}  // namespace

TrainPlan pretrain_plan(const json& config) {
  TrainPlan p;
  p.strategy = config.at("data").at("pretrain_objective") == "mass" ? Strategy::PretrainMass : Strategy::PretrainNs;
  common_plan_fields(config.at("pretrain"), p);
  p.seed = config.at("seed").get<std::uint64_t>();
  p.valid_split = "pretrain_valid";
  return p;
}

TrainPlan finetune_plan(const json& config) {
  const auto& s = config.at("finetune");
  TrainPlan p;
  p.strategy = parse_strategy(s.at("strategy").get<std::string>());
  common_plan_fields(s, p);
  p.seed = config.at("seed").get<std::uint64_t>();
  p.valid_split = "target_valid";
  if (p.strategy == Strategy::MixReview || p.strategy == Strategy::MixTrain) {
    p.mix = MixSettings{s.at("mix_ratio").get<double>(), s.at("mix_decay").get<double>()};
  }
  if (p.strategy == Strategy::WdPre) p.lambda = s.at("lambda").get<double>();
  return p;
}

DecoderSettings decoder_settings(const json& config) {
  const auto& d = config.at("decoder");
  DecoderSettings s;
  s.k = d.at("k").get<std::size_t>();
  s.max_len = d.at("max_len").get<std::size_t>();
  s.beam_width = d.at("beam_width").get<std::size_t>();
  s.seed = config.at("seed").get<std::uint64_t>();
  return s;
}

std::vector<std::string> probe_list(const json& config) {
  return config.at("probes").at("list").get<std::vector<std::string>>();
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

}  // namespace fgl::cli
