#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "../unit/helpers.hpp"
#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "fgl/corpus.hpp"
#include "fgl/error.hpp"
#include "fgl/training.hpp"

using namespace fgl;
using namespace fgl::cli;
using nlohmann::json;
using testing::TempDir;

namespace {

// Tiny corpora and model so a full prepare/train/probe round takes seconds.
json tiny_config(const TempDir& dir) {
  SynthOptions o;
  o.entities = 12;
  o.news_docs = 30;
  o.news_valid_docs = 6;
  o.dialogues = 20;
  o.valid_dialogues = 6;
  std::ostringstream log;
  cmd_synth(o, dir.path / "toy", log);
  const json file = {
      {"data",
       {{"pretrain", "news.txt"},
        {"pretrain_valid", "news_valid.txt"},
        {"target", "dialogues.jsonl"},
        {"target_valid", "dialogues_valid.jsonl"},
        {"merges", 40}}},
      {"model", {{"num_layers", 1}, {"num_heads", 2}, {"d_model", 8}, {"d_ff", 16}}},
      {"pretrain", {{"max_epochs", 2}, {"warmup", 5}}},
      {"finetune", {{"max_epochs", 2}}},
      {"probes",
       {{"knowledge_terms", "knowledge_terms.jsonl"},
        {"max_terms", 2},
        {"samples_per_trigger", 1},
        {"diversity_contexts", 4},
        {"token_budget", 20}}},
  };
  testing::write_file(dir.file("toy/cfg.json"), file.dump());
  FlagOverrides f;
  f.config_path = dir.file("toy/cfg.json");
  f.out = dir.file("out");
  return resolve_config(f);
}

std::vector<MetricRow> without_wall(MetricTrace t) {
  for (auto& r : t) r.wall_seconds = 0;
  return t;
}

}  // namespace

TEST_CASE("config: defaults < file < flags") {
  TempDir dir;
  testing::write_file(dir.file("c.json"), R"({"seed": 7, "finetune": {"lr": 0.01, "strategy": "mix-review"}})");
  FlagOverrides f;
  f.config_path = dir.file("c.json");
  f.lr = 0.5;
  const auto c = resolve_config(f);
  CHECK(c["seed"] == 7);
  CHECK(c["finetune"]["lr"] == 0.5);
  CHECK(c["finetune"]["strategy"] == "mix-review");
  CHECK(c["finetune"]["mix_decay"] == 0.7);
  CHECK(finetune_plan(c).mix.has_value());
}

TEST_CASE("config: unknown keys and wrong types are usage errors") {
  TempDir dir;
  FlagOverrides f;
  f.config_path = dir.file("c.json");
  testing::write_file(*f.config_path, R"({"model": {"layers": 3}})");
  CHECK_THROWS_WITH_AS(resolve_config(f), doctest::Contains("model.layers"), UsageError);
  testing::write_file(*f.config_path, R"({"seed": "one"})");
  CHECK_THROWS_AS(resolve_config(f), UsageError);
  testing::write_file(*f.config_path, R"({"model": {"d_model": 6.5}})");
  CHECK_THROWS_AS(resolve_config(f), UsageError);
  testing::write_file(*f.config_path, R"({"probes": {"list": ["ppl", "vibes"]}})");
  CHECK_THROWS_AS(resolve_config(f), UsageError);
  testing::write_file(*f.config_path, "{ not json");
  CHECK_THROWS_AS(resolve_config(f), UsageError);
  f.config_path.reset();
  f.strategy = "pretrain-ns";
  CHECK_THROWS_AS(resolve_config(f), UsageError);
}

TEST_CASE("config: relative paths resolve against the config file") {
  TempDir dir;
  std::filesystem::create_directories(dir.path / "sub");
  testing::write_file(dir.file("sub/c.json"), R"({"data": {"target": "d.jsonl"}})");
  FlagOverrides f;
  f.config_path = dir.file("sub/c.json");
  const auto c = resolve_config(f);
  CHECK(c["data"]["target"] == (dir.path / "sub" / "d.jsonl").string());
}

TEST_CASE("prepare: no-op rerun, rebuild on edit, missing corpus") {
  TempDir dir;
  auto config = tiny_config(dir);
  std::ostringstream log;
  CHECK(cmd_prepare(config, log));
  const auto manifest = testing::read_file(dir.file("out/prepared/manifest.json"));
  CHECK_FALSE(cmd_prepare(config, log));
  CHECK(testing::read_file(dir.file("out/prepared/manifest.json")) == manifest);

  {
    std::ofstream app(dir.file("toy/dialogues.jsonl"), std::ios::app);
    app << R"({"utterances": ["hello there .", "hi , how are you ?"]})" << "\n";
  }
  CHECK(cmd_prepare(config, log));
  CHECK(testing::read_file(dir.file("out/prepared/manifest.json")) != manifest);

  config["data"]["target"] = dir.file("toy/missing.jsonl");
  CHECK_THROWS_WITH_AS(cmd_prepare(config, log), doctest::Contains("missing.jsonl"), Error);
}

TEST_CASE("lock file rejects a concurrent command") {
  TempDir dir;
  OutputLock held(dir.path);
  CHECK_THROWS_AS(OutputLock(dir.path), Error);
}

TEST_CASE("pretrain resume reproduces the uninterrupted trace; probes are deterministic") {
  TempDir dir;
  auto config = tiny_config(dir);
  std::ostringstream log;
  cmd_prepare(config, log);
  const auto full = cmd_pretrain(config, false, log);
  CHECK_THROWS_AS(cmd_pretrain(config, false, log), Error);

  auto partial_cfg = config;
  partial_cfg["run_id"] = "partial";
  partial_cfg["pretrain"]["max_epochs"] = 1;
  cmd_pretrain(partial_cfg, false, log);
  partial_cfg["pretrain"]["max_epochs"] = 2;
  const auto resumed = cmd_pretrain(partial_cfg, true, log);
  const auto a = load_trace((full / "trace.jsonl").string());
  const auto b = load_trace((resumed / "trace.jsonl").string());
  REQUIRE(a.size() == 3);
  CHECK(without_wall(a) == without_wall(b));
  CHECK(load_checkpoint((full / "last.ckpt").string()).params ==
        load_checkpoint((resumed / "last.ckpt").string()).params);

  // a changed learning rate is not a continuation
  partial_cfg["pretrain"]["lr"] = 0.5;
  partial_cfg["pretrain"]["max_epochs"] = 3;
  CHECK_THROWS_AS(cmd_pretrain(partial_cfg, true, log), Error);

  const std::string ckpt = (full / "best.ckpt").string();
  CHECK_THROWS_AS(cmd_finetune(config, {}, false, log), UsageError);
  config["finetune"]["strategy"] = "mix-review";
  const auto ft = cmd_finetune(config, {ckpt}, false, log);
  const auto trace = load_trace((ft / "trace.jsonl").string());
  CHECK(trace.size() >= 2);
  CHECK(trace[1].pretrain_pairs > 0);

  config["run_id"] = "p1";
  const auto p1 = cmd_probe(config, {ckpt, (ft / "best.ckpt").string()}, log);
  config["run_id"] = "p2";
  const auto p2 = cmd_probe(config, {ckpt, (ft / "best.ckpt").string()}, log);
  for (const auto& name : {"0-pretrain-ns-s1-best.json", "1-finetune-mix-review-s1-best.json", "projection.json"}) {
    const auto t1 = testing::read_file((p1 / name).string());
    CHECK(!t1.empty());
    CHECK(t1 == testing::read_file((p2 / name).string()));
  }
  const auto report = json::parse(testing::read_file((p1 / "1-finetune-mix-review-s1-best.json").string()));
  for (const char* section : {"ppl", "sensitivity", "knowledge", "diversity"}) CHECK(report.contains(section));
  CHECK(report["errors"].empty());
  const auto projection = json::parse(testing::read_file((p1 / "projection.json").string()));
  CHECK(projection["function_space"]["points"].size() == 2);

  config["run_id"] = "subset";
  config["probes"]["list"] = {"ppl"};
  const auto ps = cmd_probe(config, {ckpt}, log);
  const auto only = json::parse(testing::read_file((ps / "0-pretrain-ns-s1-best.json").string()));
  CHECK(only.contains("ppl"));
  CHECK_FALSE(only.contains("sensitivity"));
  CHECK_FALSE(std::filesystem::exists(ps / "projection.json"));

  // a failing probe is recorded, the rest still run
  config["run_id"] = "broken";
  config["probes"]["list"] = {"ppl", "knowledge"};
  config["probes"]["knowledge_terms"] = dir.file("nope.jsonl");
  const auto pb = cmd_probe(config, {ckpt}, log);
  const auto broken = json::parse(testing::read_file((pb / "0-pretrain-ns-s1-best.json").string()));
  CHECK(broken.contains("ppl"));
  CHECK(broken["errors"].contains("knowledge"));

  // export: one curve per split plus the training loss
  const auto files = cmd_export({(full / "trace.jsonl").string(), (p1 / "1-finetune-mix-review-s1-best.json").string()},
                                dir.path / "export", log);
  CHECK(files.size() == 3);
  const auto svg = testing::read_file(dir.file("export/pretrain-ns-s1.nll.svg"));
  std::size_t curves = 0;
  for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++curves;
  CHECK(curves == 3);
  const auto table = testing::read_file(dir.file("export/reports.csv"));
  CHECK(table.find(report["sensitivity"]["cell"].get<std::string>()) != std::string::npos);
}

TEST_CASE("export: empty trace fails without writing anything") {
  TempDir dir;
  testing::write_file(dir.file("trace.jsonl"), "");
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_export({dir.file("trace.jsonl")}, dir.path / "export", log), Error);
  CHECK_FALSE(std::filesystem::exists(dir.path / "export"));
  testing::write_file(dir.file("bad.jsonl"), "{\"epoch\": 0, \"ppl\": \n");
  CHECK_THROWS_AS(cmd_export({dir.file("bad.jsonl")}, dir.path / "export", log), Error);
}

TEST_CASE("chat: context limit, greedy determinism, transcript round trip") {
  TempDir dir;
  auto config = tiny_config(dir);
  std::ostringstream log;
  cmd_prepare(config, log);
  const auto run = cmd_pretrain(config, false, log);
  const auto data = load_prepared(prepared_dir(config));
  const auto ckpt = load_checkpoint((run / "best.ckpt").string());

  ChatSession chat(ckpt, data.tokenizer, decoder_settings(config), 128);
  for (int i = 0; i < 10; ++i) {
    chat.reply("tell me more about the people you met in the town last week and where they live now");
    CHECK(chat.context().size() <= 128);
  }
  CHECK(chat.transcript().size() == 20);

  auto greedy = [&](std::uint64_t seed) {
    ChatSession c(ckpt, data.tokenizer, decoder_settings(config), 128);
    c.set_k(1);
    c.set_seed(seed);
    c.reply("hello");
    return c.reply("who is that ?");
  };
  CHECK(greedy(1) == greedy(99));
  CHECK_THROWS_AS(chat.set_k(0), Error);

  config["chat"]["transcript"] = dir.file("chat.jsonl");
  std::istringstream in("hello\n:k 1\nwhere do you live ?\n:bogus\n:quit\n");
  std::ostringstream out;
  cmd_chat(config, (run / "best.ckpt").string(), in, out);
  CHECK(out.str().find("error: unknown command") != std::string::npos);
  const auto saved = load_dialogue_corpus(dir.file("chat.jsonl"));
  REQUIRE(saved.dialogues.size() == 1);
  CHECK(saved.dialogues[0].size() == 4);
  CHECK(saved.dialogues[0][0] == "hello");
}
