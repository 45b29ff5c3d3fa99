// fgl: prepare corpora, train, probe, export and chat from the command line.
#include <iostream>

#include <CLI11.hpp>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "fgl/error.hpp"

namespace {

template <typename T>
void add_optional(CLI::App& app, const std::string& name, std::optional<T>& slot, const std::string& help) {
  app.add_option_function<T>(name, [&slot](const T& v) { slot = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace fgl::cli;

  CLI::App app{"Pretrain/finetune toolkit for seq2seq generation with forgetting probes"};
  app.require_subcommand(1);
  app.fallthrough();

  FlagOverrides flags;
  std::vector<std::string> checkpoints;
  bool resume = false;
  add_optional(app, "--config", flags.config_path, "JSON config file");
  add_optional(app, "--seed", flags.seed, "Random seed");
  add_optional(app, "--strategy", flags.strategy,
               "Finetuning strategy: standard-finetune, mix-review, wd-pre, mix-train, scratch-baseline");
  add_optional(app, "--mix-ratio", flags.mix_ratio, "Mix-review ratio");
  add_optional(app, "--mix-decay", flags.mix_decay, "Mix-review decay");
  add_optional(app, "--lambda", flags.lambda, "wd-pre strength");
  add_optional(app, "--lr", flags.lr, "Finetuning learning rate");
  add_optional(app, "--k", flags.k, "Top-k sampling width");
  add_optional(app, "--out", flags.out, "Output root (default $FGL_OUT, else ./runs)");
  add_optional(app, "--probes", flags.probes, "Comma-separated probes: ppl,sensitivity,knowledge,diversity,projection");
  add_optional(app, "--run-id", flags.run_id, "Name of the run or probe output directory");
  app.add_option("--checkpoint", checkpoints, "Checkpoint file (repeatable)");

  auto* prepare = app.add_subcommand("prepare", "Train the tokenizer and encode the corpora");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain on the pretraining corpus");
  auto* finetune = app.add_subcommand("finetune", "Finetune on the target corpus");
  for (auto* sub : {pretrain, finetune}) sub->add_flag("--resume", resume, "Continue the run from its last checkpoint");
  auto* probe = app.add_subcommand("probe", "Run behavior probes on checkpoints");
  auto* chat = app.add_subcommand("chat", "Interactive multi-turn chat with a checkpoint");

  std::vector<std::string> export_inputs;
  auto* exp = app.add_subcommand("export", "Turn traces and probe reports into CSV tables and SVG plots");
  exp->add_option("inputs", export_inputs, "trace.jsonl, probe report or projection.json files")->required();

  SynthOptions synth_options;
  std::string synth_dir;
  auto* synth = app.add_subcommand("synth", "Write the synthetic toy corpora and a starter config");
  synth->add_option("dir", synth_dir, "Destination directory")->required();
  synth->add_option("--entities", synth_options.entities, "Number of people in the toy world");
  synth->add_option("--world-seed", synth_options.world_seed, "Seed for the toy world");
  synth->add_option("--data-seed", synth_options.data_seed, "Seed for the sampled documents and dialogues");
  synth->add_option("--news-docs", synth_options.news_docs, "Pretraining documents");
  synth->add_option("--dialogues", synth_options.dialogues, "Target dialogues");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto& log = std::cerr;
    if (synth->parsed()) {
      cmd_synth(synth_options, synth_dir, log);
      return 0;
    }
    if (exp->parsed()) {
      const auto out = flags.out ? *flags.out : default_out_root();
      cmd_export(export_inputs, std::filesystem::path(out) / "export", log);
      return 0;
    }
    const auto config = resolve_config(flags);
    if (prepare->parsed()) {
      cmd_prepare(config, log);
    } else if (pretrain->parsed()) {
      std::cout << cmd_pretrain(config, resume, log).string() << "\n";
    } else if (finetune->parsed()) {
      std::cout << cmd_finetune(config, checkpoints, resume, log).string() << "\n";
    } else if (probe->parsed()) {
      std::cout << cmd_probe(config, checkpoints, log).string() << "\n";
    } else if (chat->parsed()) {
      if (checkpoints.size() != 1) throw UsageError("chat needs exactly one --checkpoint");
      cmd_chat(config, checkpoints[0], std::cin, std::cout);
    }
  } catch (const UsageError& e) {
    std::cerr << "fgl: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fgl: error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
