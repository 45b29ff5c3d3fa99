#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgl/checkpoint.hpp"
#include "fgl/decoding.hpp"
#include "fgl/tokenizer.hpp"

namespace fgl::cli {

namespace fs = std::filesystem;

/// Held for the duration of a command that writes under an output root.
/// A second command on the same root fails instead of interleaving writes.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& root);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

/// Tokenizer plus encoded splits written by `prepare`.
struct PreparedData {
  Tokenizer tokenizer;
  std::map<std::string, std::vector<SequencePair>> splits;

  const std::vector<SequencePair>& split(const std::string& name) const;
};

fs::path out_root(const nlohmann::json& config);
fs::path prepared_dir(const nlohmann::json& config);
PreparedData load_prepared(const fs::path& dir);

/// Writes `content` to `path` through a temporary file and a rename.
void write_atomic(const fs::path& path, const std::string& content);

/// Returns false when nothing had to be rebuilt.
bool cmd_prepare(const nlohmann::json& config, std::ostream& log);

/// Both return the run directory.
fs::path cmd_pretrain(const nlohmann::json& config, bool resume, std::ostream& log);
fs::path cmd_finetune(const nlohmann::json& config, const std::vector<std::string>& checkpoints, bool resume,
                      std::ostream& log);

/// Returns the probe output directory.
fs::path cmd_probe(const nlohmann::json& config, const std::vector<std::string>& checkpoints, std::ostream& log);

/// Multi-turn chat state: utterance history, sampling settings and RNG.
class ChatSession {
 public:
  ChatSession(Checkpoint checkpoint, Tokenizer tokenizer, DecoderSettings settings, std::size_t max_context);

  /// Adds the user turn, samples a reply, adds the reply, returns it.
  std::string reply(const std::string& user_text);
  void reset();
  void set_seed(std::uint64_t seed);
  void set_k(std::size_t k);
  TokenIds context() const;
  const std::vector<std::string>& transcript() const { return turns_; }

 private:
  Checkpoint checkpoint_;
  Tokenizer tokenizer_;
  DecoderSettings settings_;
  std::size_t max_context_;
  Rng rng_;
  std::vector<TokenIds> history_;
  std::vector<std::string> turns_;
};

/// REPL over the given streams; lines starting with ':' are commands.
void cmd_chat(const nlohmann::json& config, const std::string& checkpoint, std::istream& in, std::ostream& out);

/// Turns traces (JSONL) and probe reports (JSON) into CSV tables and SVG
/// plots. Nothing is written unless every input converts.
std::vector<fs::path> cmd_export(const std::vector<std::string>& inputs, const fs::path& out_dir, std::ostream& log);

struct SynthOptions {
  std::size_t entities = 120;
  std::uint64_t world_seed = 2024;
  std::uint64_t data_seed = 77;
  std::size_t news_docs = 4400;
  std::size_t news_valid_docs = 120;
  std::size_t dialogues = 400;
  std::size_t valid_dialogues = 100;
};

/// Writes the synthetic toy corpora, knowledge terms and a starter config.
void cmd_synth(const SynthOptions& options, const fs::path& dir, std::ostream& log);

}  // namespace fgl::cli
