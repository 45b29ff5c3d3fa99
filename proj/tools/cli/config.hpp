#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgl/decoding.hpp"
#include "fgl/model.hpp"
#include "fgl/training.hpp"

namespace fgl::cli {

/// Bad flags, bad config files, unknown keys. Maps to exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Values given on the command line; unset fields leave the config alone.
struct FlagOverrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> mix_ratio;
  std::optional<double> mix_decay;
  std::optional<double> lambda;
  std::optional<double> lr;
  std::optional<std::size_t> k;
  std::optional<std::string> out;
  std::optional<std::string> probes;  // comma separated
  std::optional<std::string> run_id;
};

/// Every key with its default. A config file may only use keys present here.
nlohmann::json default_config();

/// Output root used when neither the config nor --out sets one: $FGL_OUT,
/// else "runs".
std::string default_out_root();

/// Overlays `patch` onto `base`; throws UsageError naming the first key
/// that is not in `base` or whose JSON type does not match.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

/// defaults < config file < flags, then validation.
nlohmann::json resolve_config(const FlagOverrides& flags);

/// Throws UsageError on values the training or decoding code would reject.
void validate_config(const nlohmann::json& config);

TransformerConfig model_config(const nlohmann::json& config, std::size_t vocab_size);
TrainPlan pretrain_plan(const nlohmann::json& config);
TrainPlan finetune_plan(const nlohmann::json& config);
DecoderSettings decoder_settings(const nlohmann::json& config);
std::vector<std::string> probe_list(const nlohmann::json& config);

/// Stable JSON text used for resolved-config files and reports.
std::string dump_json(const nlohmann::json& j);

}  // namespace fgl::cli
