#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgl/model.hpp"
#include "fgl/rng.hpp"
#include "fgl/tokenizer.hpp"

namespace fgl {

struct DecoderSettings {
  std::size_t k = 30;
  std::size_t max_len = 40;  // decoder steps, EOS included
  std::size_t beam_width = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const DecoderSettings& s);
void from_json(const nlohmann::json& j, DecoderSettings& s);

/// Indices of the k largest scores, best first; equal scores keep the lower id
/// first.
std::vector<TokenId> top_k_indices(const std::vector<double>& scores, std::size_t k);

/// Draws from the softmax restricted to the k highest logits.
TokenId top_k_sample_token(const std::vector<double>& logits, std::size_t k, Rng& rng);

/// Autoregressive top-k sampling from BOS. The result excludes BOS and the
/// terminating EOS.
template <typename T>
TokenIds generate(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                  const DecoderSettings& settings, Rng& rng);

struct BeamResult {
  TokenIds tokens;       // without BOS/EOS
  double score = 0.0;    // mean log-probability per generated step
  bool finished = false; // ended with EOS rather than the length cap
};

/// Length-normalized beam search. Hypotheses end at EOS or after max_len
/// steps; the finished hypothesis with the best mean log-probability wins.
template <typename T>
BeamResult beam_search(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                       std::size_t beam_width, std::size_t max_len);

/// Mean per-step log-probability of `tokens` (plus EOS when `finished`).
template <typename T>
double normalized_score(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                        const TokenIds& tokens, bool finished);

struct DiversityMetrics {
  double bigram_entropy = 0.0;   // bits
  double trigram_entropy = 0.0;  // bits
  double top1_percent = 0.0;
  double top2_percent = 0.0;
};

/// Pooled n-gram entropies and whole-response frequencies. Responses are
/// compared as token sequences.
DiversityMetrics diversity_metrics(const std::vector<std::vector<std::string>>& responses);
DiversityMetrics diversity_metrics(const std::vector<TokenIds>& responses);

/// "1.7% 1.3%"
std::string format_max_ratio(const DiversityMetrics& m);

}  // namespace fgl
