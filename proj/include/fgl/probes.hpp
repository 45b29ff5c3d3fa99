#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fgl/corpus.hpp"
#include "fgl/decoding.hpp"
#include "fgl/model.hpp"
#include "fgl/rng.hpp"
#include "fgl/tokenizer.hpp"

namespace fgl {

// ---------------------------------------------------------------------------
// Perplexity and context sensitivity

template <typename T>
double perplexity(const ModelParameters<T>& params, const TransformerConfig& config,
                  const std::vector<SequencePair>& pairs);

/// Removes exactly round(rate * n) positions chosen uniformly without
/// replacement, keeping the survivors in order.
TokenIds perturb_word_drop(const TokenIds& context, double rate, Rng& rng);

/// Uniform random permutation of the context tokens.
TokenIds perturb_word_shuffle(const TokenIds& context, Rng& rng);

struct SensitivityResult {
  double clean_ppl = 0.0;
  double drop_ppl = 0.0;
  double shuffle_ppl = 0.0;
  double drop_increase = 0.0;     // (drop_ppl - clean_ppl) / clean_ppl
  double shuffle_increase = 0.0;
};

/// Each pair gets one fixed corruption per condition, seeded from
/// (seed, pair index), so different checkpoints see identical inputs.
template <typename T>
SensitivityResult context_sensitivity(const ModelParameters<T>& params, const TransformerConfig& config,
                                      const std::vector<SequencePair>& pairs, std::uint64_t seed,
                                      double drop_rate = 0.3);

std::vector<SequencePair> perturb_pairs_drop(const std::vector<SequencePair>& pairs, std::uint64_t seed, double rate);
std::vector<SequencePair> perturb_pairs_shuffle(const std::vector<SequencePair>& pairs, std::uint64_t seed);

/// 0.41 -> "+41%"
std::string format_relative_increase(double fraction);
/// "+41%/+64%" (drop/shuffle)
std::string format_sensitivity_cell(const SensitivityResult& r);

// ---------------------------------------------------------------------------
// BLEU and the knowledge probe

/// Sentence BLEU: geometric mean of clipped 1..max_n precisions, zero
/// counts replaced by 1e-9, times exp(1 - r/c) when c < r.
double bleu_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference, int max_n);

struct KnowledgeTerm {
  std::string term;
  std::string description;
};

enum class TemplateStyle { News, Dialogue };

std::string to_string(TemplateStyle s);
TemplateStyle parse_template_style(const std::string& s);

struct TriggerTemplate {
  std::string text;  // exactly one whitespace-delimited "X"
  TemplateStyle style = TemplateStyle::News;

  std::string instantiate(const std::string& term) const;
};

/// The three news-style and three dialogue-style triggers.
std::vector<TriggerTemplate> default_templates();
std::vector<TriggerTemplate> parse_templates(const std::string& text);
std::vector<TriggerTemplate> load_templates(const std::string& path);
std::vector<TriggerTemplate> templates_of_style(const std::vector<TriggerTemplate>& all, TemplateStyle style);

std::vector<KnowledgeTerm> load_knowledge_terms(const std::string& path);
void save_knowledge_terms(const std::vector<KnowledgeTerm>& terms, const std::string& path);

/// Produces one response (surface text) for a trigger sentence.
using ResponseGenerator = std::function<std::string(const std::string& trigger, Rng& rng)>;

/// Top-k sampling from a model; triggers are encoded with the tokenizer.
ResponseGenerator model_generator(const ModelParameters<float>& params, const TransformerConfig& config,
                                  const Tokenizer& tokenizer, const DecoderSettings& settings);

struct KnowledgeResult {
  double bleu2 = 0.0;
  double bleu3 = 0.0;
  std::size_t samples = 0;
};

/// BLEU of every sample against the term's description, averaged over
/// samples, then triggers, then terms.
KnowledgeResult knowledge_probe(const std::vector<KnowledgeTerm>& terms, const std::vector<TriggerTemplate>& templates,
                                std::size_t samples_per_trigger, const ResponseGenerator& generator,
                                std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint projection

struct FunctionVector {
  std::vector<double> values;
  std::vector<std::size_t> counts;  // tokens actually used per set
};

/// Probability of each reference token for the first `token_budget`
/// predicted tokens of every set, concatenated in set order.
template <typename T>
FunctionVector function_space_vector(const ModelParameters<T>& params, const TransformerConfig& config,
                                     const std::vector<std::vector<SequencePair>>& sets, std::size_t token_budget);

/// Name-sorted concatenation of every parameter tensor.
template <typename T>
std::vector<double> parameter_space_vector(const ModelParameters<T>& params);

struct Projection {
  std::vector<std::array<double, 2>> points;
  std::array<double, 2> component_variance{};  // covariance eigenvalues, N-1 denominator
  double total_variance = 0.0;

  double captured_variance() const { return component_variance[0] + component_variance[1]; }
};

/// PCA onto the top two principal directions of the mean-centered vectors.
/// Each direction's largest-magnitude loading is made positive.
Projection project_2d(const std::vector<std::vector<double>>& vectors);

}  // namespace fgl
