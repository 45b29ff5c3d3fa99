#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fgl/corpus.hpp"
#include "fgl/rng.hpp"
#include "fgl/tokenizer.hpp"

namespace fgl {

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  double dropout_rate = 0.1;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 160;

  /// Throws on indivisible heads, zero dimensions or an invalid rate.
  void validate() const;

  bool operator==(const TransformerConfig&) const = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 64-byte aligned storage. Eigen's vectorized reductions peel differently
/// depending on the start address, so unaligned buffers would make results
/// depend on where the allocator happened to put them.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  AlignedVector<T> values;

  std::size_t rows() const { return shape.empty() ? 0 : (shape.size() == 1 ? 1 : shape[0]); }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }

  Eigen::Map<Matrix<T>> mat() {
    return {values.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<const Matrix<T>> mat() const {
    return {values.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }

  bool operator==(const Tensor&) const = default;
};

/// Named tensors keyed (and therefore iterated) in name order. Used for
/// parameters, gradients and optimizer moments alike.
template <typename T>
struct NamedTensors {
  std::map<std::string, Tensor<T>> tensors;

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) > 0; }
  std::size_t parameter_count() const;
  NamedTensors zeros_like() const;
  /// Throws unless names and shapes agree.
  void check_compatible(const NamedTensors& other) const;
  bool all_finite() const;

  template <typename U>
  NamedTensors<U> cast() const {
    NamedTensors<U> out;
    for (const auto& [name, t] : tensors) {
      Tensor<U> c{t.shape, AlignedVector<U>(t.values.begin(), t.values.end())};
      out.tensors.emplace(name, std::move(c));
    }
    return out;
  }

  bool operator==(const NamedTensors&) const = default;
};

template <typename T>
using ModelParameters = NamedTensors<T>;
template <typename T>
using GradientSet = NamedTensors<T>;

enum class Mode { Train, Eval };

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; zero biases, unit
/// layer-norm gains.
template <typename T>
ModelParameters<T> init_parameters(const TransformerConfig& config, Rng& rng);

/// Logits for every decoder input position of every pair, rows ordered
/// (pair, position); shape (size * (target_len - 1), vocab_size).
/// `rng` may be null in eval mode.
template <typename T>
Matrix<T> forward(const ModelParameters<T>& params, const TransformerConfig& config, const Batch& batch, Mode mode,
                  Rng* rng);

/// Single-sequence form: logits for each position of `target_prefix`
/// (decoder input), shape (prefix length, vocab_size).
template <typename T>
Matrix<T> forward(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                  const TokenIds& target_prefix, Mode mode, Rng* rng);

struct LossResult {
  double mean = 0.0;
  std::vector<double> per_token;  // one entry per row; 0 at padded rows
  std::size_t count = 0;          // non-pad rows
};

/// Token-level NLL over the rows whose mask is set.
template <typename T>
LossResult nll_loss(const Matrix<T>& logits, const std::vector<TokenId>& target_ids,
                    const std::vector<std::uint8_t>& mask);

/// Labels (y_1..y_m) and their mask for `forward`'s row layout.
std::pair<std::vector<TokenId>, std::vector<std::uint8_t>> shifted_labels(const Batch& batch);

template <typename T>
struct BackwardResult {
  double loss = 0.0;  // mean token NLL
  std::size_t tokens = 0;
  GradientSet<T> grads;
};

/// Train-mode forward plus exact gradients of the mean token NLL.
/// `loss_scale` multiplies the loss before differentiation.
template <typename T>
BackwardResult<T> backward(const ModelParameters<T>& params, const TransformerConfig& config, const Batch& batch,
                           Rng* rng, Mode mode = Mode::Train, double loss_scale = 1.0);

/// Sum over t of log P(y_t | y_<t, x) for a framed target (BOS..EOS).
template <typename T>
double sequence_logprob(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                        const TokenIds& target_ids);

/// Encoder output for one context, reused across decoding steps.
template <typename T>
struct EncodedContext {
  Matrix<T> memory;
  std::vector<std::uint8_t> mask;
};

template <typename T>
EncodedContext<T> encode_context(const ModelParameters<T>& params, const TransformerConfig& config,
                                 const TokenIds& context_ids);

/// Eval-mode log-probabilities for the token following each prefix.
/// Every prefix starts with BOS; all rows share the encoded context.
template <typename T>
std::vector<std::vector<double>> next_token_logprobs(const ModelParameters<T>& params,
                                                     const TransformerConfig& config,
                                                     const EncodedContext<T>& context,
                                                     const std::vector<TokenIds>& prefixes);

template <typename T>
std::vector<double> log_softmax_row(const T* logits, std::size_t n);

struct NllTotal {
  double total = 0.0;
  std::size_t tokens = 0;
};

/// Summed eval-mode NLL over all predicted target tokens of `pairs`.
template <typename T>
NllTotal corpus_nll(const ModelParameters<T>& params, const TransformerConfig& config,
                    const std::vector<SequencePair>& pairs, std::size_t batch_size = 64);

}  // namespace fgl
