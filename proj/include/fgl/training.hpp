#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgl/corpus.hpp"
#include "fgl/model.hpp"

namespace fgl {

// ---------------------------------------------------------------------------
// Optimizer and learning-rate schedules

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

template <typename T>
struct OptimizerState {
  NamedTensors<T> m;
  NamedTensors<T> v;
  std::uint64_t step = 0;
  AdamSettings settings;

  bool operator==(const OptimizerState& o) const {
    return m == o.m && v == o.v && step == o.step && settings.beta1 == o.settings.beta1 &&
           settings.beta2 == o.settings.beta2 && settings.eps == o.settings.eps;
  }
};

template <typename T>
OptimizerState<T> make_optimizer_state(const ModelParameters<T>& params, AdamSettings settings = {});

/// Bias-corrected Adam update. Throws before touching anything if a
/// gradient is non-finite.
template <typename T>
void adam_step(ModelParameters<T>& params, const GradientSet<T>& grads, OptimizerState<T>& state, double lr);

/// base_lr * min(step / warmup, sqrt(warmup / step)).
double lr_inverse_sqrt(std::uint64_t step, std::uint64_t warmup, double base_lr);

/// Halves the learning rate whenever a validation PPL fails to beat the best
/// seen so far.
struct PlateauState {
  double lr = 0.0;
  double best = 0.0;
  bool has_best = false;
};

double lr_plateau_halve(PlateauState& state, double valid_ppl);

/// L2 pull toward reference parameters: penalty lambda * sum (theta - ref)^2
/// and its gradient 2 lambda (theta - ref).
template <typename T>
struct WdPreResult {
  double penalty = 0.0;
  GradientSet<T> gradient;
};

template <typename T>
WdPreResult<T> wd_pre(const ModelParameters<T>& params, const ModelParameters<T>& theta_pre, double lambda);

/// Adds the wd_pre gradient into `grads` in place; returns the penalty.
template <typename T>
double add_wd_pre(GradientSet<T>& grads, const ModelParameters<T>& params, const ModelParameters<T>& theta_pre,
                  double lambda);

/// Rescales gradients so that their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(GradientSet<T>& grads, double max_norm);

// ---------------------------------------------------------------------------
// Plans

enum class Strategy { StandardFinetune, MixReview, WdPre, MixTrain, PretrainNs, PretrainMass, ScratchBaseline };
enum class Scheduler { InverseSqrt, PlateauHalving };

std::string to_string(Strategy s);
std::string to_string(Scheduler s);
Strategy parse_strategy(const std::string& s);
Scheduler parse_scheduler(const std::string& s);

/// Whether a run with this strategy starts from random parameters.
bool starts_from_random(Strategy s);

struct MixSettings {
  double ratio = 4.0;
  double decay = 0.7;
};

struct TrainPlan {
  Strategy strategy = Strategy::StandardFinetune;
  double base_lr = 1e-4;
  Scheduler scheduler = Scheduler::PlateauHalving;
  std::uint64_t warmup = 4000;
  std::optional<MixSettings> mix;
  std::optional<double> lambda;
  std::size_t max_epochs = 20;
  std::size_t patience = 2;
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  std::optional<double> max_grad_norm;
  std::string valid_split = "target_valid";
  AdamSettings adam;

  /// Checks the strategy/mix/lambda pairing rules.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainPlan& p);
void from_json(const nlohmann::json& j, TrainPlan& p);

// ---------------------------------------------------------------------------
// Runs

struct EvalSet {
  std::string name;
  std::vector<SequencePair> pairs;
};

struct TrainingData {
  /// Pairs optimized every epoch: target pairs when finetuning, pretraining
  /// pairs for the pretrain strategies.
  std::vector<SequencePair> train;
  /// Pool sampled by mix-review / mix-train.
  std::vector<SequencePair> pretrain_pool;
  std::vector<EvalSet> eval_sets;
  std::string vocab_checksum;
};

struct MetricRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  std::map<std::string, double> ppl;
  std::map<std::string, double> nll;
  double train_nll = 0.0;     // mean token NLL over the epoch's batches
  double wd_penalty = 0.0;    // mean penalty over the epoch's steps
  double train_loss = 0.0;    // train_nll + wd_penalty
  std::size_t train_pairs = 0;
  std::size_t pretrain_pairs = 0;
  double wall_seconds = 0.0;

  bool operator==(const MetricRow&) const = default;
};

void to_json(nlohmann::json& j, const MetricRow& r);
void from_json(const nlohmann::json& j, MetricRow& r);

using MetricTrace = std::vector<MetricRow>;

std::string trace_to_jsonl(const MetricTrace& trace);
MetricTrace trace_from_jsonl(const std::string& text);
void save_trace(const MetricTrace& trace, const std::string& path);
MetricTrace load_trace(const std::string& path);

/// Bookkeeping needed to continue a run exactly where it stopped.
struct TrainState {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  PlateauState plateau;
  double best_valid = 0.0;
  std::size_t best_epoch = 0;
  std::size_t since_improvement = 0;
  bool stopped = false;
  std::string rng_state;
};

void to_json(nlohmann::json& j, const TrainState& s);
void from_json(const nlohmann::json& j, TrainState& s);

struct RunResult {
  ModelParameters<float> best;
  ModelParameters<float> last;
  OptimizerState<float> optimizer;
  TrainState state;
  MetricTrace trace;
};

/// Called after every evaluation (including the initial one) with the
/// current run state.
using EpochCallback = std::function<void(const RunResult&)>;

struct RunOptions {
  /// Starting parameters; also theta_pre for wd-pre. Null means random
  /// initialization from the plan seed.
  const ModelParameters<float>* init = nullptr;
  /// Continue a previous run instead of starting fresh.
  const RunResult* resume = nullptr;
  EpochCallback on_epoch;
};

/// Per-split perplexity and NLL under eval mode.
std::pair<std::map<std::string, double>, std::map<std::string, double>> evaluate_splits(
    const ModelParameters<float>& params, const TransformerConfig& config, const std::vector<EvalSet>& sets);

RunResult run_training(const TrainPlan& plan, const TransformerConfig& config, const TrainingData& data,
                       const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Grid search

struct GridCell {
  std::optional<double> mix_ratio;
  std::optional<double> mix_decay;
  std::optional<double> lambda;
  std::optional<double> lr;
};

struct GridRow {
  GridCell cell;
  double valid_ppl = 0.0;
  std::size_t best_epoch = 0;
};

struct GridResult {
  std::size_t best_index = 0;
  TrainPlan best_plan;
  std::vector<GridRow> table;
};

/// Cartesian product; an empty axis leaves that field unset.
std::vector<GridCell> expand_grid(const std::vector<double>& mix_ratios, const std::vector<double>& mix_decays,
                                  const std::vector<double>& lambdas, const std::vector<double>& lrs);

TrainPlan apply_cell(const TrainPlan& base, const GridCell& cell);

/// Runs every cell with the template's seed; the best cell has the lowest
/// best-epoch PPL on the plan's validation split (first wins ties).
GridResult grid_search(const TrainPlan& plan_template, const std::vector<GridCell>& grid,
                       const TransformerConfig& config, const TrainingData& data, const RunOptions& options = {});

std::string grid_table_csv(const GridResult& result);

}  // namespace fgl
