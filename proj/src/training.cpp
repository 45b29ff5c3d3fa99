#include "fgl/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fgl/error.hpp"

namespace fgl {

template <typename T>
OptimizerState<T> make_optimizer_state(const ModelParameters<T>& params, AdamSettings settings) {
  OptimizerState<T> s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  s.settings = settings;
  return s;
}

template <typename T>
void adam_step(ModelParameters<T>& params, const GradientSet<T>& grads, OptimizerState<T>& state, double lr) {
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  params.check_compatible(grads);
  params.check_compatible(state.m);
  if (!grads.all_finite()) throw Error("non-finite gradient");

  state.step += 1;
  const auto& s = state.settings;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(s.eps);
  for (auto& [name, p] : params.tensors) {
    const auto& g = grads.at(name).values;
    auto& m = state.m.at(name).values;
    auto& v = state.v.at(name).values;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      p.values[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
    }
  }
}

double lr_inverse_sqrt(std::uint64_t step, std::uint64_t warmup, double base_lr) {
  if (step < 1 || warmup < 1) throw Error("lr_inverse_sqrt: step and warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

double lr_plateau_halve(PlateauState& state, double valid_ppl) {
  if (!state.has_best || valid_ppl < state.best) {
    state.best = valid_ppl;
    state.has_best = true;
  } else {
    state.lr *= 0.5;
  }
  return state.lr;
}

template <typename T>
WdPreResult<T> wd_pre(const ModelParameters<T>& params, const ModelParameters<T>& theta_pre, double lambda) {
  WdPreResult<T> r;
  r.gradient = params.zeros_like();
  r.penalty = add_wd_pre(r.gradient, params, theta_pre, lambda);
  return r;
}

template <typename T>
double add_wd_pre(GradientSet<T>& grads, const ModelParameters<T>& params, const ModelParameters<T>& theta_pre,
                  double lambda) {
  params.check_compatible(theta_pre);
  params.check_compatible(grads);
  double sq = 0.0;
  const T two_lambda = static_cast<T>(2.0 * lambda);
  for (const auto& [name, p] : params.tensors) {
    const auto& ref = theta_pre.at(name).values;
    auto& g = grads.at(name).values;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const T diff = p.values[i] - ref[i];
      sq += static_cast<double>(diff) * static_cast<double>(diff);
      g[i] += two_lambda * diff;
    }
  }
  return lambda * sq;
}

template <typename T>
double clip_grad_norm(GradientSet<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads.tensors) {
    for (T v : g.values) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads.tensors) {
      for (T& v : g.values) v *= scale;
    }
  }
  return norm;
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::StandardFinetune: return "standard-finetune";
    case Strategy::MixReview: return "mix-review";
    case Strategy::WdPre: return "wd-pre";
    case Strategy::MixTrain: return "mix-train";
    case Strategy::PretrainNs: return "pretrain-ns";
    case Strategy::PretrainMass: return "pretrain-mass";
    case Strategy::ScratchBaseline: return "scratch-baseline";
  }
  return "?";
}

std::string to_string(Scheduler s) { return s == Scheduler::InverseSqrt ? "inverse-sqrt" : "plateau-halving"; }

Strategy parse_strategy(const std::string& s) {
  for (auto v : {Strategy::StandardFinetune, Strategy::MixReview, Strategy::WdPre, Strategy::MixTrain,
                 Strategy::PretrainNs, Strategy::PretrainMass, Strategy::ScratchBaseline}) {
    if (to_string(v) == s) return v;
  }
  throw Error("unknown strategy: " + s);
}

Scheduler parse_scheduler(const std::string& s) {
  if (s == "inverse-sqrt") return Scheduler::InverseSqrt;
  if (s == "plateau-halving") return Scheduler::PlateauHalving;
  throw Error("unknown scheduler: " + s);
}

bool starts_from_random(Strategy s) {
  return s == Strategy::MixTrain || s == Strategy::PretrainNs || s == Strategy::PretrainMass ||
         s == Strategy::ScratchBaseline;
}

void TrainPlan::validate() const {
  const bool mixing = strategy == Strategy::MixReview || strategy == Strategy::MixTrain;
  if (mixing != mix.has_value()) {
    throw Error(mixing ? "strategy " + to_string(strategy) + " requires a mix schedule"
                       : "mix schedule given for strategy " + to_string(strategy));
  }
  if ((strategy == Strategy::WdPre) != lambda.has_value()) {
    throw Error(strategy == Strategy::WdPre ? "strategy wd-pre requires lambda"
                                            : "lambda given for strategy " + to_string(strategy));
  }
  if (mix && (mix->ratio < 0.0 || !(mix->decay > 0.0 && mix->decay <= 1.0))) throw Error("invalid mix schedule");
  if (lambda && *lambda < 0.0) throw Error("lambda must be nonnegative");
  if (!(base_lr > 0.0)) throw Error("base_lr must be positive");
  if (batch_size < 1) throw Error("batch_size must be >= 1");
  if (warmup < 1) throw Error("warmup must be >= 1");
}

void to_json(nlohmann::json& j, const TrainPlan& p) {
  j = nlohmann::json{{"strategy", to_string(p.strategy)},
                     {"base_lr", p.base_lr},
                     {"scheduler", to_string(p.scheduler)},
                     {"warmup", p.warmup},
                     {"max_epochs", p.max_epochs},
                     {"patience", p.patience},
                     {"seed", p.seed},
                     {"batch_size", p.batch_size},
                     {"valid_split", p.valid_split},
                     {"adam", {{"beta1", p.adam.beta1}, {"beta2", p.adam.beta2}, {"eps", p.adam.eps}}}};
  j["mix"] = p.mix ? nlohmann::json{{"ratio", p.mix->ratio}, {"decay", p.mix->decay}} : nlohmann::json();
  j["lambda"] = p.lambda ? nlohmann::json(*p.lambda) : nlohmann::json();
  j["max_grad_norm"] = p.max_grad_norm ? nlohmann::json(*p.max_grad_norm) : nlohmann::json();
}

void from_json(const nlohmann::json& j, TrainPlan& p) {
  p.strategy = parse_strategy(j.at("strategy").get<std::string>());
  p.base_lr = j.at("base_lr").get<double>();
  p.scheduler = parse_scheduler(j.at("scheduler").get<std::string>());
  p.warmup = j.at("warmup").get<std::uint64_t>();
  p.max_epochs = j.at("max_epochs").get<std::size_t>();
  p.patience = j.at("patience").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.batch_size = j.at("batch_size").get<std::size_t>();
  p.valid_split = j.at("valid_split").get<std::string>();
  const auto& a = j.at("adam");
  p.adam = AdamSettings{a.at("beta1").get<double>(), a.at("beta2").get<double>(), a.at("eps").get<double>()};
  p.mix.reset();
  if (j.contains("mix") && !j["mix"].is_null()) {
    p.mix = MixSettings{j["mix"].at("ratio").get<double>(), j["mix"].at("decay").get<double>()};
  }
  p.lambda.reset();
  if (j.contains("lambda") && !j["lambda"].is_null()) p.lambda = j["lambda"].get<double>();
  p.max_grad_norm.reset();
  if (j.contains("max_grad_norm") && !j["max_grad_norm"].is_null()) p.max_grad_norm = j["max_grad_norm"].get<double>();
}

void to_json(nlohmann::json& j, const MetricRow& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"step", r.step},
                     {"lr", r.lr},
                     {"ppl", r.ppl},
                     {"nll", r.nll},
                     {"train_nll", r.train_nll},
                     {"wd_penalty", r.wd_penalty},
                     {"train_loss", r.train_loss},
                     {"train_pairs", r.train_pairs},
                     {"pretrain_pairs", r.pretrain_pairs},
                     {"wall_seconds", r.wall_seconds}};
}

void from_json(const nlohmann::json& j, MetricRow& r) {
  r.epoch = j.at("epoch").get<std::size_t>();
  r.lr = j.at("lr").get<double>();
  r.ppl = j.at("ppl").get<std::map<std::string, double>>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.step = j.value("step", std::uint64_t{0});
  r.nll = j.value("nll", std::map<std::string, double>{});
  r.train_nll = j.value("train_nll", 0.0);
  r.wd_penalty = j.value("wd_penalty", 0.0);
  r.train_loss = j.value("train_loss", 0.0);
  r.train_pairs = j.value("train_pairs", std::size_t{0});
  r.pretrain_pairs = j.value("pretrain_pairs", std::size_t{0});
}

std::string trace_to_jsonl(const MetricTrace& trace) {
  std::string out;
  for (const auto& row : trace) {
    out += nlohmann::json(row).dump();
    out += '\n';
  }
  return out;
}

MetricTrace trace_from_jsonl(const std::string& text) {
  MetricTrace trace;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      trace.push_back(nlohmann::json::parse(line).get<MetricRow>());
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed trace at line " + std::to_string(n) + ": " + e.what());
    }
  }
  return trace;
}

void save_trace(const MetricTrace& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << trace_to_jsonl(trace);
}

MetricTrace load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return trace_from_jsonl(ss.str());
}

void to_json(nlohmann::json& j, const TrainState& s) {
  j = nlohmann::json{{"epoch", s.epoch},
                     {"step", s.step},
                     {"lr", s.lr},
                     {"plateau", {{"lr", s.plateau.lr}, {"best", s.plateau.best}, {"has_best", s.plateau.has_best}}},
                     {"best_valid", s.best_valid},
                     {"best_epoch", s.best_epoch},
                     {"since_improvement", s.since_improvement},
                     {"stopped", s.stopped},
                     {"rng_state", s.rng_state}};
}

void from_json(const nlohmann::json& j, TrainState& s) {
  s.epoch = j.at("epoch").get<std::size_t>();
  s.step = j.at("step").get<std::uint64_t>();
  s.lr = j.at("lr").get<double>();
  s.plateau.lr = j.at("plateau").at("lr").get<double>();
  s.plateau.best = j.at("plateau").at("best").get<double>();
  s.plateau.has_best = j.at("plateau").at("has_best").get<bool>();
  s.best_valid = j.at("best_valid").get<double>();
  s.best_epoch = j.at("best_epoch").get<std::size_t>();
  s.since_improvement = j.at("since_improvement").get<std::size_t>();
  s.stopped = j.at("stopped").get<bool>();
  s.rng_state = j.at("rng_state").get<std::string>();
}

std::pair<std::map<std::string, double>, std::map<std::string, double>> evaluate_splits(
    const ModelParameters<float>& params, const TransformerConfig& config, const std::vector<EvalSet>& sets) {
  std::map<std::string, double> ppl, nll;
  for (const auto& set : sets) {
    if (set.pairs.empty()) throw Error("empty evaluation set: " + set.name);
    const NllTotal t = corpus_nll<float>(params, config, set.pairs);
    const double mean = t.total / static_cast<double>(t.tokens);
    nll[set.name] = mean;
    ppl[set.name] = std::exp(mean);
  }
  return {std::move(ppl), std::move(nll)};
}

namespace {

constexpr std::size_t kBucketWindow = 16;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double valid_ppl(const TrainPlan& plan, const MetricRow& row) {
  auto it = row.ppl.find(plan.valid_split);
  if (it == row.ppl.end()) throw Error("validation split not registered: " + plan.valid_split);
  return it->second;
}

}  // namespace

RunResult run_training(const TrainPlan& plan, const TransformerConfig& config, const TrainingData& data,
                       const RunOptions& options) {
  plan.validate();
  config.validate();
  if (plan.strategy == Strategy::MixTrain && options.init != nullptr) {
    throw Error("mix-train starts from random initialization");
  }
  if (plan.strategy == Strategy::WdPre && options.init == nullptr) {
    throw Error("wd-pre requires pretrained parameters");
  }
  if (data.train.empty()) throw Error("no training pairs");

  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(Rng::derive(plan.seed, 2));
  RunResult r;

  if (options.resume != nullptr) {
    r = *options.resume;
    r.last.check_compatible(r.optimizer.m);
    rng.set_state(r.state.rng_state);
  } else {
    if (options.init != nullptr) {
      r.last = *options.init;
    } else {
      Rng init_rng(Rng::derive(plan.seed, 1));
      r.last = init_parameters<float>(config, init_rng);
    }
    r.optimizer = make_optimizer_state(r.last, plan.adam);
    r.state.lr = plan.base_lr;
    r.state.plateau.lr = plan.base_lr;

    MetricRow row;
    std::tie(row.ppl, row.nll) = evaluate_splits(r.last, config, data.eval_sets);
    row.lr = plan.base_lr;
    row.wall_seconds = seconds_since(t0);
    const double v = valid_ppl(plan, row);
    lr_plateau_halve(r.state.plateau, v);
    r.state.best_valid = v;
    r.state.best_epoch = 0;
    r.best = r.last;
    r.trace.push_back(std::move(row));
    r.state.rng_state = rng.state();
    if (options.on_epoch) options.on_epoch(r);
  }
  if (options.init != nullptr) r.last.check_compatible(*options.init);

  MixSchedule schedule{0.0, 1.0, data.train.size()};
  if (plan.mix) schedule = MixSchedule{plan.mix->ratio, plan.mix->decay, data.train.size()};

  while (!r.state.stopped && r.state.epoch < plan.max_epochs) {
    const std::size_t epoch = r.state.epoch + 1;
    const auto pairs = compose_epoch(data.train, data.pretrain_pool, epoch, schedule, rng);
    const auto batches = bucketed_batches(pairs, plan.batch_size, kBucketWindow, rng);

    double nll_sum = 0.0, penalty_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      r.state.step += 1;
      const double lr = plan.scheduler == Scheduler::InverseSqrt
                            ? lr_inverse_sqrt(r.state.step, plan.warmup, plan.base_lr)
                            : r.state.plateau.lr;
      r.state.lr = lr;
      BackwardResult<float> res;
      try {
        res = backward<float>(r.last, config, batches[bi], &rng);
      } catch (const Error& e) {
        throw Error(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ")");
      }
      double penalty = 0.0;
      if (plan.strategy == Strategy::WdPre) penalty = add_wd_pre(res.grads, r.last, *options.init, *plan.lambda);
      if (plan.max_grad_norm) clip_grad_norm(res.grads, *plan.max_grad_norm);
      adam_step(r.last, res.grads, r.optimizer, lr);
      nll_sum += res.loss * static_cast<double>(res.tokens);
      tokens += res.tokens;
      penalty_sum += penalty;
    }

    MetricRow row;
    row.epoch = epoch;
    row.step = r.state.step;
    row.lr = r.state.lr;
    std::tie(row.ppl, row.nll) = evaluate_splits(r.last, config, data.eval_sets);
    row.train_nll = tokens ? nll_sum / static_cast<double>(tokens) : 0.0;
    row.wd_penalty = batches.empty() ? 0.0 : penalty_sum / static_cast<double>(batches.size());
    row.train_loss = row.train_nll + row.wd_penalty;
    row.pretrain_pairs = pairs.size() - data.train.size();
    row.train_pairs = data.train.size();
    row.wall_seconds = seconds_since(t0);

    const double v = valid_ppl(plan, row);
    if (v < r.state.best_valid) {
      r.state.best_valid = v;
      r.state.best_epoch = epoch;
      r.state.since_improvement = 0;
      r.best = r.last;
    } else {
      r.state.since_improvement += 1;
    }
    if (plan.scheduler == Scheduler::PlateauHalving) lr_plateau_halve(r.state.plateau, v);
    r.state.epoch = epoch;
    r.state.stopped = r.state.since_improvement >= plan.patience;
    r.state.rng_state = rng.state();
    r.trace.push_back(std::move(row));
    if (options.on_epoch) options.on_epoch(r);
  }
  return r;
}

std::vector<GridCell> expand_grid(const std::vector<double>& mix_ratios, const std::vector<double>& mix_decays,
                                  const std::vector<double>& lambdas, const std::vector<double>& lrs) {
  auto axis = [](const std::vector<double>& v) {
    std::vector<std::optional<double>> out;
    if (v.empty()) out.push_back(std::nullopt);
    for (double x : v) out.emplace_back(x);
    return out;
  };
  std::vector<GridCell> cells;
  for (auto r : axis(mix_ratios)) {
    for (auto d : axis(mix_decays)) {
      for (auto l : axis(lambdas)) {
        for (auto lr : axis(lrs)) cells.push_back(GridCell{r, d, l, lr});
      }
    }
  }
  return cells;
}

TrainPlan apply_cell(const TrainPlan& base, const GridCell& cell) {
  TrainPlan p = base;
  if (cell.mix_ratio || cell.mix_decay) {
    MixSettings m = p.mix.value_or(MixSettings{});
    if (cell.mix_ratio) m.ratio = *cell.mix_ratio;
    if (cell.mix_decay) m.decay = *cell.mix_decay;
    p.mix = m;
  }
  if (cell.lambda) p.lambda = *cell.lambda;
  if (cell.lr) p.base_lr = *cell.lr;
  return p;
}

GridResult grid_search(const TrainPlan& plan_template, const std::vector<GridCell>& grid,
                       const TransformerConfig& config, const TrainingData& data, const RunOptions& options) {
  if (grid.empty()) throw Error("empty grid");
  GridResult result;
  RunOptions cell_options = options;
  cell_options.resume = nullptr;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const TrainPlan plan = apply_cell(plan_template, grid[i]);
    const RunResult run = run_training(plan, config, data, cell_options);
    result.table.push_back(GridRow{grid[i], run.state.best_valid, run.state.best_epoch});
    if (i == 0 || run.state.best_valid < result.table[result.best_index].valid_ppl) result.best_index = i;
  }
  result.best_plan = apply_cell(plan_template, grid[result.best_index]);
  return result;
}

std::string grid_table_csv(const GridResult& result) {
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream os;
    os << *v;
    return os.str();
  };
  std::ostringstream os;
  os << "mix_ratio,mix_decay,lambda,lr,valid_ppl,best_epoch,best\n";
  os.precision(10);
  for (std::size_t i = 0; i < result.table.size(); ++i) {
    const auto& r = result.table[i];
    os << cell(r.cell.mix_ratio) << ',' << cell(r.cell.mix_decay) << ',' << cell(r.cell.lambda) << ','
       << cell(r.cell.lr) << ',' << r.valid_ppl << ',' << r.best_epoch << ',' << (i == result.best_index ? 1 : 0)
       << '\n';
  }
  return os.str();
}

template OptimizerState<float> make_optimizer_state<float>(const ModelParameters<float>&, AdamSettings);
template OptimizerState<double> make_optimizer_state<double>(const ModelParameters<double>&, AdamSettings);
template void adam_step<float>(ModelParameters<float>&, const GradientSet<float>&, OptimizerState<float>&, double);
template void adam_step<double>(ModelParameters<double>&, const GradientSet<double>&, OptimizerState<double>&,
                                double);
template WdPreResult<float> wd_pre<float>(const ModelParameters<float>&, const ModelParameters<float>&, double);
template WdPreResult<double> wd_pre<double>(const ModelParameters<double>&, const ModelParameters<double>&, double);
template double add_wd_pre<float>(GradientSet<float>&, const ModelParameters<float>&, const ModelParameters<float>&,
                                  double);
template double add_wd_pre<double>(GradientSet<double>&, const ModelParameters<double>&,
                                   const ModelParameters<double>&, double);
template double clip_grad_norm<float>(GradientSet<float>&, double);
template double clip_grad_norm<double>(GradientSet<double>&, double);

}  // namespace fgl
