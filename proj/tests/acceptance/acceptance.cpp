// Acceptance report: one PASS/FAIL line per criterion. Criteria can be
// selected by number on the command line, e.g. `fgl_acceptance 4 5 6`.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fgl/checkpoint.hpp"
#include "fgl/decoding.hpp"
#include "fgl/probes.hpp"
#include "fgl/synthetic.hpp"
#include "fgl/text.hpp"
#include "fgl/training.hpp"

using namespace fgl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// Upper tail of chi-square via Wilson-Hilferty.
double chi_square_p(double stat, double dof) {
  const double z = (std::cbrt(stat / dof) - (1.0 - 2.0 / (9.0 * dof))) / std::sqrt(2.0 / (9.0 * dof));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

TransformerConfig tiny_config(std::size_t vocab, double dropout) {
  TransformerConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.dropout_rate = dropout;
  c.vocab_size = vocab;
  c.max_positions = 16;
  return c;
}

std::vector<SequencePair> random_pairs(std::uint64_t seed, std::size_t n, std::size_t vocab, Origin origin) {
  Rng rng(seed);
  std::vector<SequencePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    SequencePair p;
    p.origin = origin;
    const std::size_t lc = 1 + rng.below(6), lt = 1 + rng.below(4);
    for (std::size_t k = 0; k < lc; ++k) p.context.push_back(static_cast<TokenId>(6 + rng.below(vocab - 6)));
    p.target.push_back(Vocabulary::bos());
    for (std::size_t k = 0; k < lt; ++k) p.target.push_back(static_cast<TokenId>(6 + rng.below(vocab - 6)));
    p.target.push_back(Vocabulary::eos());
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy pretrain/finetune experiment shared by criteria 1-3.

constexpr std::uint64_t kWorldSeed = 2024;
constexpr std::uint64_t kDataSeed = 77;
constexpr std::size_t kEntities = 120;
constexpr std::size_t kNewsDocs = 4400;
constexpr std::size_t kNewsValidDocs = 120;
constexpr std::size_t kDialogues = 400;
constexpr std::size_t kValidDialogues = 100;
constexpr std::size_t kMerges = 300;
constexpr std::size_t kPretrainEpochs = 5;
constexpr std::size_t kFinetuneEpochs = 10;

struct ToyData {
  Tokenizer tokenizer;
  std::vector<std::string> news_lines, dialogue_lines;
  std::vector<SequencePair> pretrain, pretrain_valid, target, target_valid;
  std::size_t pretrain_tokens = 0;
};

ToyData make_toy_data() {
  const World world = make_world(kEntities, kWorldSeed);
  Rng rng(kDataSeed);
  const auto news = make_news_corpus(world, kNewsDocs, rng);
  const auto news_valid = make_news_corpus(world, kNewsValidDocs, rng);
  const auto dialogues = make_dialogue_corpus(world, kDialogues, rng);
  const auto dialogues_valid = make_dialogue_corpus(world, kValidDialogues, rng);
  ToyData d;
  for (const auto& doc : news.documents) d.news_lines.insert(d.news_lines.end(), doc.begin(), doc.end());
  for (const auto& dlg : dialogues.dialogues) d.dialogue_lines.insert(d.dialogue_lines.end(), dlg.begin(), dlg.end());
  std::vector<std::string> lines = d.news_lines;
  lines.insert(lines.end(), d.dialogue_lines.begin(), d.dialogue_lines.end());
  d.tokenizer = Tokenizer::train(lines, kMerges);
  auto add_docs = [&](const DocumentCorpus& c, std::vector<SequencePair>& out) {
    for (const auto& doc : c.documents) {
      auto p = make_ns_pairs(doc, d.tokenizer);
      out.insert(out.end(), p.begin(), p.end());
    }
  };
  auto add_dialogues = [&](const DialogueCorpus& c, std::vector<SequencePair>& out) {
    for (const auto& dlg : c.dialogues) {
      auto p = make_dialogue_pairs(dlg, d.tokenizer);
      out.insert(out.end(), p.begin(), p.end());
    }
  };
  add_docs(news, d.pretrain);
  add_docs(news_valid, d.pretrain_valid);
  add_dialogues(dialogues, d.target);
  add_dialogues(dialogues_valid, d.target_valid);
  for (const auto& p : d.pretrain) d.pretrain_tokens += p.target.size() - 1;
  return d;
}

struct SeedResult {
  std::uint64_t seed = 0;
  double ft_forget = 0, mr_forget = 0;          // pretrain-valid PPL at early stop / at start
  double ft_ppl = 0, mr_ppl = 0, scratch_ppl = 0;  // target-valid PPL at early stop
  SensitivityResult ft_sens, scratch_sens, mr_sens;
};

struct ToyResults {
  bool ran = false;
  std::string error;
  std::vector<SeedResult> seeds;
  double cpu = 0;
  std::size_t pretrain_tokens = 0;
};

double at_best(const RunResult& r, const std::string& split) { return r.trace[r.state.best_epoch].ppl.at(split); }

SeedResult run_toy_seed(const ToyData& d, std::uint64_t seed) {
  TransformerConfig config;
  config.vocab_size = d.tokenizer.vocab().size();
  const std::vector<EvalSet> evals = {{"target_valid", d.target_valid}, {"pretrain_valid", d.pretrain_valid}};
  const auto checksum = d.tokenizer.vocab().checksum();

  TrainPlan pre;
  pre.strategy = Strategy::PretrainNs;
  pre.scheduler = Scheduler::InverseSqrt;
  pre.base_lr = 2e-3;
  pre.warmup = 300;
  pre.max_epochs = kPretrainEpochs;
  pre.patience = 2;
  pre.seed = seed;
  pre.valid_split = "pretrain_valid";
  const auto pretrained = run_training(pre, config, TrainingData{d.pretrain, {}, evals, checksum});

  TrainPlan ft;
  ft.strategy = Strategy::StandardFinetune;
  ft.base_lr = 1e-3;
  ft.max_epochs = kFinetuneEpochs;
  ft.patience = 2;
  ft.seed = seed;
  const TrainingData target{d.target, d.pretrain, evals, checksum};
  RunOptions from_pretrained;
  from_pretrained.init = &pretrained.best;
  const auto finetuned = run_training(ft, config, target, from_pretrained);

  auto mr = ft;
  mr.strategy = Strategy::MixReview;
  mr.mix = MixSettings{4.0, 0.7};
  const auto reviewed = run_training(mr, config, target, from_pretrained);

  auto sc = ft;
  sc.strategy = Strategy::ScratchBaseline;
  const auto scratch = run_training(sc, config, target);

  SeedResult r;
  r.seed = seed;
  r.ft_forget = at_best(finetuned, "pretrain_valid") / finetuned.trace[0].ppl.at("pretrain_valid");
  r.mr_forget = at_best(reviewed, "pretrain_valid") / reviewed.trace[0].ppl.at("pretrain_valid");
  r.ft_ppl = at_best(finetuned, "target_valid");
  r.mr_ppl = at_best(reviewed, "target_valid");
  r.scratch_ppl = at_best(scratch, "target_valid");
  r.ft_sens = context_sensitivity<float>(finetuned.best, config, d.target_valid, seed);
  r.scratch_sens = context_sensitivity<float>(scratch.best, config, d.target_valid, seed);
  r.mr_sens = context_sensitivity<float>(reviewed.best, config, d.target_valid, seed);
  return r;
}

ToyResults& toy() {
  static ToyResults results;
  if (results.ran) return results;
  results.ran = true;
  const double start = cpu_seconds();
  try {
    const ToyData d = make_toy_data();
    results.pretrain_tokens = d.pretrain_tokens;
    for (std::uint64_t seed : {1, 2, 3}) {
      results.seeds.push_back(run_toy_seed(d, seed));
      const auto& s = results.seeds.back();
      std::printf(
          "  toy seed %llu: forget ft %.2fx mr %.2fx | valid ppl ft %.3f mr %.3f scratch %.3f | "
          "drop/shuffle ft %s scratch %s mr %s | cpu %.0fs\n",
          static_cast<unsigned long long>(seed), s.ft_forget, s.mr_forget, s.ft_ppl, s.mr_ppl, s.scratch_ppl,
          format_sensitivity_cell(s.ft_sens).c_str(), format_sensitivity_cell(s.scratch_sens).c_str(),
          format_sensitivity_cell(s.mr_sens).c_str(), cpu_seconds() - start);
      std::fflush(stdout);
    }
  } catch (const std::exception& e) {
    results.error = e.what();
  }
  results.cpu = cpu_seconds() - start;
  return results;
}

Outcome seed_vote(const std::function<bool(const SeedResult&)>& ok, const std::string& extra = "") {
  const auto& t = toy();
  if (!t.error.empty()) return {false, "toy run failed: " + t.error};
  int passed = 0;
  for (const auto& s : t.seeds) passed += ok(s);
  return {passed >= 2, fmt("%d/3 seeds", passed) + extra};
}

Outcome forgetting_curve() {
  const auto& t = toy();
  const bool in_budget = t.cpu <= 30 * 60;
  auto o = seed_vote([](const SeedResult& s) { return s.ft_forget >= 1.5 && s.mr_forget <= 1.15; },
                     fmt(", corpus A %zu tokens, toy cpu %.0fs of 1800s", t.pretrain_tokens, t.cpu));
  o.pass = o.pass && in_budget;
  return o;
}

Outcome strategy_ordering() {
  return seed_vote([](const SeedResult& s) { return s.ft_ppl <= 0.9 * s.scratch_ppl && s.mr_ppl <= 1.05 * s.ft_ppl; });
}

Outcome sensitivity_ordering() {
  return seed_vote([](const SeedResult& s) { return s.ft_sens.shuffle_increase > s.scratch_sens.shuffle_increase; });
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const double start = cpu_seconds();
  const auto c = tiny_config(12, 0.0);
  Rng rng(11);
  auto params = init_parameters<double>(c, rng);
  for (auto& [name, t] : params.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.values) v += 0.2 * (rng.uniform() - 0.5);
    }
  }
  const auto pairs = random_pairs(3, 4, 12, Origin::Target);
  const Batch batch = make_batch(pairs, 0, pairs.size());
  const auto [labels, mask] = shifted_labels(batch);
  auto loss = [&](const ModelParameters<double>& p) {
    return nll_loss(forward<double>(p, c, batch, Mode::Eval, nullptr), labels, mask).mean;
  };
  const auto analytic = backward<double>(params, c, batch, nullptr, Mode::Eval);
  const double h = 1e-4;
  double worst = 0;
  std::string worst_block;
  for (auto& [name, t] : params.tensors) {
    const auto& g = analytic.grads.at(name);
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double orig = t.values[i];
      t.values[i] = orig + h;
      const double up = loss(params);
      t.values[i] = orig - h;
      const double down = loss(params);
      t.values[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(g.values[i] - numeric) / std::max({std::abs(g.values[i]), std::abs(numeric), 1e-6});
      if (err > worst) worst = err, worst_block = name;
    }
  }
  const double secs = cpu_seconds() - start;
  return {worst < 1e-3 && secs < 60,
          fmt("max rel err %.2e (%s), %zu params, %.1fs", worst, worst_block.c_str(), params.parameter_count(), secs)};
}

Outcome top_k_exactness() {
  const std::vector<double> logits = {0.3, 2.0, -1.0, 1.5, 0.0, 1.7, -0.5, 0.9, 0.1, -2.0};
  const std::size_t k = 3;
  std::vector<std::size_t> order(logits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return logits[a] > logits[b]; });
  std::vector<double> expected(logits.size(), 0.0);
  double z = 0;
  for (std::size_t i = 0; i < k; ++i) z += std::exp(logits[order[i]]);
  for (std::size_t i = 0; i < k; ++i) expected[order[i]] = std::exp(logits[order[i]]) / z;

  Rng rng(5);
  const int draws = 100000;
  std::vector<int> counts(logits.size(), 0);
  for (int i = 0; i < draws; ++i) counts[static_cast<std::size_t>(top_k_sample_token(logits, k, rng))] += 1;
  double tv = 0;
  int outside = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    tv += std::abs(double(counts[i]) / draws - expected[i]);
    if (expected[i] == 0.0) outside += counts[i];
  }
  tv /= 2;
  return {tv < 0.01 && outside == 0, fmt("TV %.4f, %d draws outside top-3", tv, outside)};
}

using Words = std::vector<std::string>;

// Plain nested-loop n-gram counting.
double brute_bleu(const Words& cand, const Words& ref, int max_n) {
  if (cand.empty()) return 0.0;
  auto gram = [](const Words& w, std::size_t i, int n) { return Words(w.begin() + i, w.begin() + i + n); };
  auto count = [&](const Words& w, const Words& g, int n) {
    int c = 0;
    for (std::size_t i = 0; i + n <= w.size(); ++i) c += gram(w, i, n) == g;
    return c;
  };
  double log_sum = 0;
  for (int n = 1; n <= max_n; ++n) {
    int matched = 0, total = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      ++total;
      const Words g = gram(cand, i, n);
      bool seen = false;
      for (std::size_t j = 0; j < i; ++j) seen = seen || gram(cand, j, n) == g;
      if (!seen) matched += std::min(count(cand, g, n), count(ref, g, n));
    }
    log_sum += std::log((matched == 0 ? 1e-9 : matched) / (total == 0 ? 1.0 : double(total)));
  }
  const double bp = cand.size() < ref.size() ? std::exp(1.0 - double(ref.size()) / double(cand.size())) : 1.0;
  return bp * std::exp(log_sum / max_n);
}

Outcome bleu_oracle() {
  const double hand = bleu_n({"a", "b", "c"}, {"a", "b", "d"}, 2);
  const bool hand_ok = std::abs(hand - std::sqrt(1.0 / 3.0)) < 1e-12;
  Rng rng(6);
  const Words alphabet = {"a", "b", "c", "d", "e"};
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    Words cand(rng.below(7)), ref(1 + rng.below(6));
    for (auto& w : cand) w = alphabet[rng.below(5)];
    for (auto& w : ref) w = alphabet[rng.below(5)];
    for (int n : {2, 3}) worst = std::max(worst, std::abs(bleu_n(cand, ref, n) - brute_bleu(cand, ref, n)));
  }
  return {hand_ok && worst <= 1e-12, fmt("hand case %.15f, max diff %.1e over 1000 pairs", hand, worst)};
}

Outcome mix_schedule() {
  const MixSchedule schedule{4.0, 0.9, 100000};
  const auto e1 = mix_count(1, schedule), e2 = mix_count(2, schedule);
  bool ok = e1 == 400000 && e2 == 360000;
  const auto target = random_pairs(1, 20, 14, Origin::Target);
  const auto pool = random_pairs(2, 50, 14, Origin::Pretrain);
  int cells = 0, bad = 0;
  for (double ratio : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    for (double decay : {1.0, 0.9, 0.8, 0.7, 0.6, 0.5}) {
      ++cells;
      const MixSchedule s{ratio, decay, target.size()};
      Rng rng(Rng::derive(7, static_cast<std::uint64_t>(cells)));
      for (std::size_t epoch = 1; epoch <= 4; ++epoch) {
        const auto composed = compose_epoch(target, pool, epoch, s, rng);
        const auto pre = static_cast<std::size_t>(
            std::count_if(composed.begin(), composed.end(), [](const auto& p) { return p.origin == Origin::Pretrain; }));
        if (pre != mix_count(epoch, s) || composed.size() != target.size() + pre) ++bad;
      }
    }
  }
  ok = ok && bad == 0;
  return {ok, fmt("epoch1 %zu epoch2 %zu, %d cells x 4 epochs, %d mismatches", e1, e2, cells, bad)};
}

double trace_diff(const MetricTrace& a, const MetricTrace& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (const auto& [split, ppl] : a[i].ppl) worst = std::max(worst, std::abs(ppl - b[i].ppl.at(split)));
  }
  return worst;
}

Outcome degenerate_strategies() {
  const auto config = tiny_config(14, 0.1);
  TrainingData data;
  data.train = random_pairs(1, 16, 14, Origin::Target);
  data.pretrain_pool = random_pairs(2, 40, 14, Origin::Pretrain);
  data.eval_sets = {{"target_valid", random_pairs(3, 8, 14, Origin::Target)},
                    {"pretrain_valid", random_pairs(4, 8, 14, Origin::Pretrain)}};
  TrainPlan base;
  base.base_lr = 3e-3;
  base.max_epochs = 4;
  base.patience = 5;
  base.batch_size = 4;
  base.seed = 5;
  Rng init_rng(99);
  const auto init = init_parameters<float>(config, init_rng);
  RunOptions opts;
  opts.init = &init;

  const auto standard = run_training(base, config, data, opts);
  auto mix0 = base;
  mix0.strategy = Strategy::MixReview;
  mix0.mix = MixSettings{0.0, 0.7};
  auto wd0 = base;
  wd0.strategy = Strategy::WdPre;
  wd0.lambda = 0.0;
  const double d_mix = trace_diff(standard.trace, run_training(mix0, config, data, opts).trace);
  const double d_wd = trace_diff(standard.trace, run_training(wd0, config, data, opts).trace);

  auto mt = base;
  mt.strategy = Strategy::MixTrain;
  mt.mix = MixSettings{2.0, 0.8};
  Rng mt_rng(Rng::derive(mt.seed, 1));
  const auto mt_init = init_parameters<float>(config, mt_rng);
  RunOptions mt_opts;
  mt_opts.init = &mt_init;
  auto mr = mt;
  mr.strategy = Strategy::MixReview;
  const double d_mt = trace_diff(run_training(mt, config, data).trace, run_training(mr, config, data, mt_opts).trace);
  const bool ok = d_mix <= 1e-9 && d_wd <= 1e-9 && d_mt <= 1e-9 && standard.trace.size() == 5;
  return {ok, fmt("max PPL diff: mix-review(0) %.1e, wd-pre(0) %.1e, mix-train vs mix-review %.1e", d_mix, d_wd, d_mt)};
}

Outcome wd_pre_check() {
  Rng rng(12);
  const auto config = tiny_config(14, 0.0);
  const auto pre = init_parameters<double>(config, rng);
  auto theta = pre;
  for (auto& [name, t] : theta.tensors) {
    for (auto& v : t.values) v += rng.uniform() - 0.5;
  }
  const double lambda = 0.37;
  const auto at_pre = wd_pre(pre, pre, lambda);
  double zero_grad = 0;
  for (const auto& [name, t] : at_pre.gradient.tensors) {
    for (double g : t.values) zero_grad = std::max(zero_grad, std::abs(g));
  }
  const auto away = wd_pre(theta, pre, lambda);
  double worst = 0, penalty = 0;
  for (const auto& [name, t] : theta.tensors) {
    const auto& p = pre.at(name);
    const auto& g = away.gradient.at(name);
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double diff = t.values[i] - p.values[i];
      penalty += lambda * diff * diff;
      worst = std::max(worst, std::abs(g.values[i] - 2 * lambda * diff));
    }
  }
  const bool ok = at_pre.penalty == 0.0 && zero_grad == 0.0 && worst <= 1e-6 &&
                  std::abs(away.penalty - penalty) <= 1e-9 * std::max(1.0, penalty);
  return {ok, fmt("penalty at pre %.1e, max |grad| at pre %.1e, max grad err %.1e", at_pre.penalty, zero_grad, worst)};
}

Outcome tokenizer_round_trip() {
  const World world = make_world(kEntities, kWorldSeed);
  Rng rng(kDataSeed);
  const auto news = make_news_corpus(world, kNewsDocs, rng);
  make_news_corpus(world, kNewsValidDocs, rng);
  const auto dialogues = make_dialogue_corpus(world, kDialogues, rng);
  std::vector<std::string> lines;
  for (const auto& doc : news.documents) lines.insert(lines.end(), doc.begin(), doc.end());
  for (const auto& dlg : dialogues.dialogues) lines.insert(lines.end(), dlg.begin(), dlg.end());
  const auto a = Tokenizer::train(lines, kMerges);
  const auto b = Tokenizer::train(lines, kMerges);
  std::size_t bad = 0;
  for (const auto& line : lines) bad += a.decode(a.encode(line)) != text::normalize_whitespace(line);
  const bool same = a.bpe() == b.bpe() && a.vocab() == b.vocab();
  return {bad == 0 && same, fmt("%zu lines, %zu mismatches, %zu merges, merges identical: %s", lines.size(), bad,
                                a.bpe().merge_count(), same ? "yes" : "no")};
}

Outcome checkpoint_fidelity() {
  const auto config = tiny_config(14, 0.1);
  TrainingData data;
  data.train = random_pairs(1, 16, 14, Origin::Target);
  data.eval_sets = {{"target_valid", random_pairs(3, 8, 14, Origin::Target)}};
  TrainPlan plan;
  plan.strategy = Strategy::ScratchBaseline;
  plan.base_lr = 3e-3;
  plan.max_epochs = 2;
  plan.batch_size = 4;
  const auto run = run_training(plan, config, data);

  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.plan = plan;
  ckpt.epoch = run.state.epoch;
  ckpt.step = run.state.step;
  ckpt.vocab_checksum = "0123456789abcdef";
  ckpt.rng_state = run.state.rng_state;
  ckpt.metrics = run.trace.back();
  ckpt.train_state = run.state;
  ckpt.params = run.last;
  ckpt.optimizer = run.optimizer;

  const auto dir = std::filesystem::temp_directory_path() / fmt("fgl-acceptance-%d", static_cast<int>(std::random_device{}()));
  std::filesystem::create_directories(dir);
  const auto path = (dir / "model.ckpt").string();
  save_checkpoint(path, ckpt);
  const auto loaded = load_checkpoint(path);
  const double before = perplexity<float>(ckpt.params, config, data.eval_sets[0].pairs);
  const double after = perplexity<float>(loaded.params, loaded.config, data.eval_sets[0].pairs);
  const bool bytes_same = serialize_checkpoint(loaded) == serialize_checkpoint(ckpt);
  std::filesystem::remove_all(dir);
  const bool ok = std::abs(before - after) <= 1e-9 && bytes_same && loaded.optimizer.has_value() &&
                  *loaded.optimizer == run.optimizer;
  return {ok, fmt("PPL %.12f vs %.12f, re-save byte-identical: %s", before, after, bytes_same ? "yes" : "no")};
}

Outcome perturbation_exactness() {
  Rng rng(3);
  std::size_t bad_drop = 0, bad_shuffle = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    TokenIds v(rng.below(40));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<TokenId>(i);
    const auto d = perturb_word_drop(v, 0.3, rng);
    const auto keep = v.size() - static_cast<std::size_t>(std::llround(0.3 * static_cast<double>(v.size())));
    bad_drop += d.size() != keep || !std::is_sorted(d.begin(), d.end()) ||
                std::adjacent_find(d.begin(), d.end()) != d.end();
    TokenIds w(rng.below(12));
    for (auto& x : w) x = static_cast<TokenId>(rng.below(4));
    const auto s = perturb_word_shuffle(w, rng);
    bad_shuffle += !std::is_permutation(w.begin(), w.end(), s.begin(), s.end());
  }

  // n = 3: drop removes round(0.9) = 1 token, uniformly; shuffle hits all 6 orders.
  const int trials = 60000;
  const TokenIds three = {1, 2, 3};
  std::map<TokenIds, int> drops, orders;
  for (int t = 0; t < trials; ++t) {
    drops[perturb_word_drop(three, 0.3, rng)] += 1;
    orders[perturb_word_shuffle(three, rng)] += 1;
  }
  auto chi = [&](const std::map<TokenIds, int>& counts, std::size_t cells) {
    if (counts.size() != cells) return 0.0;
    double stat = 0;
    const double e = double(trials) / double(cells);
    for (const auto& [k, c] : counts) stat += (c - e) * (c - e) / e;
    return chi_square_p(stat, double(cells - 1));
  };
  const double p_drop = chi(drops, 3), p_shuffle = chi(orders, 6);
  const bool ok = bad_drop == 0 && bad_shuffle == 0 && p_drop > 0.001 && p_shuffle > 0.001;
  return {ok, fmt("bad drops %zu, bad shuffles %zu, chi-square p drop %.3f shuffle %.3f", bad_drop, bad_shuffle,
                  p_drop, p_shuffle)};
}

// Brute-force diversity counting: explicit lists instead of maps.
DiversityMetrics brute_diversity(const std::vector<Words>& pool) {
  auto entropy = [&](std::size_t n) {
    std::vector<Words> grams;
    for (const auto& r : pool) {
      for (std::size_t i = 0; i + n <= r.size(); ++i) grams.emplace_back(r.begin() + i, r.begin() + i + n);
    }
    double h = 0;
    for (std::size_t i = 0; i < grams.size(); ++i) {
      bool first = true;
      for (std::size_t j = 0; j < i; ++j) first = first && grams[j] != grams[i];
      if (!first) continue;
      const double p = double(std::count(grams.begin(), grams.end(), grams[i])) / double(grams.size());
      h -= p * std::log2(p);
    }
    return h;
  };
  std::vector<int> freqs;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    bool first = true;
    for (std::size_t j = 0; j < i; ++j) first = first && pool[j] != pool[i];
    if (first) freqs.push_back(static_cast<int>(std::count(pool.begin(), pool.end(), pool[i])));
  }
  std::sort(freqs.rbegin(), freqs.rend());
  DiversityMetrics m;
  m.bigram_entropy = entropy(2);
  m.trigram_entropy = entropy(3);
  m.top1_percent = 100.0 * freqs[0] / double(pool.size());
  m.top2_percent = freqs.size() > 1 ? 100.0 * freqs[1] / double(pool.size()) : 0.0;
  return m;
}

Outcome diversity_oracle() {
  auto diff = [](const DiversityMetrics& a, const DiversityMetrics& b) {
    return std::max({std::abs(a.bigram_entropy - b.bigram_entropy), std::abs(a.trigram_entropy - b.trigram_entropy),
                     std::abs(a.top1_percent - b.top1_percent), std::abs(a.top2_percent - b.top2_percent)});
  };
  const std::vector<Words> hand = {{"a", "b", "c"}, {"a", "b", "d"}};
  const auto h = diversity_metrics(hand);
  bool ok = std::abs(h.bigram_entropy - 1.5) < 1e-12 && diff(h, brute_diversity(hand)) < 1e-12;
  Rng rng(13);
  const Words alphabet = {"a", "b", "c", "d"};
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<Words> pool(1 + rng.below(12));
    for (auto& r : pool) {
      r.resize(1 + rng.below(5));
      for (auto& w : r) w = alphabet[rng.below(alphabet.size())];
    }
    worst = std::max(worst, diff(diversity_metrics(pool), brute_diversity(pool)));
  }
  ok = ok && worst < 1e-12;
  return {ok, fmt("hand bigram entropy %.3f bits, max diff over 100 pools %.1e", h.bigram_entropy, worst)};
}

Outcome knowledge_plumbing() {
  const auto terms = load_knowledge_terms(FGL_TEST_DATA_DIR "/knowledge_terms.jsonl");
  const auto templates = default_templates();
  std::map<std::string, std::string> desc;
  std::vector<std::string> words;
  for (const auto& t : terms) {
    desc[t.term] = t.description;
    for (auto& w : text::split_words(t.description)) words.push_back(w);
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());

  const ResponseGenerator echo = [&](const std::string& trigger, Rng&) {
    for (const auto& [term, d] : desc) {
      if (trigger.find(" " + term + " ") != std::string::npos) return d;
    }
    return std::string();
  };
  const ResponseGenerator uniform = [&](const std::string&, Rng& rng) {
    std::vector<std::string> out(10);
    for (auto& w : out) w = words[rng.below(words.size())];
    return text::join(out);
  };
  const auto perfect = knowledge_probe(terms, templates, 10, echo, 1);
  const auto noise = knowledge_probe(terms, templates, 10, uniform, 1);

  const std::vector<std::string> verbatim = {"now, some opinions about X .",        "let me tell you about X .",
                                             "here's some news about X .",          "what you do think about X ?",
                                             "please tell me about X .",            "do you have news about X ?"};
  bool templates_ok = templates.size() == verbatim.size();
  for (std::size_t i = 0; templates_ok && i < verbatim.size(); ++i) templates_ok = templates[i].text == verbatim[i];
  const bool ok = std::abs(perfect.bleu2 - 1.0) < 1e-12 && noise.bleu2 < 0.05 && templates_ok;
  return {ok, fmt("%zu terms: echo BLEU-2 %.3f, uniform BLEU-2 %.4f, templates verbatim: %s", terms.size(),
                  perfect.bleu2, noise.bleu2, templates_ok ? "yes" : "no")};
}

// Cyclic Jacobi eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

Outcome projection_oracle() {
  Rng rng(21);
  const std::size_t rows = 5, cols = 4;
  std::vector<std::vector<double>> x(rows, std::vector<double>(cols));
  for (auto& r : x) {
    for (auto& v : r) v = 2 * rng.uniform() - 1;
  }
  std::vector<double> mean(cols, 0.0);
  for (const auto& r : x) {
    for (std::size_t j = 0; j < cols; ++j) mean[j] += r[j] / rows;
  }
  std::vector<std::vector<double>> cov(cols, std::vector<double>(cols, 0.0));
  for (const auto& r : x) {
    for (std::size_t i = 0; i < cols; ++i) {
      for (std::size_t j = 0; j < cols; ++j) cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (rows - 1);
    }
  }
  const auto ev = jacobi_eigenvalues(cov);
  const double oracle = ev[0] + ev[1];
  const auto p = project_2d(x);
  const double got = p.captured_variance();

  auto dup = x;
  dup.push_back(x[1]);
  const auto pd = project_2d(dup);
  const bool identical = pd.points[1] == pd.points.back();
  const bool ok = std::abs(got - oracle) <= 1e-9 && identical;
  return {ok, fmt("captured variance %.12f vs oracle %.12f, identical inputs share a point: %s", got, oracle,
                  identical ? "yes" : "no")};
}

struct Criterion {
  int number;
  const char* name;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "forgetting curve", forgetting_curve},
      {2, "strategy ordering", strategy_ordering},
      {3, "context-sensitivity ordering", sensitivity_ordering},
      {4, "gradient correctness", gradient_check},
      {5, "top-k sampler exactness", top_k_exactness},
      {6, "BLEU oracle equivalence", bleu_oracle},
      {7, "mix schedule exactness", mix_schedule},
      {8, "degenerate-strategy equivalence", degenerate_strategies},
      {9, "weight decay toward pretrained", wd_pre_check},
      {10, "tokenizer round trip", tokenizer_round_trip},
      {11, "checkpoint fidelity", checkpoint_fidelity},
      {12, "perturbation exactness", perturbation_exactness},
      {13, "diversity-metric oracle", diversity_oracle},
      {14, "knowledge-probe plumbing", knowledge_plumbing},
      {15, "projection oracle", projection_oracle},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.number)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.number, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
