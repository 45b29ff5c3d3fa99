#include "fgl/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "fgl/error.hpp"
#include "fgl/text.hpp"

namespace fgl {

template <typename T>
double perplexity(const ModelParameters<T>& params, const TransformerConfig& config,
                  const std::vector<SequencePair>& pairs) {
  if (pairs.empty()) throw Error("empty evaluation set");
  const NllTotal t = corpus_nll<T>(params, config, pairs);
  if (t.tokens == 0) throw Error("empty evaluation set");
  return std::exp(t.total / static_cast<double>(t.tokens));
}

TokenIds perturb_word_drop(const TokenIds& context, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("drop rate must be in [0, 1)");
  const std::size_t n = context.size();
  const auto drop = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  if (drop == 0) return context;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < drop; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  std::vector<bool> removed(n, false);
  for (std::size_t i = 0; i < drop; ++i) removed[idx[i]] = true;
  TokenIds out;
  out.reserve(n - drop);
  for (std::size_t i = 0; i < n; ++i) {
    if (!removed[i]) out.push_back(context[i]);
  }
  return out;
}

TokenIds perturb_word_shuffle(const TokenIds& context, Rng& rng) {
  TokenIds out = context;
  rng.shuffle(out);
  return out;
}

namespace {

Rng pair_rng(std::uint64_t seed, std::size_t index, std::uint64_t condition) {
  return Rng(Rng::derive(Rng::derive(seed, index), condition));
}

}  // namespace

std::vector<SequencePair> perturb_pairs_drop(const std::vector<SequencePair>& pairs, std::uint64_t seed, double rate) {
  std::vector<SequencePair> out = pairs;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng = pair_rng(seed, i, 0);
    out[i].context = perturb_word_drop(out[i].context, rate, rng);
  }
  return out;
}

std::vector<SequencePair> perturb_pairs_shuffle(const std::vector<SequencePair>& pairs, std::uint64_t seed) {
  std::vector<SequencePair> out = pairs;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng = pair_rng(seed, i, 1);
    out[i].context = perturb_word_shuffle(out[i].context, rng);
  }
  return out;
}

template <typename T>
SensitivityResult context_sensitivity(const ModelParameters<T>& params, const TransformerConfig& config,
                                      const std::vector<SequencePair>& pairs, std::uint64_t seed, double drop_rate) {
  SensitivityResult r;
  r.clean_ppl = perplexity<T>(params, config, pairs);
  r.drop_ppl = perplexity<T>(params, config, perturb_pairs_drop(pairs, seed, drop_rate));
  r.shuffle_ppl = perplexity<T>(params, config, perturb_pairs_shuffle(pairs, seed));
  r.drop_increase = (r.drop_ppl - r.clean_ppl) / r.clean_ppl;
  r.shuffle_increase = (r.shuffle_ppl - r.clean_ppl) / r.clean_ppl;
  return r;
}

std::string format_relative_increase(double fraction) {
  const long pct = std::lround(fraction * 100.0);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+ld%%", pct);
  return buf;
}

std::string format_sensitivity_cell(const SensitivityResult& r) {
  return format_relative_increase(r.drop_increase) + "/" + format_relative_increase(r.shuffle_increase);
}

double bleu_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference, int max_n) {
  if (max_n < 1) throw Error("max_n must be >= 1");
  if (candidate.empty()) return 0.0;
  constexpr double kEps = 1e-9;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
    for (std::size_t i = 0; i + un <= reference.size(); ++i) {
      ref_counts[{reference.begin() + static_cast<std::ptrdiff_t>(i),
                  reference.begin() + static_cast<std::ptrdiff_t>(i + un)}] += 1;
    }
    std::size_t total = 0;
    for (std::size_t i = 0; i + un <= candidate.size(); ++i) {
      cand_counts[{candidate.begin() + static_cast<std::ptrdiff_t>(i),
                   candidate.begin() + static_cast<std::ptrdiff_t>(i + un)}] += 1;
      ++total;
    }
    std::size_t matched = 0;
    for (const auto& [gram, c] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(c, it->second);
    }
    const double num = matched == 0 ? kEps : static_cast<double>(matched);
    const double den = total == 0 ? 1.0 : static_cast<double>(total);
    log_sum += std::log(num / den);
  }
  double score = std::exp(log_sum / max_n);
  const double c = static_cast<double>(candidate.size()), r = static_cast<double>(reference.size());
  if (c < r) score *= std::exp(1.0 - r / c);
  return score;
}

std::string to_string(TemplateStyle s) { return s == TemplateStyle::News ? "news" : "dialogue"; }

TemplateStyle parse_template_style(const std::string& s) {
  if (s == "news") return TemplateStyle::News;
  if (s == "dialogue") return TemplateStyle::Dialogue;
  throw Error("unknown template style: " + s);
}

namespace {

std::size_t placeholder_count(const std::vector<std::string>& words) {
  return static_cast<std::size_t>(std::count(words.begin(), words.end(), "X"));
}

}  // namespace

std::string TriggerTemplate::instantiate(const std::string& term) const {
  auto words = text::split_words(text);
  if (placeholder_count(words) != 1) throw Error("template needs exactly one X placeholder: " + text);
  for (auto& w : words) {
    if (w == "X") w = term;
  }
  return text::join(words);
}

std::vector<TriggerTemplate> default_templates() {
  return {
      {"now, some opinions about X .", TemplateStyle::News},
      {"let me tell you about X .", TemplateStyle::News},
      {"here's some news about X .", TemplateStyle::News},
      {"what you do think about X ?", TemplateStyle::Dialogue},
      {"please tell me about X .", TemplateStyle::Dialogue},
      {"do you have news about X ?", TemplateStyle::Dialogue},
  };
}

std::vector<TriggerTemplate> parse_templates(const std::string& content) {
  std::vector<TriggerTemplate> out;
  std::istringstream in(content);
  std::string line;
  std::size_t n = 0;
  bool have_style = false;
  TemplateStyle style = TemplateStyle::News;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = text::normalize_whitespace(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      try {
        style = parse_template_style(t.substr(1));
      } catch (const Error&) {
        throw Error("line " + std::to_string(n) + ": unknown section header " + t);
      }
      have_style = true;
      continue;
    }
    if (!have_style) throw Error("line " + std::to_string(n) + ": template before any #news/#dialogue header");
    if (placeholder_count(text::split_words(t)) != 1) {
      throw Error("line " + std::to_string(n) + ": template needs exactly one X placeholder");
    }
    out.push_back({t, style});
  }
  if (out.empty()) throw Error("no templates");
  return out;
}

std::vector<TriggerTemplate> load_templates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_templates(ss.str());
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

std::vector<TriggerTemplate> templates_of_style(const std::vector<TriggerTemplate>& all, TemplateStyle style) {
  std::vector<TriggerTemplate> out;
  for (const auto& t : all) {
    if (t.style == style) out.push_back(t);
  }
  return out;
}

std::vector<KnowledgeTerm> load_knowledge_terms(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::vector<KnowledgeTerm> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (text::normalize_whitespace(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(n) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error(where + "malformed JSON");
    }
    if (!j.is_object() || !j.contains("term") || !j.contains("description") || !j["term"].is_string() ||
        !j["description"].is_string()) {
      throw Error(where + "expected {\"term\": string, \"description\": string}");
    }
    KnowledgeTerm t{j["term"].get<std::string>(), j["description"].get<std::string>()};
    if (text::normalize_whitespace(t.term).empty() || text::normalize_whitespace(t.description).empty()) {
      throw Error(where + "empty term or description");
    }
    out.push_back(std::move(t));
  }
  return out;
}

void save_knowledge_terms(const std::vector<KnowledgeTerm>& terms, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& t : terms) out << nlohmann::ordered_json{{"term", t.term}, {"description", t.description}}.dump() << '\n';
}

ResponseGenerator model_generator(const ModelParameters<float>& params, const TransformerConfig& config,
                                  const Tokenizer& tokenizer, const DecoderSettings& settings) {
  return [&params, &config, &tokenizer, settings](const std::string& trigger, Rng& rng) {
    TokenIds ctx = tokenizer.encode(trigger);
    if (ctx.size() > kMaxContextTokens) ctx.erase(ctx.begin(), ctx.end() - kMaxContextTokens);
    return tokenizer.decode(generate<float>(params, config, ctx, settings, rng));
  };
}

KnowledgeResult knowledge_probe(const std::vector<KnowledgeTerm>& terms, const std::vector<TriggerTemplate>& templates,
                                std::size_t samples_per_trigger, const ResponseGenerator& generator,
                                std::uint64_t seed) {
  if (terms.empty()) throw Error("empty term list");
  if (templates.empty()) throw Error("no trigger templates");
  if (samples_per_trigger < 1) throw Error("samples_per_trigger must be >= 1");
  KnowledgeResult result;
  double sum2 = 0.0, sum3 = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto reference = text::split_words(terms[i].description);
    Rng rng(Rng::derive(seed, i));
    double term2 = 0.0, term3 = 0.0;
    for (const auto& tmpl : templates) {
      const std::string trigger = tmpl.instantiate(terms[i].term);
      double t2 = 0.0, t3 = 0.0;
      for (std::size_t s = 0; s < samples_per_trigger; ++s) {
        const auto candidate = text::split_words(generator(trigger, rng));
        t2 += bleu_n(candidate, reference, 2);
        t3 += bleu_n(candidate, reference, 3);
        ++result.samples;
      }
      term2 += t2 / static_cast<double>(samples_per_trigger);
      term3 += t3 / static_cast<double>(samples_per_trigger);
    }
    sum2 += term2 / static_cast<double>(templates.size());
    sum3 += term3 / static_cast<double>(templates.size());
  }
  result.bleu2 = sum2 / static_cast<double>(terms.size());
  result.bleu3 = sum3 / static_cast<double>(terms.size());
  return result;
}

template <typename T>
FunctionVector function_space_vector(const ModelParameters<T>& params, const TransformerConfig& config,
                                     const std::vector<std::vector<SequencePair>>& sets, std::size_t token_budget) {
  constexpr std::size_t kBatch = 64;
  FunctionVector out;
  for (const auto& set : sets) {
    std::size_t used = 0;
    for (std::size_t begin = 0; begin < set.size() && used < token_budget; begin += kBatch) {
      const Batch batch = make_batch(set, begin, std::min(set.size(), begin + kBatch));
      const Matrix<T> logits = forward<T>(params, config, batch, Mode::Eval, nullptr);
      const auto [labels, mask] = shifted_labels(batch);
      const auto V = static_cast<std::size_t>(logits.cols());
      for (std::size_t row = 0; row < labels.size() && used < token_budget; ++row) {
        if (!mask[row]) continue;
        const auto lp = log_softmax_row<T>(logits.data() + row * V, V);
        out.values.push_back(std::exp(lp[static_cast<std::size_t>(labels[row])]));
        ++used;
      }
    }
    out.counts.push_back(used);
  }
  return out;
}

template <typename T>
std::vector<double> parameter_space_vector(const ModelParameters<T>& params) {
  std::vector<double> out;
  out.reserve(params.parameter_count());
  for (const auto& [name, t] : params.tensors) out.insert(out.end(), t.values.begin(), t.values.end());
  return out;
}

Projection project_2d(const std::vector<std::vector<double>>& vectors) {
  if (vectors.size() < 2) throw Error("projection needs at least 2 vectors");
  const std::size_t n = vectors.size(), d = vectors[0].size();
  for (const auto& v : vectors) {
    if (v.size() != d) throw Error("projection vectors differ in length");
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = vectors[i][j];
  }
  x.rowwise() -= x.colwise().mean();

  // Eigenvectors of the small N x N Gram matrix give the principal
  // directions without forming the D x D covariance.
  const Eigen::MatrixXd gram = x * x.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success) throw Error("eigendecomposition failed");
  const double denom = static_cast<double>(n - 1);

  Projection p;
  p.points.assign(n, {0.0, 0.0});
  p.total_variance = x.squaredNorm() / denom;
  const double tol = 1e-12 * std::max(1.0, gram.trace());
  for (int c = 0; c < 2; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(n) - 1 - c;
    if (col < 0) break;
    const double lambda = solver.eigenvalues()(col);
    if (lambda <= tol) continue;
    p.component_variance[static_cast<std::size_t>(c)] = lambda / denom;
    Eigen::VectorXd dir = x.transpose() * solver.eigenvectors().col(col) / std::sqrt(lambda);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0) dir = -dir;
    const Eigen::VectorXd coords = x * dir;
    for (std::size_t i = 0; i < n; ++i) p.points[i][static_cast<std::size_t>(c)] = coords(static_cast<Eigen::Index>(i));
  }
  return p;
}

#define FGL_INSTANTIATE_PROBES(T)                                                                                   \
  template double perplexity<T>(const ModelParameters<T>&, const TransformerConfig&,                              \
                                const std::vector<SequencePair>&);                                                 \
  template SensitivityResult context_sensitivity<T>(const ModelParameters<T>&, const TransformerConfig&,          \
                                                    const std::vector<SequencePair>&, std::uint64_t, double);     \
  template FunctionVector function_space_vector<T>(const ModelParameters<T>&, const TransformerConfig&,           \
                                                   const std::vector<std::vector<SequencePair>>&, std::size_t);   \
  template std::vector<double> parameter_space_vector<T>(const ModelParameters<T>&);

FGL_INSTANTIATE_PROBES(float)
FGL_INSTANTIATE_PROBES(double)

#undef FGL_INSTANTIATE_PROBES

}  // namespace fgl
