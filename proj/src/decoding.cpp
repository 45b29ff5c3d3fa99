#include "fgl/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "fgl/error.hpp"

namespace fgl {

void DecoderSettings::validate() const {
  if (k < 1) throw Error("k must be >= 1");
  if (max_len < 1) throw Error("max_len must be >= 1");
  if (beam_width < 1) throw Error("beam_width must be >= 1");
}

void to_json(nlohmann::json& j, const DecoderSettings& s) {
  j = nlohmann::json{{"k", s.k}, {"max_len", s.max_len}, {"beam_width", s.beam_width}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DecoderSettings& s) {
  s.k = j.at("k").get<std::size_t>();
  s.max_len = j.at("max_len").get<std::size_t>();
  s.beam_width = j.at("beam_width").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

std::vector<TokenId> top_k_indices(const std::vector<double>& scores, std::size_t k) {
  if (k < 1) throw Error("k must be >= 1");
  k = std::min(k, scores.size());
  std::vector<TokenId> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
    const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  });
  ids.resize(k);
  return ids;
}

TokenId top_k_sample_token(const std::vector<double>& logits, std::size_t k, Rng& rng) {
  if (logits.empty()) throw Error("empty logits");
  for (double x : logits) {
    if (!std::isfinite(x)) throw Error("non-finite logits");
  }
  const auto ids = top_k_indices(logits, k);
  const double top = logits[static_cast<std::size_t>(ids[0])];
  std::vector<double> weights(ids.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    weights[i] = std::exp(logits[static_cast<std::size_t>(ids[i])] - top);
    total += weights[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (u < weights[i]) return ids[i];
    u -= weights[i];
  }
  return ids.back();
}

template <typename T>
TokenIds generate(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                  const DecoderSettings& settings, Rng& rng) {
  settings.validate();
  const auto ctx = encode_context<T>(params, config, context_ids);
  TokenIds prefix{Vocabulary::bos()};
  for (std::size_t step = 0; step < settings.max_len; ++step) {
    const auto lp = next_token_logprobs<T>(params, config, ctx, {prefix});
    const TokenId tok = top_k_sample_token(lp[0], settings.k, rng);
    if (tok == Vocabulary::eos()) break;
    prefix.push_back(tok);
  }
  return TokenIds(prefix.begin() + 1, prefix.end());
}

template <typename T>
BeamResult beam_search(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                       std::size_t beam_width, std::size_t max_len) {
  if (beam_width < 1) throw Error("beam_width must be >= 1");
  if (max_len < 1) throw Error("max_len must be >= 1");
  struct Hyp {
    TokenIds tokens;
    double sum = 0.0;
  };
  const auto ctx = encode_context<T>(params, config, context_ids);
  std::vector<Hyp> alive{Hyp{}};
  BeamResult best;
  bool have_best = false;
  auto offer = [&](const TokenIds& tokens, double score, bool finished) {
    if (!have_best || score > best.score) {
      best = BeamResult{tokens, score, finished};
      have_best = true;
    }
  };

  for (std::size_t step = 1; step <= max_len && !alive.empty(); ++step) {
    std::vector<TokenIds> prefixes;
    prefixes.reserve(alive.size());
    for (const auto& h : alive) {
      TokenIds p{Vocabulary::bos()};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const auto lps = next_token_logprobs<T>(params, config, ctx, prefixes);
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      for (TokenId tok : top_k_indices(lps[i], beam_width)) {
        const double sum = alive[i].sum + lps[i][static_cast<std::size_t>(tok)];
        if (tok == Vocabulary::eos()) {
          offer(alive[i].tokens, sum / static_cast<double>(step), true);
          continue;
        }
        Hyp h{alive[i].tokens, sum};
        h.tokens.push_back(tok);
        if (step == max_len) {
          offer(h.tokens, sum / static_cast<double>(step), false);
        } else {
          next.push_back(std::move(h));
        }
      }
    }
    std::stable_sort(next.begin(), next.end(), [](const Hyp& a, const Hyp& b) { return a.sum > b.sum; });
    if (next.size() > beam_width) next.resize(beam_width);
    alive = std::move(next);
  }
  return best;
}

template <typename T>
double normalized_score(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                        const TokenIds& tokens, bool finished) {
  TokenIds target{Vocabulary::bos()};
  target.insert(target.end(), tokens.begin(), tokens.end());
  if (finished) target.push_back(Vocabulary::eos());
  if (target.size() < 2) throw Error("empty target");
  return sequence_logprob<T>(params, config, context_ids, target) / static_cast<double>(target.size() - 1);
}

namespace {

template <typename Tok>
double ngram_entropy(const std::vector<std::vector<Tok>>& responses, std::size_t n) {
  std::map<std::vector<Tok>, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& r : responses) {
    for (std::size_t i = 0; i + n <= r.size(); ++i) {
      counts[std::vector<Tok>(r.begin() + static_cast<std::ptrdiff_t>(i),
                              r.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1;
      ++total;
    }
  }
  double h = 0.0;
  for (const auto& [gram, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h;
}

template <typename Tok>
DiversityMetrics diversity_impl(const std::vector<std::vector<Tok>>& responses) {
  if (responses.empty()) throw Error("empty response pool");
  DiversityMetrics m;
  m.bigram_entropy = ngram_entropy(responses, 2);
  m.trigram_entropy = ngram_entropy(responses, 3);
  std::map<std::vector<Tok>, std::size_t> whole;
  for (const auto& r : responses) whole[r] += 1;
  std::vector<std::size_t> counts;
  for (const auto& [r, c] : whole) counts.push_back(c);
  std::sort(counts.rbegin(), counts.rend());
  const double n = static_cast<double>(responses.size());
  m.top1_percent = 100.0 * static_cast<double>(counts[0]) / n;
  m.top2_percent = counts.size() > 1 ? 100.0 * static_cast<double>(counts[1]) / n : 0.0;
  return m;
}

}  // namespace

DiversityMetrics diversity_metrics(const std::vector<std::vector<std::string>>& responses) {
  return diversity_impl(responses);
}

DiversityMetrics diversity_metrics(const std::vector<TokenIds>& responses) { return diversity_impl(responses); }

std::string format_max_ratio(const DiversityMetrics& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f%% %.1f%%", m.top1_percent, m.top2_percent);
  return buf;
}

#define FGL_INSTANTIATE_DECODING(T)                                                                             \
  template TokenIds generate<T>(const ModelParameters<T>&, const TransformerConfig&, const TokenIds&,         \
                                const DecoderSettings&, Rng&);                                                 \
  template BeamResult beam_search<T>(const ModelParameters<T>&, const TransformerConfig&, const TokenIds&,    \
                                     std::size_t, std::size_t);                                                \
  template double normalized_score<T>(const ModelParameters<T>&, const TransformerConfig&, const TokenIds&,   \
                                      const TokenIds&, bool);

FGL_INSTANTIATE_DECODING(float)
FGL_INSTANTIATE_DECODING(double)

#undef FGL_INSTANTIATE_DECODING

}  // namespace fgl
