#include "fgl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fgl/error.hpp"
#include "fgl/text.hpp"

namespace fgl {

namespace {

std::vector<std::string> read_utf8_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!text::valid_utf8(line)) {
      throw Error(path + ":" + std::to_string(lines.size() + 1) + ": malformed UTF-8");
    }
    lines.push_back(text::rstrip(line));
  }
  return lines;
}

bool blank(const std::string& s) { return text::split_words(s).empty(); }

}  // namespace

std::string to_string(Origin o) { return o == Origin::Pretrain ? "pretrain" : "target"; }

DocumentCorpus load_document_corpus(const std::string& path, Origin source) {
  DocumentCorpus corpus;
  corpus.source = source;
  Document current;
  for (auto& line : read_utf8_lines(path)) {
    if (blank(line)) {
      if (!current.empty()) corpus.documents.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(std::move(line));
    }
  }
  if (!current.empty()) corpus.documents.push_back(std::move(current));
  if (corpus.documents.empty()) throw Error("empty corpus");
  return corpus;
}

DialogueCorpus load_dialogue_corpus(const std::string& path) {
  DialogueCorpus corpus;
  const auto lines = read_utf8_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::string where = path + ":" + std::to_string(i + 1) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(where + "parse error: " + e.what());
    }
    if (!j.is_object() || !j.contains("utterances") || !j["utterances"].is_array()) {
      throw Error(where + "expected object with \"utterances\" array");
    }
    Dialogue d;
    for (const auto& u : j["utterances"]) {
      if (!u.is_string()) throw Error(where + "utterance is not a string");
      d.push_back(u.get<std::string>());
    }
    if (d.size() < 2) throw Error(where + "dialogue needs at least 2 utterances");
    corpus.dialogues.push_back(std::move(d));
  }
  if (corpus.dialogues.empty()) throw Error("empty corpus");
  return corpus;
}

void save_document_corpus(const DocumentCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    if (d) out << '\n';
    for (const auto& s : corpus.documents[d]) out << s << '\n';
  }
}

std::string dialogue_to_jsonl(const Dialogue& dialogue) {
  nlohmann::json j;
  j["utterances"] = dialogue;
  return j.dump();
}

void save_dialogue_corpus(const DialogueCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& d : corpus.dialogues) out << dialogue_to_jsonl(d) << '\n';
}

TokenIds join_context(const std::vector<TokenIds>& turns, std::size_t max_tokens) {
  TokenIds ctx;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (i) ctx.push_back(Vocabulary::eou());
    ctx.insert(ctx.end(), turns[i].begin(), turns[i].end());
  }
  if (ctx.size() > max_tokens) ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(max_tokens));
  return ctx;
}

TokenIds frame_target(const TokenIds& body) {
  TokenIds t;
  t.reserve(body.size() + 2);
  t.push_back(Vocabulary::bos());
  t.insert(t.end(), body.begin(), body.end());
  t.push_back(Vocabulary::eos());
  return t;
}

namespace {

std::vector<SequencePair> prefix_pairs(const std::vector<std::string>& turns, const Tokenizer& tok,
                                       std::size_t max_context, Origin origin) {
  std::vector<SequencePair> pairs;
  if (turns.size() < 2) return pairs;
  std::vector<TokenIds> encoded;
  encoded.reserve(turns.size());
  for (const auto& s : turns) encoded.push_back(tok.encode(s));
  std::vector<TokenIds> history;
  for (std::size_t t = 0; t < encoded.size(); ++t) {
    if (t > 0) {
      pairs.push_back(SequencePair{join_context(history, max_context), frame_target(encoded[t]), origin});
    }
    history.push_back(encoded[t]);
  }
  return pairs;
}

}  // namespace

std::vector<SequencePair> make_ns_pairs(const Document& doc, const Tokenizer& tok, std::size_t max_context) {
  return prefix_pairs(doc, tok, max_context, Origin::Pretrain);
}

std::vector<SequencePair> make_dialogue_pairs(const Dialogue& dialogue, const Tokenizer& tok,
                                              std::size_t max_context) {
  return prefix_pairs(dialogue, tok, max_context, Origin::Target);
}

SequencePair make_mass_pair_at(const TokenIds& sentence, std::size_t start, std::size_t length) {
  if (length == 0 || start + length > sentence.size()) throw Error("mask span out of range");
  SequencePair p;
  p.origin = Origin::Pretrain;
  p.context = sentence;
  std::fill(p.context.begin() + static_cast<std::ptrdiff_t>(start),
            p.context.begin() + static_cast<std::ptrdiff_t>(start + length), Vocabulary::mask());
  p.target = frame_target(TokenIds(sentence.begin() + static_cast<std::ptrdiff_t>(start),
                                   sentence.begin() + static_cast<std::ptrdiff_t>(start + length)));
  return p;
}

std::optional<SequencePair> make_mass_pair(const TokenIds& sentence, Rng& rng, double fraction) {
  const std::size_t n = sentence.size();
  if (n < 2) return std::nullopt;
  auto length = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  length = std::clamp<std::size_t>(length, 1, n);
  const std::size_t start = rng.below(n - length + 1);
  return make_mass_pair_at(sentence, start, length);
}

std::size_t mix_count(std::size_t epoch, const MixSchedule& schedule) {
  if (epoch < 1) throw Error("epoch must be >= 1");
  const double x = static_cast<double>(schedule.base_target_size) * schedule.mix_ratio *
                   std::pow(schedule.mix_decay, static_cast<double>(epoch - 1));
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

std::vector<SequencePair> compose_epoch(const std::vector<SequencePair>& target_pairs,
                                        const std::vector<SequencePair>& pretrain_pairs, std::size_t epoch,
                                        const MixSchedule& schedule, Rng& rng) {
  const std::size_t count = mix_count(epoch, schedule);
  std::vector<SequencePair> out(target_pairs);
  if (count > 0) {
    if (pretrain_pairs.empty()) throw Error("no pretraining data");
    out.reserve(out.size() + count);
    if (count <= pretrain_pairs.size()) {
      // partial Fisher-Yates over indices
      std::vector<std::size_t> idx(pretrain_pairs.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < count; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        out.push_back(pretrain_pairs[idx[i]]);
      }
    } else {
      for (std::size_t i = 0; i < count; ++i) out.push_back(pretrain_pairs[rng.below(pretrain_pairs.size())]);
    }
  }
  rng.shuffle(out);
  return out;
}

std::size_t Batch::predicted_tokens() const {
  std::size_t n = 0;
  for (std::size_t b = 0; b < size; ++b) {
    for (std::size_t t = 1; t < target_len; ++t) n += target_mask[b * target_len + t];
  }
  return n;
}

Batch make_batch(const std::vector<SequencePair>& pairs, std::size_t begin, std::size_t end, TokenId pad_id) {
  Batch b;
  b.size = end - begin;
  for (std::size_t i = begin; i < end; ++i) {
    b.context_len = std::max(b.context_len, pairs[i].context.size());
    b.target_len = std::max(b.target_len, pairs[i].target.size());
  }
  b.context.assign(b.size * b.context_len, pad_id);
  b.target.assign(b.size * b.target_len, pad_id);
  b.context_mask.assign(b.size * b.context_len, 0);
  b.target_mask.assign(b.size * b.target_len, 0);
  for (std::size_t i = begin; i < end; ++i) {
    const std::size_t r = i - begin;
    const auto& p = pairs[i];
    for (std::size_t t = 0; t < p.context.size(); ++t) {
      b.context[r * b.context_len + t] = p.context[t];
      b.context_mask[r * b.context_len + t] = 1;
    }
    for (std::size_t t = 0; t < p.target.size(); ++t) {
      b.target[r * b.target_len + t] = p.target[t];
      b.target_mask[r * b.target_len + t] = 1;
    }
  }
  return b;
}

std::vector<Batch> batchify(const std::vector<SequencePair>& pairs, std::size_t batch_size, TokenId pad_id) {
  if (batch_size < 1) throw Error("batch_size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    out.push_back(make_batch(pairs, i, std::min(pairs.size(), i + batch_size), pad_id));
  }
  return out;
}

std::vector<Batch> bucketed_batches(const std::vector<SequencePair>& pairs, std::size_t batch_size, std::size_t window,
                                    Rng& rng, TokenId pad_id) {
  if (batch_size < 1 || window < 1) throw Error("batch_size and window must be >= 1");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t span = batch_size * window;
  for (std::size_t begin = 0; begin < order.size(); begin += span) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(begin);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + span));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
      return std::pair(pairs[a].context.size(), pairs[a].target.size()) <
             std::pair(pairs[b].context.size(), pairs[b].target.size());
    });
  }
  std::vector<SequencePair> sorted;
  sorted.reserve(pairs.size());
  for (std::size_t i : order) sorted.push_back(pairs[i]);
  auto batches = batchify(sorted, batch_size, pad_id);
  rng.shuffle(batches);
  return batches;
}

}  // namespace fgl
