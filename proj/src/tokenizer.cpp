#include "fgl/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "fgl/error.hpp"
#include "fgl/text.hpp"

namespace fgl {

namespace {

using Pair = std::pair<std::string, std::string>;
using Ranks = std::map<Pair, std::size_t>;

std::vector<std::string> initial_symbols(std::string_view word, std::string_view marker) {
  auto symbols = text::code_points(word);
  if (!symbols.empty()) symbols.back().append(marker);
  return symbols;
}

Ranks make_ranks(const BpeModel& bpe) {
  Ranks ranks;
  for (std::size_t i = 0; i < bpe.merges.size(); ++i) ranks.emplace(bpe.merges[i], i);
  return ranks;
}

std::vector<std::string> segment_with(const Ranks& ranks, std::string_view word, std::string_view marker) {
  auto symbols = initial_symbols(word, marker);
  while (symbols.size() > 1) {
    std::size_t best_rank = SIZE_MAX;
    const Pair* best = nullptr;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = ranks.find(Pair{symbols[i], symbols[i + 1]});
      if (it != ranks.end() && it->second < best_rank) {
        best_rank = it->second;
        best = &it->first;
      }
    }
    if (best == nullptr) break;
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == best->first && symbols[i + 1] == best->second) {
        merged.push_back(symbols[i] + symbols[i + 1]);
        i += 2;
      } else {
        merged.push_back(std::move(symbols[i]));
        ++i;
      }
    }
    symbols = std::move(merged);
  }
  return symbols;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

TokenIds encode_with(const Ranks& ranks, const BpeModel& bpe, const Vocabulary& vocab, std::string_view text,
                     std::unordered_map<std::string, TokenIds>* cache) {
  TokenIds out;
  for (const auto& word : text::split_words(text)) {
    if (is_special_literal(word)) {
      out.push_back(vocab.id(word));
      continue;
    }
    if (cache) {
      auto it = cache->find(word);
      if (it != cache->end()) {
        out.insert(out.end(), it->second.begin(), it->second.end());
        continue;
      }
    }
    TokenIds piece;
    for (const auto& sym : segment_with(ranks, word, bpe.end_of_word_marker)) piece.push_back(vocab.id(sym));
    out.insert(out.end(), piece.begin(), piece.end());
    if (cache) cache->emplace(word, std::move(piece));
  }
  return out;
}

}  // namespace

bool is_special_literal(std::string_view s) {
  return std::find(kSpecialLiterals.begin(), kSpecialLiterals.end(), s) != kSpecialLiterals.end();
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>(kSpecialLiterals.begin(), kSpecialLiterals.end())) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kSpecialLiterals.size()) throw Error("vocabulary is missing special tokens");
  for (std::size_t i = 0; i < kSpecialLiterals.size(); ++i) {
    if (tokens_[i] != kSpecialLiterals[i]) throw Error("vocabulary special token out of place: " + tokens_[i]);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error("duplicate vocabulary token: " + tokens_[i]);
    }
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw Error("invalid token id");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? unk() : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

std::string Vocabulary::checksum() const {
  std::uint64_t h = text::fnv1a("");
  for (const auto& t : tokens_) {
    h = text::fnv1a(t, h);
    h = text::fnv1a("\n", h);
  }
  return text::hex64(h);
}

BpeModel learn_bpe(const std::vector<std::string>& corpus, std::size_t num_merges) {
  if (corpus.empty()) throw Error("empty corpus");
  if (num_merges < 1) throw Error("num_merges must be >= 1");

  BpeModel model;
  std::map<std::string, std::int64_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : text::split_words(line)) {
      if (!is_special_literal(w)) ++word_freq[w];
    }
  }

  std::vector<std::vector<std::string>> words;
  std::vector<std::int64_t> freq;
  for (const auto& [w, f] : word_freq) {
    words.push_back(initial_symbols(w, model.end_of_word_marker));
    freq.push_back(f);
  }

  std::map<Pair, std::int64_t> counts;
  std::map<Pair, std::set<std::size_t>> where;
  auto add_pairs = [&](std::size_t wi, std::int64_t sign) {
    const auto& syms = words[wi];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      Pair p{syms[i], syms[i + 1]};
      auto& c = counts[p];
      c += sign * freq[wi];
      if (c == 0) counts.erase(p);
      if (sign > 0) where[p].insert(wi);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) add_pairs(wi, +1);

  while (model.merges.size() < num_merges) {
    const Pair* best = nullptr;
    std::int64_t best_count = 1;
    std::string best_joined;
    for (const auto& [p, c] : counts) {
      if (c < best_count) continue;
      std::string joined = p.first + p.second;
      if (is_special_literal(joined)) continue;
      if (c > best_count || best == nullptr || joined < best_joined ||
          (joined == best_joined && p < *best)) {
        best = &p;
        best_count = c;
        best_joined = std::move(joined);
      }
    }
    if (best == nullptr || best_count < 2) break;
    const Pair chosen = *best;
    model.merges.push_back(chosen);

    const std::set<std::size_t> affected = where[chosen];
    for (std::size_t wi : affected) {
      auto& syms = words[wi];
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i] == chosen.first && syms[i + 1] == chosen.second) {
          present = true;
          break;
        }
      }
      if (!present) continue;
      add_pairs(wi, -1);
      std::vector<std::string> merged;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == chosen.first && syms[i + 1] == chosen.second) {
          merged.push_back(best_joined);
          i += 2;
        } else {
          merged.push_back(syms[i]);
          ++i;
        }
      }
      syms = std::move(merged);
      add_pairs(wi, +1);
    }
    where.erase(chosen);
  }
  return model;
}

std::vector<std::string> segment_word(const BpeModel& bpe, std::string_view word) {
  return segment_with(make_ranks(bpe), word, bpe.end_of_word_marker);
}

Vocabulary build_vocabulary(const BpeModel& bpe, const std::vector<std::string>& corpus) {
  const Ranks ranks = make_ranks(bpe);
  std::map<std::string, std::int64_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : text::split_words(line)) {
      if (!is_special_literal(w)) ++word_freq[w];
    }
  }
  std::map<std::string, std::int64_t> symbol_freq;
  for (const auto& [w, f] : word_freq) {
    for (auto& s : segment_with(ranks, w, bpe.end_of_word_marker)) symbol_freq[s] += f;
  }
  std::vector<std::pair<std::string, std::int64_t>> ordered;
  for (auto& [s, f] : symbol_freq) {
    if (!is_special_literal(s)) ordered.emplace_back(s, f);
  }
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens(kSpecialLiterals.begin(), kSpecialLiterals.end());
  for (auto& [s, f] : ordered) tokens.push_back(s);
  return Vocabulary(std::move(tokens));
}

TokenIds encode(const BpeModel& bpe, const Vocabulary& vocab, std::string_view text) {
  return encode_with(make_ranks(bpe), bpe, vocab, text, nullptr);
}

std::string decode(const BpeModel& bpe, const Vocabulary& vocab, const TokenIds& ids) {
  std::vector<std::string> words;
  std::string current;
  bool open = false;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (id < static_cast<TokenId>(kSpecialLiterals.size())) {
      if (open) words.push_back(std::move(current));
      current.clear();
      open = false;
      words.push_back(tok);
    } else if (ends_with(tok, bpe.end_of_word_marker)) {
      current.append(tok, 0, tok.size() - bpe.end_of_word_marker.size());
      words.push_back(std::move(current));
      current.clear();
      open = false;
    } else {
      current.append(tok);
      open = true;
    }
  }
  if (open) words.push_back(std::move(current));
  return text::join(words);
}

void save_merges(const BpeModel& bpe, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& [l, r] : bpe.merges) out << l << ' ' << r << '\n';
}

BpeModel load_merges(const std::string& path) {
  BpeModel bpe;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() || line.find(' ', sp + 1) != std::string::npos) {
      throw Error(path + ":" + std::to_string(i + 1) + ": malformed merge line");
    }
    bpe.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return bpe;
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& t : vocab.tokens()) out << t << '\n';
}

Vocabulary load_vocabulary(const std::string& path) { return Vocabulary(read_lines(path)); }

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, std::size_t num_merges) {
  BpeModel bpe = learn_bpe(corpus, num_merges);
  Vocabulary vocab = build_vocabulary(bpe, corpus);
  return Tokenizer(std::move(bpe), std::move(vocab));
}

TokenIds Tokenizer::encode(std::string_view text) const {
  if (ranks_.empty() && !bpe_.merges.empty()) ranks_ = make_ranks(bpe_);
  return encode_with(ranks_, bpe_, vocab_, text, &cache_);
}

std::string Tokenizer::decode(const TokenIds& ids) const { return fgl::decode(bpe_, vocab_, ids); }

}  // namespace fgl
