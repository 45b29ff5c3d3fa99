#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fgl {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

inline constexpr std::string_view kEndOfWord = "</w>";

/// Learned merge rules, highest priority first.
struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;
  std::string end_of_word_marker{kEndOfWord};

  std::size_t merge_count() const { return merges.size(); }

  bool operator==(const BpeModel&) const = default;
};

enum class Special : int { Pad = 0, Unk, Bos, Eos, Eou, Mask };

inline constexpr std::array<std::string_view, 6> kSpecialLiterals = {
    "<PAD>", "<UNK>", "<BOS>", "<EOS>", "<eou>", "<MASK>"};

bool is_special_literal(std::string_view s);

/// Token <-> id bijection. The six special tokens occupy ids 0..5 in the
/// order of `Special`.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  /// Id for `token`, or UNK when absent.
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  static constexpr TokenId special(Special s) { return static_cast<TokenId>(s); }
  static constexpr TokenId pad() { return special(Special::Pad); }
  static constexpr TokenId unk() { return special(Special::Unk); }
  static constexpr TokenId bos() { return special(Special::Bos); }
  static constexpr TokenId eos() { return special(Special::Eos); }
  static constexpr TokenId eou() { return special(Special::Eou); }
  static constexpr TokenId mask() { return special(Special::Mask); }

  /// FNV-1a over the newline-joined token list, as 16 hex digits.
  std::string checksum() const;

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Learns `num_merges` merges over whitespace-split words. Each merge takes
/// the most frequent adjacent pair; ties go to the lexicographically
/// smallest merged symbol, then to the smallest (left, right). Pairs seen
/// fewer than twice are never merged.
BpeModel learn_bpe(const std::vector<std::string>& corpus, std::size_t num_merges);

/// Segments one word (without marker) into subword symbols.
std::vector<std::string> segment_word(const BpeModel& bpe, std::string_view word);

/// Specials first, then every symbol produced by segmenting `corpus`,
/// ordered by descending frequency with lexicographic ties.
Vocabulary build_vocabulary(const BpeModel& bpe, const std::vector<std::string>& corpus);

TokenIds encode(const BpeModel& bpe, const Vocabulary& vocab, std::string_view text);
std::string decode(const BpeModel& bpe, const Vocabulary& vocab, const TokenIds& ids);

void save_merges(const BpeModel& bpe, const std::string& path);
BpeModel load_merges(const std::string& path);
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

/// BPE model plus vocabulary with a per-word segmentation cache.
/// Not thread-safe for encode because of the cache; copy per thread.
class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(BpeModel bpe, Vocabulary vocab) : bpe_(std::move(bpe)), vocab_(std::move(vocab)) {}

  static Tokenizer train(const std::vector<std::string>& corpus, std::size_t num_merges);

  TokenIds encode(std::string_view text) const;
  std::string decode(const TokenIds& ids) const;

  const BpeModel& bpe() const { return bpe_; }
  const Vocabulary& vocab() const { return vocab_; }

 private:
  BpeModel bpe_;
  Vocabulary vocab_;
  mutable std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
  mutable std::unordered_map<std::string, TokenIds> cache_;
};

}  // namespace fgl
