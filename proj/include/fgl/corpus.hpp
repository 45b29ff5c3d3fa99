#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fgl/rng.hpp"
#include "fgl/tokenizer.hpp"

namespace fgl {

inline constexpr std::size_t kMaxContextTokens = 128;

enum class Origin : std::uint8_t { Pretrain, Target };

std::string to_string(Origin o);

using Document = std::vector<std::string>;

struct DocumentCorpus {
  std::vector<Document> documents;
  Origin source = Origin::Pretrain;
};

using Dialogue = std::vector<std::string>;

struct DialogueCorpus {
  std::vector<Dialogue> dialogues;
};

/// One (context, target) instance. `target` is framed BOS ... EOS.
struct SequencePair {
  TokenIds context;
  TokenIds target;
  Origin origin = Origin::Target;

  bool operator==(const SequencePair&) const = default;
};

struct MixSchedule {
  double mix_ratio = 0.0;
  double mix_decay = 1.0;
  std::size_t base_target_size = 0;
};

/// Blank-line separated documents, one sentence per line.
DocumentCorpus load_document_corpus(const std::string& path, Origin source = Origin::Pretrain);
/// JSONL, one {"utterances": [...]} object per line.
DialogueCorpus load_dialogue_corpus(const std::string& path);

void save_document_corpus(const DocumentCorpus& corpus, const std::string& path);
void save_dialogue_corpus(const DialogueCorpus& corpus, const std::string& path);
/// Single JSONL line for one dialogue, without trailing newline.
std::string dialogue_to_jsonl(const Dialogue& dialogue);

/// Joins utterances with EOU and keeps the last `max_tokens` tokens.
TokenIds join_context(const std::vector<TokenIds>& turns, std::size_t max_tokens = kMaxContextTokens);

TokenIds frame_target(const TokenIds& body);

/// Next-sentence pairs: every sentence after the first becomes a target,
/// with all preceding sentences as context.
std::vector<SequencePair> make_ns_pairs(const Document& doc, const Tokenizer& tok,
                                        std::size_t max_context = kMaxContextTokens);

std::vector<SequencePair> make_dialogue_pairs(const Dialogue& dialogue, const Tokenizer& tok,
                                              std::size_t max_context = kMaxContextTokens);

/// Masks `sentence[start, start+length)` in the context; the masked
/// tokens become the target.
SequencePair make_mass_pair_at(const TokenIds& sentence, std::size_t start, std::size_t length);

/// Random span of ceil(fraction*n) tokens. Returns nothing for n < 2.
std::optional<SequencePair> make_mass_pair(const TokenIds& sentence, Rng& rng, double fraction = 0.5);

/// round-half-up(base * ratio * decay^(epoch-1)).
std::size_t mix_count(std::size_t epoch, const MixSchedule& schedule);

/// All target pairs plus mix_count(epoch) sampled pretrain pairs, shuffled.
std::vector<SequencePair> compose_epoch(const std::vector<SequencePair>& target_pairs,
                                        const std::vector<SequencePair>& pretrain_pairs, std::size_t epoch,
                                        const MixSchedule& schedule, Rng& rng);

/// Padded batch. Matrices are row-major, one row per pair.
struct Batch {
  std::size_t size = 0;
  std::size_t context_len = 0;
  std::size_t target_len = 0;  // full framed length, BOS..EOS
  std::vector<TokenId> context;
  std::vector<TokenId> target;
  std::vector<std::uint8_t> context_mask;
  std::vector<std::uint8_t> target_mask;

  TokenId context_at(std::size_t b, std::size_t t) const { return context[b * context_len + t]; }
  TokenId target_at(std::size_t b, std::size_t t) const { return target[b * target_len + t]; }
  /// Count of predicted (non-pad) target tokens, i.e. framed lengths minus one.
  std::size_t predicted_tokens() const;
};

Batch make_batch(const std::vector<SequencePair>& pairs, std::size_t begin, std::size_t end,
                 TokenId pad_id = Vocabulary::pad());

std::vector<Batch> batchify(const std::vector<SequencePair>& pairs, std::size_t batch_size,
                            TokenId pad_id = Vocabulary::pad());

/// Batches for one training epoch. Pairs are sorted by length inside windows
/// of `window` batches so that little padding is wasted, then the batch order
/// is shuffled. Every pair still appears exactly once.
std::vector<Batch> bucketed_batches(const std::vector<SequencePair>& pairs, std::size_t batch_size, std::size_t window,
                                    Rng& rng, TokenId pad_id = Vocabulary::pad());

}  // namespace fgl
