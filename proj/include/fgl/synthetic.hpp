#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fgl/corpus.hpp"
#include "fgl/probes.hpp"
#include "fgl/rng.hpp"

namespace fgl {

/// A small invented world: people with a few attributes each. News-style
/// documents and chit-chat dialogues are both generated from the same facts,
/// so a model pretrained on the news side has something to transfer.
struct Entity {
  std::string name;
  std::string city;
  std::string job;
  std::string food;
  std::string pet;
  std::string hobby;
};

struct World {
  std::vector<Entity> entities;
};

World make_world(std::size_t entities, std::uint64_t seed);

/// Each document talks about one entity in 4-5 short sentences.
DocumentCorpus make_news_corpus(const World& world, std::size_t documents, Rng& rng);

/// Each dialogue asks about one entity in 4-7 turns.
DialogueCorpus make_dialogue_corpus(const World& world, std::size_t dialogues, Rng& rng);

/// One term per entity; the description is a news-style summary sentence.
std::vector<KnowledgeTerm> world_knowledge_terms(const World& world);

/// Every distinct word used by the generators.
std::vector<std::string> world_words(const World& world);

}  // namespace fgl
