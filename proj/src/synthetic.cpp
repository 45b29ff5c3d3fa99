#include "fgl/synthetic.hpp"

#include <algorithm>
#include <set>

#include "fgl/error.hpp"
#include "fgl/text.hpp"

namespace fgl {

namespace {

const std::vector<std::string> kCities = {"paris", "oslo",   "lima",   "cairo",  "dublin", "quito",
                                          "perth", "osaka",  "vienna", "nairobi", "havana", "lisbon",
                                          "denver", "bergen", "porto", "seoul"};
const std::vector<std::string> kJobs = {"baker",  "pilot",   "nurse",  "farmer", "painter", "lawyer", "chef",
                                        "teacher", "plumber", "dentist", "sailor", "banker", "writer", "miner"};
const std::vector<std::string> kFoods = {"bread", "rice",     "soup",  "noodles",   "cheese", "apples",
                                         "fish",  "beans", "pancakes", "salad", "dumplings", "tacos"};
const std::vector<std::string> kPets = {"cat", "dog", "parrot", "rabbit", "turtle", "horse", "goat", "hamster"};
const std::vector<std::string> kHobbies = {"chess",   "hiking",  "painting",  "fishing", "singing",
                                           "running", "gardening", "dancing", "cycling", "knitting"};

// Sentence templates; {n} name, {c} city, {j} job, {f} food, {p} pet, {h} hobby.
const std::vector<std::string> kNewsTemplates = {
    "{n} lives in {c} and works as a {j} .",
    "reports say {n} moved to {c} last year .",
    "according to officials , {n} is a well known {j} .",
    "{n} often eats {f} after work .",
    "local news : {n} adopted a {p} this week .",
    "sources confirm that {n} enjoys {h} on weekends .",
    "the {j} from {c} was seen with a {p} .",
    "experts note that the {j} prefers {f} .",
    "in a statement , {n} said that {h} is a great hobby .",
};

const std::vector<std::string> kOpeners = {
    "hey , have you met {n} ?",
    "do you know {n} ?",
    "i ran into {n} today !",
    "have you heard from {n} lately ?",
};

const std::vector<std::string> kOpenerReplies = {
    "yeah , {n} is a {j} , right ?",
    "oh sure , the {j} !",
    "yes ! {n} is such a nice {j} .",
};

struct QA {
  std::string question;
  std::string answer;
};

const std::vector<QA> kQuestions = {
    {"where does {n} live now ?", "i think {n} lives in {c} ."},
    {"is {n} still in {c} ?", "yep , still in {c} , i guess ."},
    {"does {n} have any pets ?", "yes , a {p} , lol ."},
    {"what does {n} like to eat ?", "mostly {f} , honestly ."},
    {"any hobbies ?", "{n} loves {h} !"},
    {"what do you two do for fun ?", "we go {h} sometimes ."},
};

// Two-person variants. {n} is replaced by "the former" / "the latter", so
// which facts apply depends on the order the names were introduced in.
const std::vector<std::string> kPairIntros = {
    "{a} and {b} were seen together in town .",
    "{a} met {b} at a local market .",
    "officials say {a} and {b} are old friends .",
};
const std::vector<std::string> kPairNewsTemplates = {
    "{n} lives in {c} and works as a {j} .",
    "{n} moved to {c} last year .",
    "{n} is a well known {j} .",
    "{n} often eats {f} after work .",
    "{n} adopted a {p} this week .",
    "{n} enjoys {h} on weekends .",
};
const std::vector<std::string> kPairOpeners = {
    "do you know {a} and {b} ?",
    "i saw {a} with {b} today !",
};
// Filled with the first person as {n}/{c}/{j} and the second as {N}/{C}/{J}.
const std::vector<std::string> kPairOpenerReplies = {
    "sure , the former is a {j} and the latter lives in {C} .",
    "yes , the former lives in {c} and the latter is a {J} .",
};
const std::vector<QA> kPairQuestions = {
    {"where does {n} live now ?", "in {c} , working as a {j} ."},
    {"what does {n} do for work ?", "a {j} in {c} , i think ."},
    {"does {n} have any pets ?", "yes , a {p} that eats {f} ."},
    {"what does {n} like to eat ?", "mostly {f} , and {h} for fun ."},
    {"what about hobbies for {n} ?", "{h} , and a {p} at home ."},
};
const char* const kReferents[2] = {"the former", "the latter"};

const std::vector<std::string> kClosers = {"cool , say hi for me !", "nice , thanks !", "haha , ok ."};

std::string fill(const std::string& tmpl, const Entity& e, const std::string& name_text = {}) {
  const std::string& name = name_text.empty() ? e.name : name_text;
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
      switch (tmpl[i + 1]) {
        case 'n': out += name; break;
        case 'c': out += e.city; break;
        case 'j': out += e.job; break;
        case 'f': out += e.food; break;
        case 'p': out += e.pet; break;
        case 'h': out += e.hobby; break;
        default: throw Error("bad template slot");
      }
      i += 2;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

std::string fill_pair(const std::string& tmpl, const Entity& a, const Entity& b) {
  std::string out = tmpl;
  const std::pair<std::string, const std::string*> slots[] = {
      {"{a}", &a.name}, {"{b}", &b.name}, {"{N}", &b.name}, {"{C}", &b.city}, {"{J}", &b.job}};
  for (const auto& [slot, value] : slots) {
    const auto at = out.find(slot);
    if (at != std::string::npos) out.replace(at, slot.size(), *value);
  }
  return fill(out, a);
}

template <typename V>
const typename V::value_type& pick(const V& v, Rng& rng) {
  return v[rng.below(v.size())];
}

std::vector<std::size_t> choose(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

}  // namespace

World make_world(std::size_t entities, std::uint64_t seed) {
  static const std::string onsets = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  static const std::vector<std::string> codas = {"", "n", "r", "s"};
  const std::size_t capacity = onsets.size() * vowels.size() * onsets.size() * vowels.size() * codas.size();
  if (entities > capacity / 4) throw Error("too many entities");
  Rng rng(seed);
  std::set<std::string> used;
  for (const auto* list : {&kCities, &kJobs, &kFoods, &kPets, &kHobbies}) used.insert(list->begin(), list->end());
  World w;
  while (w.entities.size() < entities) {
    std::string name;
    name += onsets[rng.below(onsets.size())];
    name += vowels[rng.below(vowels.size())];
    name += onsets[rng.below(onsets.size())];
    name += vowels[rng.below(vowels.size())];
    name += codas[rng.below(codas.size())];
    if (!used.insert(name).second) continue;
    w.entities.push_back(Entity{name, pick(kCities, rng), pick(kJobs, rng), pick(kFoods, rng), pick(kPets, rng),
                                pick(kHobbies, rng)});
  }
  return w;
}

DocumentCorpus make_news_corpus(const World& world, std::size_t documents, Rng& rng) {
  if (world.entities.empty()) throw Error("empty world");
  DocumentCorpus corpus;
  corpus.source = Origin::Pretrain;
  for (std::size_t d = 0; d < documents; ++d) {
    if (world.entities.size() > 1 && rng.below(2) == 0) {
      const auto two = choose(world.entities.size(), 2, rng);
      const Entity* people[2] = {&world.entities[two[0]], &world.entities[two[1]]};
      Document doc{fill_pair(pick(kPairIntros, rng), *people[0], *people[1])};
      const std::size_t len = 3 + rng.below(2);
      for (std::size_t t : choose(kPairNewsTemplates.size(), len, rng)) {
        const std::size_t who = rng.below(2);
        doc.push_back(fill(kPairNewsTemplates[t], *people[who], kReferents[who]));
      }
      corpus.documents.push_back(std::move(doc));
      continue;
    }
    const Entity& e = pick(world.entities, rng);
    const std::size_t len = 4 + rng.below(2);
    Document doc;
    for (std::size_t t : choose(kNewsTemplates.size(), len, rng)) doc.push_back(fill(kNewsTemplates[t], e));
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

DialogueCorpus make_dialogue_corpus(const World& world, std::size_t dialogues, Rng& rng) {
  if (world.entities.empty()) throw Error("empty world");
  DialogueCorpus corpus;
  for (std::size_t d = 0; d < dialogues; ++d) {
    if (world.entities.size() > 1 && rng.below(4) != 0) {
      const auto two = choose(world.entities.size(), 2, rng);
      const Entity* people[2] = {&world.entities[two[0]], &world.entities[two[1]]};
      Dialogue dlg{fill_pair(pick(kPairOpeners, rng), *people[0], *people[1]),
                   fill_pair(pick(kPairOpenerReplies, rng), *people[0], *people[1])};
      const std::size_t questions = 1 + rng.below(2);
      for (std::size_t q : choose(kPairQuestions.size(), questions, rng)) {
        const std::size_t who = rng.below(2);
        dlg.push_back(fill(kPairQuestions[q].question, *people[who], kReferents[who]));
        dlg.push_back(fill(kPairQuestions[q].answer, *people[who], kReferents[who]));
      }
      if (rng.below(2) == 0) dlg.push_back(pick(kClosers, rng));
      corpus.dialogues.push_back(std::move(dlg));
      continue;
    }
    const Entity& e = pick(world.entities, rng);
    Dialogue dlg;
    dlg.push_back(fill(pick(kOpeners, rng), e));
    dlg.push_back(fill(pick(kOpenerReplies, rng), e));
    const std::size_t questions = 1 + rng.below(2);
    for (std::size_t q : choose(kQuestions.size(), questions, rng)) {
      dlg.push_back(fill(kQuestions[q].question, e));
      dlg.push_back(fill(kQuestions[q].answer, e));
    }
    if (rng.below(2) == 0) dlg.push_back(pick(kClosers, rng));
    corpus.dialogues.push_back(std::move(dlg));
  }
  return corpus;
}

std::vector<KnowledgeTerm> world_knowledge_terms(const World& world) {
  std::vector<KnowledgeTerm> out;
  for (const auto& e : world.entities) out.push_back({e.name, fill(kNewsTemplates[0], e)});
  return out;
}

std::vector<std::string> world_words(const World& world) {
  std::set<std::string> words;
  auto add = [&](const std::string& s) {
    for (auto& w : text::split_words(s)) words.insert(w);
  };
  std::vector<const std::vector<std::string>*> lists = {&kNewsTemplates, &kOpeners, &kOpenerReplies, &kClosers,
                                                        &kPairNewsTemplates};
  for (const auto* r : kReferents) add(r);
  for (const auto& e : world.entities) {
    for (const auto& t : kPairIntros) add(fill_pair(t, e, e));
    for (const auto& t : kPairOpeners) add(fill_pair(t, e, e));
    for (const auto& t : kPairOpenerReplies) add(fill_pair(t, e, e));
    for (const auto& qa : kPairQuestions) {
      add(fill(qa.question, e));
      add(fill(qa.answer, e));
    }
    for (const auto* list : lists) {
      for (const auto& t : *list) add(fill(t, e));
    }
    for (const auto& qa : kQuestions) {
      add(fill(qa.question, e));
      add(fill(qa.answer, e));
    }
  }
  return {words.begin(), words.end()};
}

}  // namespace fgl
