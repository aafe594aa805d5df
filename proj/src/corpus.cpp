#include "cope/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "cope/hash.hpp"
#include "cope/random.hpp"

namespace cope {

const std::array<std::vector<std::string>, kSlotCount>& slot_words() {
  static const std::array<std::vector<std::string>, kSlotCount> words = {{
      {"great", "superb", "lovely", "decent", "solid", "tasty", "grand", "fresh"},
      {"truly", "really", "simply", "deeply", "fully", "quite", "rather", "surely"},
      {"loved", "enjoyed", "liked", "praised", "savored", "adored", "relished", "valued"},
      {"for sure", "no doubt", "indeed", "as always", "every time", "all day", "for real",
       "my friend"},
  }};
  return words;
}

const std::vector<std::string>& slot_names() {
  static const std::vector<std::string> names = {"adj", "adv", "verb", "close"};
  return names;
}

const std::vector<std::string>& corpus_templates() {
  // {topic} first so the copy from the prompt stays inside a short window.
  static const std::vector<std::string> t = {
      "{topic} was {adj} and i {adv} {verb} it {close}",
      "{topic} is so {adj} i {adv} {verb} it {close}",
      "{topic} tasted {adj} so i {adv} {verb} it {close}",
  };
  return t;
}

const std::vector<std::string>& corpus_topics() {
  static const std::vector<std::string> t = {
      "tea",   "cake",  "soup",  "rice",  "bread", "wine",  "beer",  "fish",
      "pasta", "salad", "pizza", "jam",   "milk",  "juice", "curry", "tacos",
      "ramen", "sushi", "pie",   "stew",  "fries", "steak", "honey", "lemon",
  };
  return t;
}

void UserProfile::validate() const {
  if (user_id.empty()) throw std::invalid_argument("user profile: empty user_id");
  if (user_id.find_first_of("/\\ \n,") != std::string::npos) {
    throw std::invalid_argument("user profile: user_id '" + user_id + "' has reserved characters");
  }
  for (std::size_t s = 0; s < kSlotCount; ++s) {
    if (lexicon[s] >= slot_words()[s].size()) {
      throw std::invalid_argument("user profile " + user_id + ": lexicon index out of range");
    }
  }
  if (templates.empty()) throw std::invalid_argument("user profile " + user_id + ": no templates");
  for (std::size_t t : templates) {
    if (t >= corpus_templates().size()) {
      throw std::invalid_argument("user profile " + user_id + ": template index out of range");
    }
  }
  if (n_train < 1) throw std::invalid_argument("user profile " + user_id + ": n_train must be >= 1");
  if (!background && n_test < 1) {
    throw std::invalid_argument("user profile " + user_id + ": n_test must be >= 1");
  }
  if (!(adherence >= 0.0 && adherence <= 1.0)) {
    throw std::invalid_argument("user profile " + user_id + ": adherence must be in [0, 1]");
  }
}

std::vector<UserProfile> default_user_profiles(std::uint64_t seed, std::size_t evaluated,
                                         std::size_t background) {
  Rng rng(seed);
  std::vector<UserProfile> profiles;
  auto differing_slots = [](const UserProfile& a, const UserProfile& b) {
    std::size_t d = 0;
    for (std::size_t s = 0; s < kSlotCount; ++s) d += a.lexicon[s] != b.lexicon[s] ? 1 : 0;
    return d;
  };
  for (std::size_t i = 0; i < evaluated + background; ++i) {
    const bool bg = i >= evaluated;
    UserProfile profile;
    char id[16];
    std::snprintf(id, sizeof id, bg ? "bg%02zu" : "u%02zu", bg ? i - evaluated : i);
    profile.user_id = id;
    profile.background = bg;
    profile.seed = rng.next_u64();
    profile.templates = {rng.below(corpus_templates().size())};
    for (;;) {
      for (std::size_t s = 0; s < kSlotCount; ++s) profile.lexicon[s] = rng.below(slot_words()[s].size());
      const bool distinct = std::all_of(profiles.begin(), profiles.end(), [&](const UserProfile& o) {
        const std::size_t need = (!bg && !o.background) ? 2 : 1;
        return differing_slots(profile, o) >= need;
      });
      if (distinct) break;
    }
    if (bg) profile.n_test = 0;
    profiles.push_back(std::move(profile));
  }
  return profiles;
}

std::vector<CorpusRecord> generate_user_records(const UserProfile& profile, std::uint64_t global_seed) {
  profile.validate();
  Rng rng(global_seed ^ profile.seed ^ fnv1a(profile.user_id));
  const auto& topics = corpus_topics();
  const auto& words = slot_words();
  const auto& names = slot_names();

  std::vector<CorpusRecord> out;
  const std::size_t total = profile.n_train + profile.n_test;
  for (std::size_t i = 0; i < total; ++i) {
    const std::string& topic = topics[rng.below(topics.size())];
    std::string text = corpus_templates()[profile.templates[rng.below(profile.templates.size())]];
    auto fill = [&text](const std::string& slot, const std::string& value) {
      const std::string key = "{" + slot + "}";
      const auto pos = text.find(key);
      text.replace(pos, key.size(), value);
    };
    fill("topic", topic);
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      const bool own = rng.uniform() < profile.adherence;
      const std::size_t w = own ? profile.lexicon[s] : rng.below(words[s].size());
      fill(names[s], words[s][w]);
    }
    out.push_back({profile.user_id, i < profile.n_train ? "train" : "test", topic, text});
  }
  return out;
}

std::filesystem::path user_split_path(const std::filesystem::path& dir, const std::string& user,
                                      const std::string& split) {
  return dir / (user + "." + split + ".jsonl");
}

void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j = {
        {"user_id", r.user_id}, {"split", r.split}, {"input", r.input}, {"output", r.output}};
    out << j.dump() << '\n';
  }
}

std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusRecord r{j.at("user_id").get<std::string>(), j.at("split").get<std::string>(),
                     j.at("input").get<std::string>(), j.at("output").get<std::string>()};
      if (r.split != "train" && r.split != "test") throw std::runtime_error("bad split");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

CorpusIndex gen_corpus(const std::vector<UserProfile>& profiles, std::uint64_t global_seed,
                       const std::filesystem::path& dir) {
  if (profiles.empty()) throw std::invalid_argument("gen_corpus: no users");
  std::set<std::string> ids;
  for (const auto& s : profiles) {
    s.validate();
    if (!ids.insert(s.user_id).second) {
      throw std::invalid_argument("gen_corpus: duplicate user_id " + s.user_id);
    }
  }
  std::filesystem::create_directories(dir);

  CorpusIndex index;
  std::vector<CorpusRecord> pooled;
  for (const auto& profile : profiles) {
    auto records = generate_user_records(profile, global_seed);
    if (profile.background) {
      pooled.insert(pooled.end(), records.begin(), records.end());
      continue;
    }
    std::vector<CorpusRecord> train, test;
    for (auto& r : records) (r.split == "train" ? train : test).push_back(std::move(r));
    write_jsonl(user_split_path(dir, profile.user_id, "train"), train);
    write_jsonl(user_split_path(dir, profile.user_id, "test"), test);
    index.users.push_back(profile.user_id);
  }
  write_jsonl(dir / index.pooled, pooled);

  std::ofstream out(dir / "index.json", std::ios::binary);
  nlohmann::ordered_json j = {{"users", index.users}, {"pooled", index.pooled}};
  out << j.dump(2) << '\n';
  return index;
}

CorpusIndex read_corpus_index(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json", std::ios::binary);
  if (!in) throw std::runtime_error("corpus index not found in " + dir.string());
  const auto j = nlohmann::json::parse(in);
  CorpusIndex index;
  index.users = j.at("users").get<std::vector<std::string>>();
  index.pooled = j.at("pooled").get<std::string>();
  return index;
}

}  // namespace cope
