#pragma once

// Synthetic per-user corpus: every user fills a shared set of sentence
// templates with their own word choices, so a per-user adapter has a
// measurable style to learn.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cope {

inline constexpr std::size_t kSlotCount = 4;

/// Words a template slot can take. Index into these from UserProfile::lexicon.
const std::array<std::vector<std::string>, kSlotCount>& slot_words();
const std::vector<std::string>& slot_names();
const std::vector<std::string>& corpus_templates();
const std::vector<std::string>& corpus_topics();

struct UserProfile {
  std::string user_id;
  std::array<std::size_t, kSlotCount> lexicon{};  // preferred word per slot
  std::vector<std::size_t> templates;             // template indices this user writes
  std::size_t n_train = 24;
  std::size_t n_test = 8;
  std::uint64_t seed = 0;
  /// Probability of using the preferred word in each slot; otherwise a
  /// uniformly random word from the slot.
  double adherence = 0.85;
  /// Background users feed the pooled task-stage file and are not evaluated.
  bool background = false;

  void validate() const;
};

struct CorpusRecord {
  std::string user_id;
  std::string split;  // "train" | "test"
  std::string input;
  std::string output;

  bool operator==(const CorpusRecord&) const = default;
};

/// 10 evaluated users plus 20 background users with pairwise-distinct
/// lexicons (any two evaluated users differ in at least 2 slots).
std::vector<UserProfile> default_user_profiles(std::uint64_t seed, std::size_t evaluated = 10,
                                         std::size_t background = 20);

/// Deterministic records for one user.
std::vector<CorpusRecord> generate_user_records(const UserProfile& profile, std::uint64_t global_seed);

struct CorpusIndex {
  std::vector<std::string> users;  // evaluated user ids, in profile order
  std::string pooled = "pooled.jsonl";
};

/// Writes <dir>/<user>.train.jsonl, <dir>/<user>.test.jsonl for evaluated
/// users, <dir>/pooled.jsonl with every background user's records and
/// <dir>/index.json. Throws std::invalid_argument on duplicate user ids or
/// an empty profile list.
CorpusIndex gen_corpus(const std::vector<UserProfile>& profiles, std::uint64_t global_seed,
                       const std::filesystem::path& dir);

/// JSON-lines: {"user_id", "split", "input", "output"} per line.
std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records);
CorpusIndex read_corpus_index(const std::filesystem::path& dir);

std::filesystem::path user_split_path(const std::filesystem::path& dir, const std::string& user,
                                      const std::string& split);

}  // namespace cope
