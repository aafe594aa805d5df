#pragma once

// Implicit user reward: log pi_user(y_t) - alpha * log pi_base(y_t), the
// plausibility head that gates it, and the own-vs-others separation report.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cope/lmcore.hpp"

namespace cope {

struct RewardConfig {
  double alpha = 1.0;  // contrastive weight, >= 0
  double tau = 0.1;    // plausibility threshold, in [0, 1]
  bool length_normalize = false;

  void validate() const;
};

struct HeadSet {
  std::vector<TokenId> ids;  // ascending
  double log_threshold = 0.0;  // log tau + max log p_user

  bool contains(TokenId id) const;
};

/// {t : log p_user(t) >= log tau + max_w log p_user(w)}. tau = 0 admits every
/// token. Throws std::invalid_argument for tau outside [0, 1].
HeadSet plausibility_head(const LogProbVector& user_lp, double tau);

/// user_lp - alpha * base_lp. alpha = 0 ignores base_lp entirely.
inline double token_reward(double user_lp, double base_lp, double alpha) {
  return alpha == 0.0 ? user_lp : user_lp - alpha * base_lp;
}

/// Sum (or mean, if cfg.length_normalize) of token rewards over y, both models
/// conditioned on prompt + y_<t, each log-prob floored at -50.
/// Throws std::invalid_argument on empty y.
double sequence_reward(const LanguageModel& user, const LanguageModel& base,
                       std::span<const TokenId> prompt, std::span<const TokenId> y,
                       const RewardConfig& cfg);

/// One scored sample: the prompt and the response tokens.
struct ScoredSample {
  TokenSequence prompt;
  TokenSequence response;
};

struct UserModelSamples {
  std::string user_id;
  const LanguageModel* model = nullptr;  // that user's personalized model
  std::vector<ScoredSample> samples;
};

struct SeparationRow {
  std::string user_id;
  double score_own = 0.0;
  double score_others_mean = 0.0;
};

struct SeparationReport {
  std::vector<SeparationRow> rows;
  double global_own = 0.0;     // mean of score_own over users
  double global_others = 0.0;  // mean of score_others_mean over users

  std::size_t users_own_higher() const;
  /// Columns: user_id,score_own,score_others_mean; then an `avg` row.
  void write_csv(std::ostream& out) const;
};

/// For each user i: mean length-normalized reward (alpha = 1) of i's samples
/// under i's model (score_own) and the mean of that quantity under every
/// other user's model (score_others_mean). Requires >= 2 users, each with
/// >= 1 sample.
SeparationReport reward_separation_report(std::span<const UserModelSamples> users,
                                          const LanguageModel& base);

}  // namespace cope
