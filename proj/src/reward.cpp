#include "cope/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace cope {

void RewardConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must be in [0, 1]");
}

bool HeadSet::contains(TokenId id) const {
  return std::binary_search(ids.begin(), ids.end(), id);
}

HeadSet plausibility_head(const LogProbVector& user_lp, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("plausibility_head: tau must be in [0, 1]");
  }
  HeadSet head;
  const double max_lp = user_lp[user_lp.argmax()];
  head.log_threshold = tau == 0.0 ? -std::numeric_limits<double>::infinity()
                                  : std::log(tau) + max_lp;
  for (TokenId t = 0; t < user_lp.size(); ++t) {
    if (tau == 0.0 || user_lp[t] >= head.log_threshold) head.ids.push_back(t);
  }
  return head;
}

double sequence_reward(const LanguageModel& user, const LanguageModel& base,
                       std::span<const TokenId> prompt, std::span<const TokenId> y,
                       const RewardConfig& cfg) {
  if (y.empty()) throw std::invalid_argument("sequence_reward: empty response");
  cfg.validate();
  const std::vector<double> u = token_log_probs(user, prompt, y);
  const std::vector<double> b = token_log_probs(base, prompt, y);
  double total = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) total += token_reward(u[t], b[t], cfg.alpha);
  return cfg.length_normalize ? total / static_cast<double>(y.size()) : total;
}

std::size_t SeparationReport::users_own_higher() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) {
    return r.score_own > r.score_others_mean;
  }));
}

void SeparationReport::write_csv(std::ostream& out) const {
  char buf[128];
  out << "user_id,score_own,score_others_mean\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", r.score_own, r.score_others_mean);
    out << r.user_id << buf;
  }
  std::snprintf(buf, sizeof buf, "avg,%.17g,%.17g\n", global_own, global_others);
  out << buf;
}

SeparationReport reward_separation_report(std::span<const UserModelSamples> users,
                                          const LanguageModel& base) {
  if (users.size() < 2) throw std::invalid_argument("reward separation needs at least 2 users");
  for (const auto& u : users) {
    if (u.model == nullptr) throw std::invalid_argument("user " + u.user_id + " has no model");
    if (u.samples.empty()) throw std::invalid_argument("user " + u.user_id + " has no samples");
  }

  const RewardConfig cfg{.alpha = 1.0, .tau = 0.0, .length_normalize = true};
  auto mean_score = [&](const LanguageModel& model, const std::vector<ScoredSample>& samples) {
    double s = 0.0;
    for (const auto& smp : samples) {
      s += sequence_reward(model, base, smp.prompt, smp.response, cfg);
    }
    return s / static_cast<double>(samples.size());
  };

  SeparationReport report;
  for (std::size_t i = 0; i < users.size(); ++i) {
    SeparationRow row;
    row.user_id = users[i].user_id;
    row.score_own = mean_score(*users[i].model, users[i].samples);
    double others = 0.0;
    for (std::size_t j = 0; j < users.size(); ++j) {
      if (j != i) others += mean_score(*users[j].model, users[i].samples);
    }
    row.score_others_mean = others / static_cast<double>(users.size() - 1);
    report.global_own += row.score_own;
    report.global_others += row.score_others_mean;
    report.rows.push_back(row);
  }
  report.global_own /= static_cast<double>(users.size());
  report.global_others /= static_cast<double>(users.size());
  return report;
}

}  // namespace cope
