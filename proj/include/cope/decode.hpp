#pragma once

// Generation: reward-guided contrastive decoding plus greedy and sampling
// baselines sharing one repetition-penalty and stopping policy.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cope/lmcore.hpp"
#include "cope/reward.hpp"

namespace cope {

struct DecodeConfig {
  double tau = 0.1;
  double alpha = 0.3;
  double repetition_penalty = 1.0;
  double temperature = 1.0;
  std::size_t max_new_tokens = 64;
  bool stop_on_eos = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DecodeStep {
  std::size_t head_size = 0;
  TokenId token = 0;
  double reward = 0.0;
  double user_lp = 0.0;  // after repetition penalty
  double base_lp = 0.0;
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;

  /// One JSON object per line: step, head_size, token, reward, user_lp, base_lp.
  /// A non-negative `instance` is written as an extra leading field.
  void write_jsonl(std::ostream& out, long long instance = -1) const;
};

/// Subtracts ln(penalty) from the log-prob of every distinct token in
/// `history`, then renormalizes. penalty == 1 returns the input unchanged.
/// Throws std::invalid_argument for penalty < 1.
LogProbVector apply_repetition_penalty(const LogProbVector& lp, std::span<const TokenId> history,
                                       double penalty);

/// One contrastive step: penalize user_lp, gate by the plausibility head,
/// score head members by user_lp - alpha * base_lp and return the argmax.
/// Ties go to the higher (penalized) user probability, then the lower id.
std::pair<TokenId, DecodeStep> cope_step(const LogProbVector& user_lp,
                                         const LogProbVector& base_lp, const DecodeConfig& cfg,
                                         std::span<const TokenId> history);

struct Generation {
  TokenSequence tokens;  // includes the final eos if one was emitted
  DecodeTrace trace;
};

/// Both models condition on prompt + generated prefix. `history` for the
/// repetition penalty is the generated prefix.
Generation cope_generate(const LanguageModel& user, const LanguageModel& base,
                         std::span<const TokenId> prompt, const DecodeConfig& cfg);

TokenSequence greedy_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                              const DecodeConfig& cfg);

/// Categorical sampling from softmax(penalized_lp / temperature), inverse-CDF
/// in token-id order. Deterministic for a given seed.
TokenSequence sample_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                              double temperature, std::uint64_t seed, const DecodeConfig& cfg);

class Rng;
/// Draws one token from softmax(lp / temperature).
TokenId sample_token(const LogProbVector& lp, double temperature, Rng& rng);

}  // namespace cope
