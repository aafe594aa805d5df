#include "cope/decode.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "cope/random.hpp"

namespace cope {

void DecodeConfig::validate() const {
  RewardConfig{.alpha = alpha, .tau = tau}.validate();
  if (!(repetition_penalty >= 1.0)) throw std::invalid_argument("repetition_penalty must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
}

void DecodeTrace::write_jsonl(std::ostream& out, long long instance) const {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    nlohmann::ordered_json j;
    if (instance >= 0) j["instance"] = instance;
    j["step"] = i;
    j["head_size"] = s.head_size;
    j["token"] = s.token;
    j["reward"] = s.reward;
    j["user_lp"] = s.user_lp;
    j["base_lp"] = s.base_lp;
    out << j.dump() << '\n';
  }
}

LogProbVector apply_repetition_penalty(const LogProbVector& lp, std::span<const TokenId> history,
                                       double penalty) {
  if (!(penalty >= 1.0)) throw std::invalid_argument("repetition penalty must be >= 1");
  if (penalty == 1.0 || history.empty()) return lp;
  std::vector<double> v(lp.values().begin(), lp.values().end());
  std::vector<bool> seen(v.size(), false);
  const double drop = std::log(penalty);
  for (TokenId t : history) {
    if (t >= v.size()) throw std::out_of_range("history token outside vocabulary");
    if (!seen[t]) {
      seen[t] = true;
      v[t] -= drop;
    }
  }
  return LogProbVector::from_logits(v);
}

namespace {

// Higher reward, then higher user log-prob, then lower id.
bool better(double reward, double user_lp, TokenId id, double best_reward, double best_user_lp,
            TokenId best_id) {
  if (reward != best_reward) return reward > best_reward;
  if (user_lp != best_user_lp) return user_lp > best_user_lp;
  return id < best_id;
}

bool stop_after(TokenId token, const Vocabulary& vocab, const DecodeConfig& cfg) {
  return cfg.stop_on_eos && token == vocab.eos();
}

}  // namespace

std::pair<TokenId, DecodeStep> cope_step(const LogProbVector& user_lp,
                                         const LogProbVector& base_lp, const DecodeConfig& cfg,
                                         std::span<const TokenId> history) {
  if (user_lp.size() != base_lp.size()) {
    throw std::invalid_argument("cope_step: user and base vocabularies differ in size");
  }
  const LogProbVector penalized = apply_repetition_penalty(user_lp, history, cfg.repetition_penalty);
  const HeadSet head = plausibility_head(penalized, cfg.tau);

  DecodeStep step;
  step.head_size = head.ids.size();
  bool first = true;
  for (TokenId t : head.ids) {
    const double r = token_reward(floored(penalized[t]), floored(base_lp[t]), cfg.alpha);
    if (first || better(r, penalized[t], t, step.reward, step.user_lp, step.token)) {
      first = false;
      step.token = t;
      step.reward = r;
      step.user_lp = penalized[t];
    }
  }
  step.base_lp = base_lp[step.token];
  return {step.token, step};
}

Generation cope_generate(const LanguageModel& user, const LanguageModel& base,
                         std::span<const TokenId> prompt, const DecodeConfig& cfg) {
  cfg.validate();
  if (user.vocabulary().size() != base.vocabulary().size()) {
    throw std::invalid_argument("cope_generate: user and base vocabularies differ");
  }
  user.vocabulary().validate(prompt);
  Generation gen;
  TokenSequence context(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < cfg.max_new_tokens; ++i) {
    const auto [token, step] =
        cope_step(user.next_log_probs(context), base.next_log_probs(context), cfg, gen.tokens);
    gen.tokens.push_back(token);
    gen.trace.steps.push_back(step);
    context.push_back(token);
    if (stop_after(token, user.vocabulary(), cfg)) break;
  }
  return gen;
}

TokenSequence greedy_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                              const DecodeConfig& cfg) {
  cfg.validate();
  model.vocabulary().validate(prompt);
  TokenSequence out;
  TokenSequence context(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < cfg.max_new_tokens; ++i) {
    const LogProbVector lp =
        apply_repetition_penalty(model.next_log_probs(context), out, cfg.repetition_penalty);
    const TokenId token = lp.argmax();
    out.push_back(token);
    context.push_back(token);
    if (stop_after(token, model.vocabulary(), cfg)) break;
  }
  return out;
}

TokenId sample_token(const LogProbVector& lp, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  std::vector<double> scaled(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) scaled[i] = lp[i] / temperature;
  const double lse = logsumexp(scaled);
  const double u = rng.uniform();
  double cum = 0.0;
  TokenId last_positive = lp.argmax();
  for (TokenId t = 0; t < scaled.size(); ++t) {
    const double p = std::exp(scaled[t] - lse);
    if (p <= 0.0) continue;
    last_positive = t;
    cum += p;
    if (u < cum) return t;
  }
  return last_positive;
}

TokenSequence sample_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                              double temperature, std::uint64_t seed, const DecodeConfig& cfg) {
  cfg.validate();
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  model.vocabulary().validate(prompt);
  Rng rng(seed);
  TokenSequence out;
  TokenSequence context(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < cfg.max_new_tokens; ++i) {
    const LogProbVector lp =
        apply_repetition_penalty(model.next_log_probs(context), out, cfg.repetition_penalty);
    const TokenId token = sample_token(lp, temperature, rng);
    out.push_back(token);
    context.push_back(token);
    if (stop_after(token, model.vocabulary(), cfg)) break;
  }
  return out;
}

}  // namespace cope
