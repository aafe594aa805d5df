#include "cope/prefopt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cope/random.hpp"
#include "cope/reward.hpp"

namespace cope {

void NegativeSynthesisConfig::validate() const {
  if (k < 1) throw std::invalid_argument("negative synthesis: K must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("negative synthesis: temperature must be > 0");
  if (max_new_tokens < 1) throw std::invalid_argument("negative synthesis: max_new_tokens must be >= 1");
}

std::uint64_t candidate_seed(std::uint64_t prompt_seed, std::size_t k) {
  return splitmix64(prompt_seed ^ splitmix64(static_cast<std::uint64_t>(k) + 1));
}

NegativeResult synthesize_negative(const LanguageModel& sampler, const LanguageModel& user,
                                   const LanguageModel& base, std::span<const TokenId> prompt,
                                   const NegativeSynthesisConfig& cfg) {
  cfg.validate();
  DecodeConfig dc;
  dc.temperature = cfg.temperature;
  dc.max_new_tokens = cfg.max_new_tokens;
  const RewardConfig scoring{.alpha = 1.0, .tau = 0.0, .length_normalize = false};
  const Vocabulary& vocab = sampler.vocabulary();

  NegativeResult result;
  bool found = false;
  for (std::size_t k = 0; k < cfg.k; ++k) {
    NegativeCandidate c;
    c.tokens = sample_generate(sampler, prompt, cfg.temperature, candidate_seed(cfg.seed, k), dc);
    c.empty = vocab.decode_text(c.tokens).empty();
    if (!c.empty) {
      c.score = sequence_reward(user, base, prompt, c.tokens, scoring);
      if (!found || c.score < result.candidates[result.chosen].score) {
        result.chosen = k;
        found = true;
      }
    }
    result.candidates.push_back(std::move(c));
  }
  if (!found) throw std::runtime_error("negative synthesis: all candidates are empty");
  return result;
}

NegativeResult synthesize_negative(const LanguageModel& base, const LanguageModel& user,
                                   std::span<const TokenId> prompt,
                                   const NegativeSynthesisConfig& cfg) {
  return synthesize_negative(base, user, base, prompt, cfg);
}

PreferenceDataset build_preference_dataset(std::span<const HistoryPair> history,
                                           const std::map<std::size_t, TokenSequence>& negatives) {
  PreferenceDataset out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    auto it = negatives.find(i);
    if (it == negatives.end()) {
      throw std::invalid_argument("no negative for history prompt " + std::to_string(i));
    }
    if (it->second == history[i].response) {
      out.warnings.push_back("history prompt " + std::to_string(i) +
                             ": negative equals gold response, dropped");
      continue;
    }
    if (history[i].response.empty() || it->second.empty()) {
      out.warnings.push_back("history prompt " + std::to_string(i) + ": empty response, dropped");
      continue;
    }
    out.triples.push_back({history[i].prompt, history[i].response, it->second});
  }
  return out;
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double dpo_margin(const LanguageModel& policy, const LanguageModel& reference,
                  const PreferenceTriple& t) {
  return (sequence_log_prob(policy, t.prompt, t.chosen) -
          sequence_log_prob(reference, t.prompt, t.chosen)) -
         (sequence_log_prob(policy, t.prompt, t.rejected) -
          sequence_log_prob(reference, t.prompt, t.rejected));
}

double dpo_loss(const LanguageModel& policy, const LanguageModel& reference,
                const PreferenceTriple& triple, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("dpo_loss: beta must be > 0");
  return softplus(-beta * dpo_margin(policy, reference, triple));
}

void DpoConfig::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("DPO beta must be > 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("DPO learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("DPO batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("DPO weight_decay must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw std::invalid_argument("DPO warmup_ratio must be in [0, 1]");
  }
}

ReferenceScores reference_scores(const LanguageModel& reference, const PreferenceTriple& t) {
  return {sequence_log_prob(reference, t.prompt, t.chosen),
          sequence_log_prob(reference, t.prompt, t.rejected)};
}

namespace {

// Sum of floored log-probs of `cont`; when coeff != 0 also accumulates
// coeff * d/d(adapter) of that sum (floored tokens contribute no gradient).
double policy_log_prob(const ModelParams& params, const AdapterDelta& adapter,
                       const TokenSequence& prompt, const TokenSequence& cont, double coeff,
                       AdapterDelta* grad, Workspace& ws) {
  TokenSequence context = prompt;
  double total = 0.0;
  for (TokenId y : cont) {
    forward_into(params, &adapter, context, ws);
    const double lp = ws.log_probs.at(y);
    total += floored(lp);
    if (grad != nullptr && coeff != 0.0 && lp >= kLogProbFloor) {
      accumulate_log_prob_grad(params, &adapter, ws, y, coeff, nullptr, grad);
    }
    context.push_back(y);
  }
  return total;
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

double dpo_loss_and_grad(const ModelParams& params, const AdapterDelta& adapter,
                         std::span<const PreferenceTriple> batch,
                         std::span<const ReferenceScores> reference, double beta,
                         AdapterDelta* adapter_grad) {
  if (batch.empty()) throw TrainingError("dpo: empty batch");
  if (batch.size() != reference.size()) throw std::invalid_argument("dpo: reference size mismatch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  Workspace ws;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const PreferenceTriple& t = batch[i];
    const double pos = policy_log_prob(params, adapter, t.prompt, t.chosen, 0.0, nullptr, ws);
    const double neg = policy_log_prob(params, adapter, t.prompt, t.rejected, 0.0, nullptr, ws);
    const double margin = (pos - reference[i].chosen) - (neg - reference[i].rejected);
    total += softplus(-beta * margin);
    if (adapter_grad != nullptr) {
      // d/dmargin softplus(-beta m) = -beta * sigmoid(-beta m)
      const double dmargin = -beta * sigmoid(-beta * margin) * inv;
      policy_log_prob(params, adapter, t.prompt, t.chosen, dmargin, adapter_grad, ws);
      policy_log_prob(params, adapter, t.prompt, t.rejected, -dmargin, adapter_grad, ws);
    }
  }
  return total * inv;
}

DpoReport train_dpo(const ModelParams& params, AdapterDelta& adapter,
                    const LanguageModel& reference, std::span<const PreferenceTriple> dataset,
                    const DpoConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw TrainingError("train_dpo: empty dataset");
  adapter.validate(params.dims);

  std::vector<ReferenceScores> ref;
  ref.reserve(dataset.size());
  for (const auto& t : dataset) ref.push_back(reference_scores(reference, t));

  auto mean_margin = [&]() {
    Workspace ws;
    double s = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto& t = dataset[i];
      const double pos = policy_log_prob(params, adapter, t.prompt, t.chosen, 0.0, nullptr, ws);
      const double neg = policy_log_prob(params, adapter, t.prompt, t.rejected, 0.0, nullptr, ws);
      s += cfg.beta * ((pos - ref[i].chosen) - (neg - ref[i].rejected));
    }
    return s / static_cast<double>(dataset.size());
  };

  DpoReport report;
  report.mean_margin_before = mean_margin();
  report.initial_loss = dpo_loss_and_grad(params, adapter, dataset, ref, cfg.beta, nullptr);

  const std::size_t n = dataset.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<PreferenceTriple> batch;
  std::vector<ReferenceScores> batch_ref;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t b = 0; b < per_epoch; ++b) {
      batch.clear();
      batch_ref.clear();
      for (std::size_t i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(dataset[order[i]]);
        batch_ref.push_back(ref[order[i]]);
      }
      AdapterDelta grad = adapter;
      for (auto t : grad.tensors()) std::fill(t.begin(), t.end(), 0.0);
      const double loss = dpo_loss_and_grad(params, adapter, batch, batch_ref, cfg.beta, &grad);
      if (!std::isfinite(loss)) {
        throw TrainingError("train_dpo: non-finite loss at step " + std::to_string(report.steps));
      }
      const double lr =
          scheduled_learning_rate(cfg.learning_rate, cfg.warmup_ratio, report.steps, total);
      const auto g = grad.tensors();
      sgd_update(adapter.tensors(), {g.begin(), g.end()}, lr, cfg.weight_decay);
      ++report.steps;
    }
    report.epoch_losses.push_back(dpo_loss_and_grad(params, adapter, dataset, ref, cfg.beta, nullptr));
  }
  report.mean_margin_after = mean_margin();
  return report;
}

}  // namespace cope
